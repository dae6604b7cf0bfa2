import io

import numpy as np
import pytest

from fedsi.codec import EncodedGradient, RawGradient, decode_bins, encode_bins
from fedsi.fedsim import (
    Compressor,
    DivergenceError,
    ModelState,
    RunConfig,
    Upload,
    client_upload,
    decode_upload,
    local_epoch,
    run,
    server_round,
    substream,
)
from fedsi.policy import SideInfoState
from fedsi.tasks import RegressionTask, generate_synthetic


def identity_task(target, n_clients=1):
    """f(w) = ||w - target||^2 / d with gradient (2/d)(w - target); A = I.

    Scaling A by sqrt(d/2) turns this into 0.5 ||w - target||^2 with gradient w - target.
    """
    d = len(target)
    A = np.sqrt(d / 2.0) * np.eye(d)
    b = A @ np.asarray(target, dtype=float)
    t = RegressionTask(A, b)
    if n_clients > 1:
        raise ValueError("single shard only")
    return t


@pytest.fixture(scope="module")
def small_task():
    return generate_synthetic(800, 5, 0.2, seed=0).with_shards(4, seed=0)


def test_single_step_is_one_gradient():
    task = identity_task([1.0, -2.0])
    cfg = RunConfig(n_clients=1, local_updates=1, batch_size=10)
    g = local_epoch(ModelState(np.array([3.0, 0.0])), 0, 0, cfg, task)
    np.testing.assert_allclose(g, [2.0, 2.0])


def test_two_exact_steps_on_quadratic():
    # grad = w - w*; with w = w* + v: g0 = v, w1 = w* + (1 - eta) v, g1 = (1 - eta) v
    w_star = np.array([0.5, -1.0, 2.0])
    v = np.array([1.0, 2.0, -3.0])
    eta = 0.3
    task = identity_task(w_star)
    cfg = RunConfig(n_clients=1, local_updates=2, local_lr=eta, batch_size=100)
    g = local_epoch(ModelState(w_star + v), 0, 0, cfg, task)
    np.testing.assert_allclose(g, v + (1 - eta) * v, rtol=1e-12)


def test_full_batch_matches_reference_loop(small_task):
    cfg = RunConfig(n_clients=4, local_updates=5, local_lr=0.05, batch_size=10_000)
    w0 = np.linspace(-1, 1, 5)
    got = local_epoch(ModelState(w0), 2, 7, cfg, small_task)
    A, b = small_task.A[small_task.shards[2]], small_task.b[small_task.shards[2]]
    w, acc = w0.copy(), np.zeros(5)
    for _ in range(5):
        g = 2.0 / len(b) * A.T @ (A @ w - b)
        acc += g
        w = w - 0.05 * g
    np.testing.assert_allclose(got, acc, rtol=1e-12)


def test_local_model_is_not_mutated(small_task):
    m = ModelState(np.ones(5))
    local_epoch(m, 0, 0, RunConfig(n_clients=4, local_updates=3, batch_size=7), small_task)
    np.testing.assert_array_equal(m.omega, np.ones(5))
@pytest.mark.filterwarnings("ignore:invalid value encountered:RuntimeWarning")


def test_nonfinite_gradient_aborts(small_task):
    m = ModelState(np.full(5, np.inf))
    with pytest.raises(DivergenceError):
        local_epoch(m, 0, 0, RunConfig(n_clients=4), small_task)


class TestUpload:
    def test_round_zero_lqsgd_equals_qsgd(self):
        g = np.array([0.4, -1.0, 2.5, 0.0])
        state = SideInfoState.initial(4, 1.0)
        a = client_upload(g, state, RunConfig(compressor="lqsgd"), np.random.default_rng(3))
        b = client_upload(g, state, RunConfig(compressor="qsgd"), np.random.default_rng(3))
        assert a.alpha is False and b.alpha is False
        assert a.message.to_bytes() == b.message.to_bytes()

    def test_none_is_bit_exact(self):
        g = np.array([1e-17, -3.0, np.pi])
        up = client_upload(g, SideInfoState.initial(3), RunConfig(compressor="none"), None)
        assert isinstance(up.message, RawGradient)
        assert up.bits == 3 * 64
        assert decode_upload(up, SideInfoState.initial(3)).tobytes() == g.tobytes()

    def test_qsgd_never_uses_side_info(self):
        g = np.array([1.0, 2.0, 3.0])
        state = SideInfoState(g.copy(), 1.0)
        up = client_upload(g, state, RunConfig(compressor="qsgd"), np.random.default_rng(0))
        assert up.alpha is False
        assert up.message.scale == pytest.approx(np.linalg.norm(g))

    def test_lqsgd_uses_close_side_info(self):
        g = np.array([1.0, 2.0, 3.0])
        state = SideInfoState(g + 0.01, 0.5)
        up = client_upload(g, state, RunConfig(compressor="lqsgd"), np.random.default_rng(0))
        assert up.alpha is True
        assert up.message.scale == pytest.approx(np.linalg.norm([0.01] * 3))
        back = decode_upload(up, state)
        assert np.all(np.abs(back - g) <= up.message.epsilon * (1 + 1e-12))

    def test_qsgd_matches_qsgdinf_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            g = rng.normal(size=9)
            s = 6
            up = client_upload(g, SideInfoState.initial(9), RunConfig(compressor="qsgd", resolution=s, norm_mode="linf"),
                               np.random.default_rng(42))
            u = np.random.default_rng(42).random(9)
            levels_per_side = (s - 2) // 2
            scale = np.max(np.abs(g))
            r = g / scale * levels_per_side
            lev = np.floor(r) + (u < r - np.floor(r))
            np.testing.assert_array_equal(up.message.bins, np.mod(lev.astype(int), s))
            np.testing.assert_array_equal(decode_upload(up, SideInfoState.initial(9)), lev * (scale / levels_per_side))

    def test_rotation_roundtrip(self):
        g = np.array([1.0, -2.0, 0.5, 4.0, 3.0])
        cfg = RunConfig(compressor="lqsgd", rotation=True, resolution=16, seed=5)
        from fedsi.transform import RotationSpec
        rot = RotationSpec.for_dim(5, 5)
        state = SideInfoState(g * 0.9, 1.0)
        up = client_upload(g, state, cfg, np.random.default_rng(0), rot)
        assert up.message.d == 8 and up.d == 5
        back = decode_upload(up, state, rot)
        assert back.shape == (5,)
        assert np.linalg.norm(back - g) <= np.sqrt(8) * up.message.epsilon


class TestServer:
    def test_plain_sgd_step(self):
        cfg = RunConfig(n_clients=1, compressor="none", local_lr=0.25, global_lr=1.0)
        m = ModelState(np.array([1.0, 1.0]))
        g = np.array([2.0, -4.0])
        up = client_upload(g, SideInfoState.initial(2), cfg, None)
        new, state, rec = server_round([up], SideInfoState.initial(2), m, cfg)
        np.testing.assert_array_equal(new.omega, [0.5, 2.0])
        np.testing.assert_array_equal(state.u_prev, g)
        assert rec is None

    def test_identical_uploads_average(self):
        cfg = RunConfig(n_clients=3, compressor="none")
        v = np.array([0.1, 0.2, 0.3])
        ups = [Upload(RawGradient(v), False, 3) for _ in range(3)]
        _, state, _ = server_round(ups, SideInfoState.initial(3), ModelState(np.zeros(3)), cfg)
        np.testing.assert_allclose(state.u_prev, v, rtol=1e-15)

    def test_dimension_mismatch(self):
        cfg = RunConfig(n_clients=1, compressor="none")
        with pytest.raises(ValueError):
            server_round([Upload(RawGradient(np.ones(2)), False, 2)], SideInfoState.initial(3),
                         ModelState(np.zeros(3)), cfg)

    def test_contraction_on_quadratic(self):
        # exact gradients of 0.5||w - w*||^2 with NONE: error shrinks by |1 - eta*gamma| per round
        w_star = np.array([1.0, -1.0, 0.5])
        task = identity_task(w_star)
        for eta, gamma in [(0.3, 1.0), (0.5, 1.5), (0.9, 2.0)]:
            cfg = RunConfig(n_clients=1, rounds=15, local_lr=eta, global_lr=gamma, compressor="none", batch_size=100)
            recs = run(cfg, task, omega0=np.zeros(3)).records
            dists = np.array([r.dist_to_opt for r in recs])
            factor = abs(1 - eta * gamma)
            np.testing.assert_allclose(dists, np.linalg.norm(w_star) * factor ** np.arange(15), rtol=1e-10, atol=1e-14)
            assert np.all(np.diff(dists) < 0)

    def test_unbiased_aggregate(self):
        rng = np.random.default_rng(2)
        d, n = 6, 4
        sums = [rng.normal(size=d) for _ in range(n)]
        state = SideInfoState(rng.normal(size=d) * 0.1 + np.mean(sums, axis=0), 1.0)
        cfg = RunConfig(n_clients=n, compressor="lqsgd", resolution=4)
        replays = 10_000
        acc = np.zeros(d)
        acc_sq = np.zeros(d)
        for k in range(replays):
            ups = [client_upload(g, state, cfg, substream(99, j, k, 2)) for j, g in enumerate(sums)]
            _, new_state, _ = server_round(ups, state, ModelState(np.zeros(d)), cfg)
            acc += new_state.u_prev
            acc_sq += new_state.u_prev**2
        mean = acc / replays
        sd = np.sqrt(acc_sq / replays - mean**2) / np.sqrt(replays)
        assert np.all(np.abs(mean - np.mean(sums, axis=0)) <= 4 * sd + 1e-12)


class TestRun:
    def test_zero_rounds(self, small_task):
        res = run(RunConfig(n_clients=4, rounds=0), small_task, omega0=np.ones(5))
        assert res.records == []
        np.testing.assert_array_equal(res.model.omega, np.ones(5))

    def test_determinism(self, small_task):
        cfg = RunConfig(n_clients=4, rounds=30, batch_size=8, seed=17, compressor="lqsgd")
        a, b = run(cfg, small_task), run(cfg, small_task)
        assert a.records == b.records
        assert a.model.omega.tobytes() == b.model.omega.tobytes()

    def test_shard_count_checked(self, small_task):
        with pytest.raises(ValueError):
            run(RunConfig(n_clients=3), small_task)

    def test_divergence_guard(self, small_task):
        cfg = RunConfig(n_clients=4, rounds=200, local_lr=5.0, compressor="none")
        with pytest.raises(DivergenceError):
            run(cfg, small_task)

    def test_round_zero_never_uses_side_info(self, small_task):
        recs = run(RunConfig(n_clients=4, rounds=20, compressor="lqsgd"), small_task).records
        assert recs[0].alpha_fraction == 0.0
        assert any(r.alpha_fraction > 0 for r in recs)

    def test_bit_conservation(self, small_task):
        for comp in ("lqsgd", "qsgd", "none"):
            cfg = RunConfig(n_clients=4, rounds=12, compressor=comp, resolution=5, batch_size=16, seed=3)
            log = io.BytesIO()
            recs = run(cfg, small_task, message_log=log).records
            data = log.getvalue()
            padding = 0
            pos = 0
            while pos < len(data):
                if comp == "none":
                    _, used = RawGradient.from_bytes(data[pos:], small_task.d)
                else:
                    msg, used = EncodedGradient.from_bytes(data[pos:])
                    assert msg.payload_bits == msg.d * 3
                    padding += 8 * ((msg.payload_bits + 7) // 8) - msg.payload_bits
                pos += used
            assert sum(r.bits for r in recs) == 8 * len(data) - padding

    def test_baseline_sandwich(self):
        base = generate_synthetic(1600, 6, 0.3, seed=1)
        finals = {c: [] for c in ("lqsgd", "qsgd", "none")}
        for seed in range(20):
            task = base.with_shards(8, seed)
            for c in finals:
                cfg = RunConfig(n_clients=8, rounds=40, local_lr=0.1, batch_size=16, compressor=c, seed=seed)
                finals[c].append(run(cfg, task).records[-1].loss)
        med = {c: float(np.median(v)) for c, v in finals.items()}
        assert med["none"] <= med["lqsgd"]
        assert med["none"] <= med["qsgd"]


def test_config_validation():
    with pytest.raises(ValueError):
        RunConfig(resolution=2)
    RunConfig(resolution=2, compressor="none")
    with pytest.raises(ValueError):
        RunConfig(threshold_t=0.0)
    with pytest.raises(ValueError):
        RunConfig(local_lr=0.0)
    with pytest.raises(ValueError):
        RunConfig(compressor="zip")
