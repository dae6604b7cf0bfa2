"""Federated averaging with quantized uploads and shared side information.

Each round every client runs ``tau`` local SGD steps from the broadcast model,
uploads the quantized sum of its stochastic gradients, and the server steps
the global model along the average of the decoded uploads.  That average is
kept as the side information for the next round.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from .codec import EncodedGradient, NormMode, RawGradient, mqd_decode, mqd_encode
from .policy import SideInfoState, distance_ratio, select_alpha
from .tasks import RegressionTask
from .transform import RotationSpec, derotate, rotate

LOSS_LIMIT = 1e12

# purpose tags for per-(client, round) random substreams
_SAMPLING = 1
_QUANTIZE = 2


class Compressor(str, enum.Enum):
    LQSGD = "lqsgd"
    QSGD = "qsgd"
    NONE = "none"


class DivergenceError(RuntimeError):
    """Training produced non-finite values or exploded past ``LOSS_LIMIT``."""


@dataclass(frozen=True)
class RunConfig:
    n_clients: int = 8
    rounds: int = 100
    local_updates: int = 1
    local_lr: float = 0.1
    global_lr: float = 1.0
    threshold_t: float = 1.0
    resolution: int = 4
    norm_mode: NormMode = NormMode.L2
    rotation: bool = False
    compressor: Compressor = Compressor.LQSGD
    batch_size: int = 1024
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "norm_mode", NormMode.parse(self.norm_mode))
        object.__setattr__(self, "compressor", Compressor(self.compressor))
        for name in ("n_clients", "local_updates", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.rounds < 0:
            raise ValueError("rounds must be nonnegative")
        if not (self.local_lr > 0 and self.global_lr > 0):
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.threshold_t <= 1.0:
            raise ValueError("threshold_t must lie in (0, 1]")
        if self.compressor is not Compressor.NONE and self.resolution < 3:
            raise ValueError("resolution must be at least 3")


@dataclass
class ModelState:
    omega: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)


@dataclass
class RoundRecord:
    round: int
    loss: float
    grad_norm_sq: float
    dist_to_opt: float
    bits: int
    alpha_fraction: float


@dataclass
class Upload:
    """A client's message plus what the server needs to know about the encoding."""

    message: EncodedGradient | RawGradient
    alpha: bool = False
    d: int = 0

    @property
    def bits(self) -> int:
        return self.message.total_bits


def substream(seed: int, client: int, rnd: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(
        [int(seed) & (2**64 - 1), int(client), int(rnd), int(purpose)]))


def _rotation(cfg: RunConfig, d: int) -> RotationSpec | None:
    return RotationSpec.for_dim(d, cfg.seed) if cfg.rotation else None


def local_epoch(model: ModelState, client_id: int, rnd: int, cfg: RunConfig,
                task: RegressionTask, rng: np.random.Generator | None = None) -> np.ndarray:
    """Run ``tau`` SGD steps from the broadcast model; return the gradient sum."""
    if rng is None:
        rng = substream(cfg.seed, client_id, rnd, _SAMPLING)
    shard = task.shards[client_id]
    omega = model.omega.copy()
    g_sum = np.zeros_like(omega)
    for c in range(cfg.local_updates):
        g = task.stochastic_gradient(omega, shard, cfg.batch_size, rng)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"client {client_id}, round {rnd}, step {c}: non-finite gradient")
        g_sum += g
        omega -= cfg.local_lr * g
    return g_sum


def client_upload(g_sum, state: SideInfoState, cfg: RunConfig,
                  rng: np.random.Generator, rotation: RotationSpec | None = None) -> Upload:
    g_sum = np.asarray(g_sum, dtype=np.float64)
    d = g_sum.size
    if cfg.compressor is Compressor.NONE:
        return Upload(RawGradient(g_sum.copy()), False, d)
    if cfg.compressor is Compressor.QSGD:
        alpha = False
    else:
        alpha = select_alpha(distance_ratio(g_sum, state), state.threshold_t)
    side = state.u_prev if alpha else np.zeros(d)
    if rotation is not None:
        g_sum, side = rotate(g_sum, rotation), rotate(side, rotation)
    msg = mqd_encode(g_sum, side, cfg.resolution, cfg.norm_mode, rng, alpha=alpha)
    return Upload(msg, alpha, d)


def decode_upload(upload: Upload, state: SideInfoState,
                  rotation: RotationSpec | None = None) -> np.ndarray:
    msg = upload.message
    if isinstance(msg, RawGradient):
        return msg.values.copy()
    d = upload.d
    side = state.u_prev if upload.alpha else np.zeros(d)
    if rotation is None:
        return mqd_decode(msg, side)
    return derotate(mqd_decode(msg, rotate(side, rotation)), rotation, d)


def evaluate(rnd: int, omega: np.ndarray, task: RegressionTask, bits: int,
             alpha_fraction: float) -> RoundRecord:
    loss = task.loss(omega)
    g = task.full_gradient(omega)
    if not (math.isfinite(loss) and loss <= LOSS_LIMIT):
        raise DivergenceError(f"round {rnd}: loss {loss:.6g} exceeds limit {LOSS_LIMIT:g}")
    dist = float(np.linalg.norm(omega - task.omega_star)) if task.omega_star is not None else math.nan
    return RoundRecord(rnd, loss, float(g @ g), dist, int(bits), float(alpha_fraction))


def server_round(uploads: Sequence[Upload], state: SideInfoState, model: ModelState,
                 cfg: RunConfig, task: RegressionTask | None = None, rnd: int = 0,
                 rotation: RotationSpec | None = None,
                 ) -> tuple[ModelState, SideInfoState, RoundRecord | None]:
    """Aggregate decoded uploads in client order and take the global step.

    The returned record describes the model this round started from; it is
    ``None`` when no task is given to evaluate on.
    """
    if not uploads:
        raise ValueError("no uploads")
    d = model.omega.size
    total = np.zeros(d)
    for up in uploads:
        if up.d != d:
            raise ValueError(f"upload dimension {up.d} does not match model dimension {d}")
        total += decode_upload(up, state, rotation)
    u = total / len(uploads)
    omega = model.omega - cfg.local_lr * cfg.global_lr * u
    if not np.all(np.isfinite(omega)):
        raise DivergenceError(f"round {rnd}: non-finite model after update")
    bits = sum(up.bits for up in uploads)
    alpha_fraction = sum(up.alpha for up in uploads) / len(uploads)
    record = evaluate(rnd, model.omega, task, bits, alpha_fraction) if task is not None else None
    return ModelState(omega), SideInfoState(u, state.threshold_t), record


@dataclass
class RunResult:
    records: list[RoundRecord] = field(default_factory=list)
    model: ModelState | None = None


def run(cfg: RunConfig, task: RegressionTask, omega0=None,
        message_log: BinaryIO | None = None) -> RunResult:
    """Execute ``cfg.rounds`` rounds; fully determined by ``cfg.seed``.

    ``task`` must already be sharded into ``cfg.n_clients`` pieces.
    """
    if len(task.shards) != cfg.n_clients:
        raise ValueError(f"task has {len(task.shards)} shards, config wants {cfg.n_clients} clients")
    model = ModelState(np.zeros(task.d) if omega0 is None else np.array(omega0, dtype=np.float64))
    state = SideInfoState.initial(task.d, cfg.threshold_t)
    rotation = _rotation(cfg, task.d)
    result = RunResult(model=model)
    for r in range(cfg.rounds):
        uploads = []
        for j in range(cfg.n_clients):
            g_sum = local_epoch(model, j, r, cfg, task)
            up = client_upload(g_sum, state, cfg, substream(cfg.seed, j, r, _QUANTIZE), rotation)
            if message_log is not None:
                message_log.write(up.message.to_bytes())
            uploads.append(up)
        model, state, record = server_round(uploads, state, model, cfg, task, r, rotation)
        result.records.append(record)
    result.model = model
    return result
