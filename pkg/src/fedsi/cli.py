"""Command-line entry point: ``fedsi run | quantize | bound | gen-data``.

Exit codes: 0 success, 1 usage/config error, 2 training divergence, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis
from .codec import CodecError, NormMode, mqd_decode, mqd_encode, norm
from .fedsim import Compressor, DivergenceError, RunConfig, run
from .tasks import RegressionTask, SparseTextError, estimate_sigma_sq, generate_synthetic, load_sparse_text, save_sparse_text

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
OUT_DIR_ENV = "FEDSI_OUT_DIR"

log = logging.getLogger("fedsi")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config files ---------------------------------------------------------------


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int_list(v: str) -> list[int]:
    return [int(x) for x in str(v).replace(",", " ").split()]


def _compressors(v: str) -> list[str]:
    items = [x.strip().lower() for x in str(v).split(",") if x.strip()]
    if items == ["all"]:
        return [c.value for c in Compressor]
    for x in items:
        Compressor(x)
    return items


RUN_KEYS = {
    "n_clients": int,
    "rounds": int,
    "local_updates": int,
    "local_lr": float,
    "global_lr": float,
    "threshold_t": float,
    "resolution": int,
    "norm_mode": lambda v: NormMode.parse(v).value,
    "rotation": _bool,
    "compressor": _compressors,
    "batch_size": int,
    "seeds": _int_list,
    "data": str,
    "n": int,
    "d": int,
    "noise": float,
    "condition": float,
    "feature_scale": float,
    "data_seed": int,
    "loss_tolerance": float,
    "message_log": _bool,
}

RUN_DEFAULTS = {
    "n_clients": 8,
    "rounds": 1000,
    "local_updates": 1,
    "local_lr": 0.1,
    "global_lr": 1.0,
    "threshold_t": 1.0,
    "resolution": 4,
    "norm_mode": "l2",
    "rotation": False,
    "compressor": ["lqsgd", "qsgd", "none"],
    "batch_size": 1024,
    "seeds": [0],
    "data": "",
    "n": 8192,
    "d": 12,
    "noise": 0.1,
    "condition": 1.0,
    "feature_scale": 1.0,
    "data_seed": 0,
    "loss_tolerance": 0.05,
    "message_log": False,
}


def parse_config(text: str) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"config line {lineno}: expected 'key = value'")
        if key not in RUN_KEYS:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        try:
            out[key] = RUN_KEYS[key](value.strip())
        except ValueError as exc:
            raise UsageError(f"config line {lineno}: bad value for {key}: {exc}") from None
    return out


def format_config(cfg: dict) -> str:
    lines = []
    for key, value in cfg.items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# -- subcommands ----------------------------------------------------------------


@dataclass
class Cell:
    compressor: str
    seed: int
    records: list
    task: RegressionTask
    cfg: RunConfig


def _load_task(opts: dict) -> RegressionTask:
    if opts["data"]:
        return load_sparse_text(opts["data"])
    return generate_synthetic(opts["n"], opts["d"], opts["noise"], opts["data_seed"],
                              opts["condition"], opts["feature_scale"])


def _summary_lines(cell: Cell, tol: float) -> list[str]:
    recs = cell.records
    head = f"[{cell.compressor}_s{cell.seed}]"
    if not recs:
        return [head, "rounds=0"]
    task, cfg = cell.task, cell.cfg
    threshold = (1.0 + tol) * task.f_star
    lines = [
        head,
        f"rounds={len(recs)}",
        f"final_loss={recs[-1].loss:.17g}",
        f"final_dist_to_opt={recs[-1].dist_to_opt:.17g}",
        f"f_star={task.f_star:.17g}",
        f"iterations_to_threshold={analysis.iterations_to_threshold(recs, threshold)}",
        f"total_bits={sum(r.bits for r in recs)}",
    ]
    if cfg.compressor is not Compressor.NONE:
        omega0 = np.zeros(task.d)
        inputs = analysis.BoundInputs(
            d=task.d, s=cfg.resolution, N=cfg.n_clients, tau=cfg.local_updates, R=len(recs),
            eta=cfg.local_lr, gamma=cfg.global_lr, L=task.lipschitz,
            sigma_sq=estimate_sigma_sq(task, omega0, cfg.batch_size, samples=200, seed=cfg.seed),
            alpha=0.0, t=cfg.threshold_t, f0_minus_fstar=task.loss(omega0) - task.f_star)
        rep = analysis.bound_report(recs, inputs)
        lines += [f"bound_{k}={v!r}" for k, v in rep.__dict__.items()]
    return lines


def cmd_run(args) -> int:
    opts = dict(RUN_DEFAULTS)
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            log.error("cannot read config: %s", exc)
            return EXIT_IO
        opts.update(parse_config(text))
    for key in RUN_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            try:
                opts[key] = RUN_KEYS[key](v) if isinstance(v, str) else v
            except ValueError as exc:
                raise UsageError(f"bad value for --{key.replace('_', '-')}: {exc}") from None
    out_dir = Path(args.out or os.environ.get(OUT_DIR_ENV) or "runs")
    try:
        task = _load_task(opts)
    except OSError as exc:
        log.error("cannot read dataset: %s", exc)
        return EXIT_IO
    except (SparseTextError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        log.error("cannot create output directory: %s", exc)
        return EXIT_IO
    summary = []
    status = EXIT_OK
    for comp in opts["compressor"]:
        for seed in opts["seeds"]:
            try:
                cfg = RunConfig(
                    n_clients=opts["n_clients"], rounds=opts["rounds"],
                    local_updates=opts["local_updates"], local_lr=opts["local_lr"],
                    global_lr=opts["global_lr"], threshold_t=opts["threshold_t"],
                    resolution=opts["resolution"], norm_mode=opts["norm_mode"],
                    rotation=opts["rotation"], compressor=comp, batch_size=opts["batch_size"],
                    seed=seed)
                sharded = task.with_shards(cfg.n_clients, seed)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            stem = f"{comp}_s{seed}"
            log.info("running %s", stem)
            try:
                if opts["message_log"]:
                    with open(out_dir / f"{stem}.bin", "wb") as fh:
                        result = run(cfg, sharded, message_log=fh)
                else:
                    result = run(cfg, sharded)
                analysis.write_records(out_dir / f"{stem}.csv", result.records)
            except DivergenceError as exc:
                log.error("%s diverged: %s", stem, exc)
                summary += [f"[{stem}]", f"diverged={exc}"]
                status = EXIT_DIVERGED
                continue
            except OSError as exc:
                log.error("%s: %s", stem, exc)
                return EXIT_IO
            summary += _summary_lines(Cell(comp, seed, result.records, sharded, cfg), opts["loss_tolerance"])
    try:
        (out_dir / "summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    except OSError as exc:
        log.error("cannot write summary: %s", exc)
        return EXIT_IO
    return status


def _read_vector(path) -> np.ndarray:
    return np.atleast_1d(np.loadtxt(path, dtype=np.float64)).ravel()


def cmd_quantize(args) -> int:
    try:
        x = _read_vector(args.input)
        h = _read_vector(args.side_info)
    except (OSError, ValueError) as exc:
        log.error("cannot read vectors: %s", exc)
        return EXIT_IO
    if x.shape != h.shape:
        raise UsageError(f"dimension mismatch: {x.size} vs {h.size}")
    if args.trials < 1:
        raise UsageError("--trials must be positive")
    mode = NormMode.parse(args.norm_mode)
    rng = np.random.default_rng(args.seed)
    err_sum = np.zeros_like(x)
    sq_err = 0.0
    worst = 0.0
    msg = None
    for _ in range(args.trials):
        try:
            msg = mqd_encode(x, h, args.s, mode, rng)
        except CodecError as exc:
            raise UsageError(str(exc)) from None
        xhat = mqd_decode(msg, h)
        err = xhat - x
        err_sum += err
        sq_err += float(err @ err)
        if msg.scale > 0:
            worst = max(worst, float(np.max(np.abs(err))) / msg.epsilon)
    delta2 = norm(x - h, NormMode.L2)
    report = {
        "d": x.size,
        "s": args.s,
        "norm_mode": mode.value,
        "trials": args.trials,
        "scale": msg.scale,
        "epsilon": msg.epsilon,
        "payload_bits": msg.payload_bits,
        "header_bits": msg.header_bits,
        "bias_max_abs": float(np.max(np.abs(err_sum / args.trials))),
        "mse": sq_err / args.trials,
        "mse_bound": 4.0 * x.size * delta2**2 / (args.s - 2) ** 2,
        "max_err_over_eps": worst,
    }
    sys.stdout.write("".join(f"{k}={v!r}\n" for k, v in report.items()))
    return EXIT_OK


def cmd_bound(args) -> int:
    try:
        p = analysis.BoundInputs(
            d=args.d, s=args.s, N=args.N, tau=args.tau, R=args.R, eta=args.eta,
            gamma=args.gamma, L=args.L, sigma_sq=args.sigma_sq, alpha=args.alpha,
            t=args.t, f0_minus_fstar=args.f0_minus_fstar)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    feasible = analysis.lr_feasible(p)
    out = [f"q={p.q!r}", f"feasible={feasible}", f"lr_residual={analysis.lr_residual(p)!r}"]
    out.append(f"bound={analysis.grad_bound(p)!r}" if feasible else "bound=nan")
    sys.stdout.write("\n".join(out) + "\n")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    try:
        task = generate_synthetic(args.n, args.d, args.noise, args.seed, args.condition,
                                  args.feature_scale)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        save_sparse_text(task, args.out)
    except OSError as exc:
        log.error("cannot write %s: %s", args.out, exc)
        return EXIT_IO
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedsi", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    r = sub.add_parser("run", help="train with LQSGD / QSGD / uncompressed uploads")
    r.add_argument("--config", help="flat 'key = value' config file")
    r.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV} or ./runs)")
    for key, conv in RUN_KEYS.items():
        flag = "--" + key.replace("_", "-")
        if conv is _bool:
            r.add_argument(flag, dest=key, default=None, metavar="BOOL")
        else:
            r.add_argument(flag, dest=key, default=None, type=str)
    r.set_defaults(func=cmd_run)

    q = sub.add_parser("quantize", help="encode/decode micro-benchmark")
    q.add_argument("input", help="text file with the vector to quantize")
    q.add_argument("side_info", help="text file with the side-information vector")
    q.add_argument("--s", type=int, default=4)
    q.add_argument("--norm-mode", default="l2")
    q.add_argument("--trials", type=int, default=1000)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_quantize)

    b = sub.add_parser("bound", help="evaluate the learning-rate condition and gradient bound")
    for name, typ, default in [("d", int, 12), ("s", int, 4), ("N", int, 8), ("tau", int, 1),
                               ("R", int, 100), ("eta", float, 0.05), ("gamma", float, 1.0),
                               ("L", float, 1.0), ("sigma_sq", float, 0.0), ("alpha", float, 0.0),
                               ("t", float, 1.0), ("f0_minus_fstar", float, 1.0)]:
        b.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=default)
    b.set_defaults(func=cmd_bound)

    g = sub.add_parser("gen-data", help="write a synthetic regression task in sparse-text format")
    g.add_argument("--n", type=int, default=8192)
    g.add_argument("--d", type=int, default=12)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--condition", type=float, default=1.0)
    g.add_argument("--feature-scale", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
