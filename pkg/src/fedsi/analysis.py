"""Convergence bound for quantized federated averaging and run metrics I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .fedsim import RoundRecord

CSV_FIELDS = ("round", "loss", "grad_norm_sq", "dist_to_opt", "bits", "alpha_fraction")


class InfeasibleLearningRate(ValueError):
    def __init__(self, residual: float):
        self.residual = residual
        super().__init__(f"learning-rate condition violated: "
                         f"tau^2 L^2 eta^2 + (q/N + 1) tau gamma L eta - 1 = {residual:.6g} > 0")


@dataclass(frozen=True)
class BoundInputs:
    d: int
    s: int
    N: int
    tau: int
    R: int
    eta: float
    gamma: float
    L: float
    sigma_sq: float
    alpha: float
    t: float
    f0_minus_fstar: float

    def __post_init__(self):
        if self.s < 3:
            raise ValueError("s must be at least 3")
        if not 0.0 < self.t <= 1.0:
            raise ValueError("t must lie in (0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        for name in ("d", "N", "tau", "R", "eta", "gamma", "L", "sigma_sq", "f0_minus_fstar"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def q(self) -> float:
        return 4.0 * self.d / (self.s - 2) ** 2


def lr_residual(p: BoundInputs) -> float:
    """Left side minus one of the learning-rate condition; feasible iff <= 0."""
    return p.tau**2 * p.L**2 * p.eta**2 + (p.q / p.N + 1.0) * p.tau * p.gamma * p.L * p.eta - 1.0


def lr_feasible(p: BoundInputs) -> bool:
    return 1.0 >= p.tau**2 * p.L**2 * p.eta**2 + (p.q / p.N + 1.0) * p.tau * p.gamma * p.L * p.eta


def grad_bound(p: BoundInputs) -> float:
    """Upper bound on the average squared gradient norm over R rounds."""
    if not lr_feasible(p):
        raise InfeasibleLearningRate(lr_residual(p))
    opt_term = 2.0 * p.f0_minus_fstar / (p.tau * p.gamma * p.eta * p.R)
    quant_term = p.gamma * p.L * p.eta * (p.q * p.alpha * (p.t - 1.0) + p.q + 1.0) * p.sigma_sq / p.N
    drift_term = p.tau * p.L**2 * p.eta**2 * p.sigma_sq
    return opt_term + quant_term + drift_term


@dataclass(frozen=True)
class BoundReport:
    rounds: int
    empirical: float
    alpha_bar: float
    feasible: bool
    bound: float
    holds: bool

    def format(self) -> str:
        return "\n".join(f"{k}={v!r}" for k, v in self.__dict__.items()) + "\n"


def bound_report(records: Sequence[RoundRecord], inputs: BoundInputs) -> BoundReport:
    """Compare the observed average squared gradient with the bound.

    ``R`` and the side-information fraction are taken from the records.
    """
    if not records:
        raise ValueError("no records")
    norms = [r.grad_norm_sq for r in records]
    if any(v is None or not math.isfinite(v) for v in norms):
        raise ValueError("records lack gradient norms")
    empirical = math.fsum(norms) / len(norms)
    alpha_bar = math.fsum(r.alpha_fraction for r in records) / len(records)
    p = replace(inputs, R=len(records), alpha=alpha_bar)
    if not lr_feasible(p):
        return BoundReport(len(records), empirical, alpha_bar, False, math.inf, True)
    bound = grad_bound(p)
    return BoundReport(len(records), empirical, alpha_bar, True, bound, empirical <= bound)


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else format(v, ".17g")


def write_records(path, records: Iterable[RoundRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([_fmt(getattr(r, f)) for f in CSV_FIELDS])


def read_records(path) -> list[RoundRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [RoundRecord(int(row["round"]), float(row["loss"]), float(row["grad_norm_sq"]),
                        float(row["dist_to_opt"]), int(row["bits"]), float(row["alpha_fraction"]))
            for row in rows]


def iterations_to_threshold(records: Sequence[RoundRecord], threshold: float) -> float:
    """First round whose loss is at or below ``threshold``; inf if never reached."""
    for r in records:
        if r.loss <= threshold:
            return float(r.round)
    return math.inf
