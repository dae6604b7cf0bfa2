"""Least-squares regression tasks: synthetic generation, sparse-text I/O, gradients."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class SparseTextError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def solve_normal_equations(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """argmin ||A w - b||_2 via the normal equations.

    A tiny ridge term is added only when A^T A is numerically rank deficient.
    """
    AtA = A.T @ A
    Atb = A.T @ b
    d = AtA.shape[0]
    sol, _, rank, _ = np.linalg.lstsq(AtA, Atb, rcond=None)
    if rank < d:
        reg = 1e-10 * np.trace(AtA) / d
        log.warning("normal equations are singular (rank %d < %d); adding ridge %.3g", rank, d, reg)
        sol = np.linalg.solve(AtA + reg * np.eye(d), Atb)
    return sol


@dataclass
class RegressionTask:
    """Mean-squared-error regression ``f(w) = ||A w - b||^2 / n`` split over clients."""

    A: np.ndarray
    b: np.ndarray
    shards: list[np.ndarray] = field(default_factory=list)
    omega_star: np.ndarray = None
    lipschitz: float = None

    def __post_init__(self):
        self.A = np.ascontiguousarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64).ravel()
        if self.A.ndim != 2 or self.A.shape[0] != self.b.size:
            raise ValueError(f"shape mismatch: A {self.A.shape}, b {self.b.shape}")
        if not self.shards:
            self.shards = [np.arange(self.n)]
        if self.omega_star is None:
            self.omega_star = solve_normal_equations(self.A, self.b)
        if self.lipschitz is None:
            self.lipschitz = float(np.linalg.eigvalsh(2.0 / self.n * (self.A.T @ self.A))[-1])

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @property
    def f_star(self) -> float:
        return self.loss(self.omega_star)

    def with_shards(self, n_clients: int, seed: int) -> "RegressionTask":
        """Shuffle sample indices once with ``seed`` and split them evenly."""
        if n_clients < 1 or n_clients > self.n:
            raise ValueError(f"cannot split {self.n} samples across {n_clients} clients")
        perm = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0x5348])).permutation(self.n)
        return replace(self, shards=[np.sort(s) for s in np.array_split(perm, n_clients)])

    def loss(self, omega) -> float:
        r = self.A @ omega - self.b
        return float(r @ r) / self.n

    def full_gradient(self, omega) -> np.ndarray:
        return 2.0 / self.n * (self.A.T @ (self.A @ omega - self.b))

    def shard_gradient(self, omega, shard: np.ndarray) -> np.ndarray:
        if len(shard) == 0:
            raise ValueError("empty shard")
        A, b = self.A[shard], self.b[shard]
        return 2.0 / len(shard) * (A.T @ (A @ omega - b))

    def stochastic_gradient(self, omega, shard: np.ndarray, batch_size: int,
                            rng: np.random.Generator) -> np.ndarray:
        """Gradient over a uniform batch drawn without replacement from ``shard``.

        A batch at least as large as the shard uses the whole shard and draws
        nothing from ``rng``.
        """
        if len(shard) == 0:
            raise ValueError("empty shard")
        if batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {batch_size}")
        if batch_size >= len(shard):
            return self.shard_gradient(omega, shard)
        batch = rng.choice(shard, size=batch_size, replace=False)
        return self.shard_gradient(omega, batch)


def generate_synthetic(n: int = 8192, d: int = 12, noise_sigma: float = 0.1,
                       seed: int = 0, condition: float = 1.0,
                       feature_scale: float = 1.0) -> RegressionTask:
    """Gaussian design with a planted model and additive Gaussian noise.

    ``condition`` > 1 scales the columns geometrically so the feature
    covariance has eigenvalues spread from 1 down to ``1 / condition``.
    ``feature_scale`` multiplies every feature after the targets are formed,
    which raises the smoothness constant by its square and leaves the noise
    alone.  The defaults keep independent standard normal entries.
    """
    if n <= d:
        raise ValueError(f"need n > d for a well-posed problem, got n={n}, d={d}")
    if condition < 1.0:
        raise ValueError(f"condition must be >= 1, got {condition}")
    if not feature_scale > 0:
        raise ValueError(f"feature_scale must be positive, got {feature_scale}")
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, d))
    if condition != 1.0:
        A *= condition ** (-0.5 * np.linspace(0.0, 1.0, d))
    w_true = rng.standard_normal(d)
    b = A @ w_true + noise_sigma * rng.standard_normal(n)
    if feature_scale != 1.0:
        A *= feature_scale
    return RegressionTask(A, b)


def load_sparse_text(path, n_features: int | None = None) -> RegressionTask:
    """Read ``label idx:val idx:val ...`` lines (1-based, strictly ascending indices)."""
    rows, labels = [], []
    max_index = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            try:
                label = float(tokens[0])
            except ValueError:
                raise SparseTextError(f"bad label {tokens[0]!r}", lineno) from None
            entries = []
            prev = 0
            for tok in tokens[1:]:
                idx_s, sep, val_s = tok.partition(":")
                try:
                    if not sep:
                        raise ValueError
                    idx, val = int(idx_s), float(val_s)
                except ValueError:
                    raise SparseTextError(f"bad token {tok!r}", lineno) from None
                if idx < 1:
                    raise SparseTextError(f"index {idx} is not 1-based", lineno)
                if idx <= prev:
                    raise SparseTextError(f"index {idx} does not follow {prev}", lineno)
                prev = idx
                entries.append((idx, val))
            max_index = max(max_index, prev)
            rows.append(entries)
            labels.append(label)
    if not rows:
        raise SparseTextError(f"{path}: no samples")
    d = max_index if n_features is None else n_features
    if max_index > d:
        raise SparseTextError(f"feature index {max_index} exceeds n_features={d}")
    A = np.zeros((len(rows), d))
    for i, entries in enumerate(rows):
        for idx, val in entries:
            A[i, idx - 1] = val
    return RegressionTask(A, np.array(labels))


def save_sparse_text(task: RegressionTask, path) -> None:
    """Write a task in the sparse-text format; floats use round-trip ``repr``."""
    lines = []
    for row, label in zip(task.A, task.b):
        parts = [repr(float(label))]
        parts += [f"{j + 1}:{float(v)!r}" for j, v in enumerate(row) if v != 0.0]
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def estimate_sigma_sq(task: RegressionTask, omega, batch_size: int, samples: int = 1000,
                      seed: int = 0) -> float:
    """Worst client's mean ||g_batch - grad f||^2 at ``omega``.

    The deviation is taken from the global gradient, so shard heterogeneity
    counts towards the variance even with full-shard batches.
    """
    rng = np.random.default_rng(seed)
    g = task.full_gradient(omega)
    worst = 0.0
    for shard in task.shards:
        if batch_size >= len(shard):
            dev = task.shard_gradient(omega, shard) - g
            worst = max(worst, float(dev @ dev))
            continue
        acc = 0.0
        for _ in range(samples):
            dev = task.stochastic_gradient(omega, shard, batch_size, rng) - g
            acc += float(dev @ dev)
        worst = max(worst, acc / samples)
    return worst
