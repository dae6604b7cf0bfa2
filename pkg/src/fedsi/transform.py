"""Randomized Hadamard rotation ``W = H D / sqrt(d)``.

Applied to both the gradient and the side information before quantization,
it preserves Euclidean distances while spreading energy across coordinates,
which shrinks the infinity-norm of their difference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ROTATION_STREAM = 0x524F54  # keeps the sign stream disjoint from other seed uses


def next_pow2(n: int) -> int:
    return 1 if n <= 1 else 1 << (int(n) - 1).bit_length()


def fwht(x: np.ndarray) -> np.ndarray:
    """Unnormalized fast Walsh-Hadamard transform (natural order), O(d log d)."""
    y = np.array(x, dtype=np.float64, copy=True)
    n = y.size
    if n & (n - 1):
        raise ValueError(f"length must be a power of two, got {n}")
    h = 1
    while h < n:
        y = y.reshape(-1, 2, h)
        a = y[:, 0, :] + y[:, 1, :]
        b = y[:, 0, :] - y[:, 1, :]
        y = np.stack((a, b), axis=1).reshape(-1)
        h *= 2
    return y


@dataclass(frozen=True)
class RotationSpec:
    d_padded: int
    seed: int = 0
    enabled: bool = True

    def __post_init__(self):
        if self.d_padded < 1 or self.d_padded & (self.d_padded - 1):
            raise ValueError(f"d_padded must be a power of two, got {self.d_padded}")

    @classmethod
    def for_dim(cls, d: int, seed: int = 0, enabled: bool = True) -> "RotationSpec":
        return cls(d_padded=next_pow2(d), seed=seed, enabled=enabled)

    def signs(self) -> np.ndarray:
        """Rademacher diagonal; a pure function of (seed, d_padded)."""
        ss = np.random.SeedSequence([int(self.seed) & (2**64 - 1), _ROTATION_STREAM, self.d_padded])
        rng = np.random.default_rng(ss)
        return rng.integers(0, 2, size=self.d_padded) * 2.0 - 1.0


def rotate(x, spec: RotationSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size > spec.d_padded:
        raise ValueError(f"dimension {x.size} exceeds d_padded={spec.d_padded}")
    y = np.zeros(spec.d_padded)
    y[: x.size] = x
    if not spec.enabled:
        return y
    return fwht(spec.signs() * y) / np.sqrt(spec.d_padded)


def derotate(y, spec: RotationSpec, d_original: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size != spec.d_padded:
        raise ValueError(f"expected {spec.d_padded} coordinates, got {y.size}")
    if d_original > spec.d_padded:
        raise ValueError(f"dimension {d_original} exceeds d_padded={spec.d_padded}")
    if spec.enabled:
        y = spec.signs() * (fwht(y) / np.sqrt(spec.d_padded))
    return y[:d_original].copy()
