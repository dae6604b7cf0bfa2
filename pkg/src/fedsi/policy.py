"""Choosing when the previous aggregate is good enough to serve as side information."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class SideInfoState:
    """Server-broadcast aggregate of the previous round, shared by every client."""

    u_prev: np.ndarray
    threshold_t: float = 1.0

    def __post_init__(self):
        self.u_prev = np.asarray(self.u_prev, dtype=np.float64)
        if not 0.0 < self.threshold_t <= 1.0:
            raise ValueError(f"threshold_t must lie in (0, 1], got {self.threshold_t}")

    @classmethod
    def initial(cls, d: int, threshold_t: float = 1.0) -> "SideInfoState":
        return cls(np.zeros(d), threshold_t)


def distance_ratio(g, state: SideInfoState) -> float:
    """||g - u_prev||_2 / ||g||_2, or +inf for a zero gradient."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != state.u_prev.shape:
        raise ValueError(f"dimension mismatch: {g.shape} vs {state.u_prev.shape}")
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(state.u_prev))):
        raise ValueError("non-finite input to distance_ratio")
    gnorm = np.linalg.norm(g)
    if gnorm == 0.0:
        return math.inf
    return float(np.linalg.norm(g - state.u_prev) / gnorm)


def select_alpha(ratio: float, threshold_t: float) -> bool:
    return bool(ratio < threshold_t)
