"""Shift schedules for the residual chains.

A schedule holds the cumulative shift fractions ``betas[0..T]`` (with
``betas[0] == 0`` and ``betas[T] == 1``), the per-step increments
``alpha_t = beta_t - beta_{t-1}`` and the noise scale ``kappa``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Schedule:
    T: int
    betas: np.ndarray = field(repr=False)
    kappa: float
    gamma: float = 1.0

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if betas.shape != (self.T + 1,):
            raise ValueError(f"expected {self.T + 1} betas, got shape {betas.shape}")
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if betas[0] != 0.0 or betas[-1] != 1.0:
            raise ValueError("betas must start at 0 and end at exactly 1")
        if np.any(np.diff(betas) <= 0):
            raise ValueError("betas must be strictly increasing")
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)

    @property
    def alphas(self) -> np.ndarray:
        """Increments ``alpha_1..alpha_T`` (index 0 is unused and set to 0)."""
        return np.concatenate([[0.0], np.diff(self.betas)])

    def beta(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 0..{self.T}")
        return float(self.betas[t])

    def alpha(self, t: int) -> float:
        return alpha(self, t)

    def posterior_variance(self, t: int) -> float:
        """kappa^2 * beta_{t-1} / beta_t * alpha_t."""
        a = alpha(self, t)
        return self.kappa**2 * self.betas[t - 1] / self.betas[t] * a

    def header(self) -> dict:
        return {"T": self.T, "kappa": float(self.kappa), "gamma": float(self.gamma)}


def build_schedule(T: int, kappa: float = 2.0, gamma: float = 1.0) -> Schedule:
    """Power schedule ``beta_t = (t / T) ** gamma`` for ``t = 0..T``."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    T = int(T)
    betas = (np.arange(T + 1, dtype=np.float64) / T) ** gamma
    betas[-1] = 1.0
    return Schedule(T=T, betas=betas, kappa=float(kappa), gamma=float(gamma))


def alpha(s: Schedule, t: int) -> float:
    if not 1 <= t <= s.T:
        raise ValueError(f"alpha is defined for t in 1..{s.T}, got {t}")
    return float(s.betas[t] - s.betas[t - 1])
