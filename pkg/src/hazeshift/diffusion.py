"""Residual-shifting Markov chains between clear and hazy images.

The x-chain starts at the clear image ``x0`` and drifts toward the hazy
image ``y0`` along the residual ``y0 - x0`` while adding Gaussian noise;
the y-chain is its mirror. Running a chain backwards with a denoiser that
predicts the clean endpoint gives dehazing (x-chain) or haze generation
(y-chain).

Images are float arrays of shape ``(H, W, C)`` in ``[-1, 1]``; any number
of leading batch axes is accepted. The arithmetic helpers are written so
they also accept torch tensors, which lets the trainer share them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .schedule import Schedule, alpha

log = logging.getLogger(__name__)

DEHAZE = "dehaze"
HAZIFY = "hazify"
DIRECTIONS = (DEHAZE, HAZIFY)


@dataclass
class DualState:
    x: np.ndarray
    y: np.ndarray
    t_x: int
    t_y: int

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise ValueError(f"state shapes differ: {self.x.shape} vs {self.y.shape}")


@dataclass
class DenoiserEstimate:
    """Predicted clean pair ``(x0_hat, y0_hat)``."""

    x0_hat: np.ndarray
    y0_hat: np.ndarray


@dataclass
class PosteriorParams:
    mean: np.ndarray
    variance: float


Denoiser = Callable[[np.ndarray, np.ndarray, int, int], DenoiserEstimate]


def _check_shapes(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _noise_like(ref, rng, noise):
    if noise is not None:
        _check_shapes(noise, ref)
        return noise
    if rng is None:
        raise ValueError("either rng or noise must be given")
    return rng.standard_normal(ref.shape)


def shift(start, residual, frac, kappa, noise):
    """``start + frac * residual + kappa * sqrt(frac) * noise``.

    ``frac`` may be a scalar or an array/tensor that broadcasts against
    ``start``; works for numpy arrays and torch tensors alike.
    """
    return start + frac * residual + kappa * frac**0.5 * noise


# forward chains


def forward_step_x(x_prev, x0, y0, s: Schedule, t: int, rng=None, noise=None):
    """One x-chain transition: mean ``x_prev + alpha_t (y0 - x0)``, variance ``kappa^2 alpha_t``."""
    _check_shapes(x_prev, x0)
    _check_shapes(x0, y0)
    a = alpha(s, t)
    return shift(x_prev, y0 - x0, a, s.kappa, _noise_like(x0, rng, noise))


def forward_step_y(y_prev, y0, x0, s: Schedule, t: int, rng=None, noise=None):
    _check_shapes(y_prev, y0)
    _check_shapes(y0, x0)
    a = alpha(s, t)
    return shift(y_prev, x0 - y0, a, s.kappa, _noise_like(y0, rng, noise))


def forward_marginal_x(x0, y0, s: Schedule, t: int, rng=None, noise=None):
    """Sample ``x_t ~ N(x0 + beta_t (y0 - x0), kappa^2 beta_t I)``.

    ``t = 0`` returns ``x0`` itself without consuming randomness.
    """
    _check_shapes(x0, y0)
    if t == 0:
        return x0
    b = s.beta(t)
    return shift(x0, y0 - x0, b, s.kappa, _noise_like(x0, rng, noise))


def forward_marginal_y(y0, x0, s: Schedule, t: int, rng=None, noise=None):
    _check_shapes(y0, x0)
    if t == 0:
        return y0
    b = s.beta(t)
    return shift(y0, x0 - y0, b, s.kappa, _noise_like(y0, rng, noise))


# posteriors


def _posterior(state, clean_est, s: Schedule, t: int) -> PosteriorParams:
    if not 1 <= t <= s.T:
        raise ValueError(f"posterior needs t in 1..{s.T}, got {t}")
    _check_shapes(state, clean_est)
    bt, bprev = s.betas[t], s.betas[t - 1]
    a = alpha(s, t)
    mean = (bprev / bt) * state + (a / bt) * clean_est
    return PosteriorParams(mean=mean, variance=float(s.kappa**2 * bprev / bt * a))


def posterior_x(x_t, x0_est, s: Schedule, t: int) -> PosteriorParams:
    """Closed-form ``q(x_{t-1} | x_t, x0)`` with the clean image replaced by an estimate."""
    return _posterior(x_t, x0_est, s, t)


def posterior_y(y_t, y0_est, s: Schedule, t: int) -> PosteriorParams:
    return _posterior(y_t, y0_est, s, t)


# reverse chain


def reverse_step(
    state: DualState,
    estimate: DenoiserEstimate,
    s: Schedule,
    direction: str,
    rng=None,
    deterministic: bool = False,
    noise=None,
):
    """Draw the previous state of the active chain.

    The active chain is x for ``dehaze`` and y for ``hazify``. At ``t = 1``
    the variance vanishes and the result is the clean estimate itself.
    ``deterministic`` drops the noise at every step.
    """
    if direction == DEHAZE:
        t, current, clean = state.t_x, state.x, estimate.x0_hat
    elif direction == HAZIFY:
        t, current, clean = state.t_y, state.y, estimate.y0_hat
    else:
        raise ValueError(f"unknown direction {direction!r}")
    if t < 1:
        raise ValueError("reverse_step needs an active timestep >= 1")
    post = _posterior(current, clean, s, t)
    if t == 1 or deterministic or post.variance == 0.0:
        return post.mean
    eps = _noise_like(current, rng, noise)
    return post.mean + np.sqrt(post.variance) * eps


def run_reverse_chain(
    observation: np.ndarray,
    direction: str,
    s: Schedule,
    estimate_fn: Denoiser,
    rng: np.random.Generator,
    deterministic: bool = False,
) -> np.ndarray:
    """Shared loop behind the plain and tiled samplers.

    Starts from ``N(observation, kappa^2 I)`` and walks ``t = T..1`` with
    the observation held fixed at timestep 0 as conditioning.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    obs = np.asarray(observation, dtype=np.float64)
    current = obs + s.kappa * rng.standard_normal(obs.shape)
    for t in range(s.T, 0, -1):
        if direction == DEHAZE:
            state = DualState(x=current, y=obs, t_x=t, t_y=0)
            est = estimate_fn(state.x, state.y, t, 0)
        else:
            state = DualState(x=obs, y=current, t_x=0, t_y=t)
            est = estimate_fn(state.x, state.y, 0, t)
        current = reverse_step(state, est, s, direction, rng=rng, deterministic=deterministic)
        log.debug("reverse step %d/%d (%s, t=%d)", s.T - t + 1, s.T, direction, t)
    return np.clip(current, -1.0, 1.0)


def _resolve_rng(rng, seed):
    if rng is not None:
        return rng
    return np.random.default_rng(seed)


def sample_dehaze(y0, denoiser: Denoiser, s: Schedule, rng=None, seed=None, deterministic=False):
    """Recover a clear image from the hazy observation ``y0``."""
    return run_reverse_chain(y0, DEHAZE, s, denoiser, _resolve_rng(rng, seed), deterministic)


def sample_hazify(x0, denoiser: Denoiser, s: Schedule, rng=None, seed=None, deterministic=False):
    """Synthesize a hazy counterpart of the clear image ``x0``."""
    return run_reverse_chain(x0, HAZIFY, s, denoiser, _resolve_rng(rng, seed), deterministic)


class OracleDenoiser:
    """Test stub that always returns the true clean pair."""

    def __init__(self, x0, y0):
        self.x0 = np.asarray(x0)
        self.y0 = np.asarray(y0)
        self.calls = 0

    def __call__(self, x_t, y_t, t_x, t_y) -> DenoiserEstimate:
        self.calls += 1
        return DenoiserEstimate(self.x0, self.y0)

