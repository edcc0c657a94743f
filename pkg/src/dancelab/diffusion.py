"""Denoiser-parameterised diffusion: loss, probability-flow ODE, guidance, noise schedule.

All sampling here works on plain numpy arrays. Denoisers are callables
``D(x, sigma) -> denoised`` with the same shape as ``x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .numerics import Tensor, as_tensor, mean, sum_

SIGMA_MIN = 0.002
SIGMA_MAX = 80.0
DEFAULT_GAMMA = 6.0
DEFAULT_DECAY = 6.0

Denoiser = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class SigmaRange:
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max) or not math.isfinite(self.sigma_max):
            raise ValueError(f"need 0 < sigma_min < sigma_max, got ({self.sigma_min}, {self.sigma_max})")


@dataclass(frozen=True)
class GuidanceConfig:
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not self.gamma >= 1:
            raise ValueError(f"guidance scale must be >= 1, got {self.gamma}")


def _decayed_beta(beta0: float, decay: float, step: int, total_steps: int) -> float:
    return 1.0 + (beta0 - 1.0) * math.exp(-decay * step / total_steps)


@dataclass(frozen=True)
class ScheduleState:
    """Beta(1, beta) noise-level schedule whose beta decays exponentially toward 1."""

    beta0: float = 3.0
    total_steps: int = 4000
    decay: float = DEFAULT_DECAY
    step: int = 0
    sigma_range: SigmaRange = SigmaRange()

    def __post_init__(self):
        if self.beta0 < 1:
            raise ValueError(f"beta0 must be >= 1, got {self.beta0}")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if self.decay <= 0:
            raise ValueError("decay rate must be positive")
        if not 0 <= self.step <= self.total_steps:
            raise ValueError(f"step {self.step} outside [0, {self.total_steps}]")

    @property
    def beta_current(self) -> float:
        return _decayed_beta(self.beta0, self.decay, self.step, self.total_steps)


def advance_schedule(state: ScheduleState) -> ScheduleState:
    if state.step >= state.total_steps:
        raise ValueError(f"schedule already at its final step {state.total_steps}")
    return replace(state, step=state.step + 1)


def beta_pdf(x: float, beta: float) -> float:
    """Density of Beta(1, beta): (1 - x)^(beta - 1) / B(1, beta), with B(1, beta) = 1/beta."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if beta < 1:
        raise ValueError(f"beta must be >= 1, got {beta}")
    if beta == 1:
        return 1.0
    return beta * (1.0 - x) ** (beta - 1.0)


def beta_cdf(u, beta: float):
    return 1.0 - (1.0 - np.asarray(u, dtype=np.float64)) ** beta


def beta_inverse_cdf(v, beta: float):
    """Inverse CDF of Beta(1, beta): u = 1 - (1 - v)^(1/beta)."""
    return 1.0 - (1.0 - np.asarray(v, dtype=np.float64)) ** (1.0 / beta)


def sigma_from_level(u, sigma_range: SigmaRange):
    """Log-linear map of a normalised level u in [0, 1] onto [sigma_min, sigma_max]."""
    u = np.asarray(u, dtype=np.float64)
    out = sigma_range.sigma_min ** (1.0 - u) * sigma_range.sigma_max**u
    return np.clip(out, sigma_range.sigma_min, sigma_range.sigma_max)


def sample_noise_level(state: ScheduleState, rng: np.random.Generator, size=None):
    """Draw sigma with normalised log-level u ~ Beta(1, beta_current)."""
    v = rng.random(size)
    u = beta_inverse_cdf(v, state.beta_current)
    sigma = sigma_from_level(u, state.sigma_range)
    return float(sigma) if size is None else sigma


def edm_loss(denoiser: Callable[[Tensor, object], Tensor], y, sigma, noise) -> Tensor:
    """Squared L2 reconstruction error, summed per example and averaged over the batch.

    ``y`` and ``noise`` carry the batch on axis 0; ``sigma`` is a scalar or a
    per-example array and is passed through to ``denoiser`` untouched.
    """
    y, noise = as_tensor(y), as_tensor(noise)
    if y.shape != noise.shape:
        raise ValueError(f"noise shape {noise.shape} does not match data shape {y.shape}")
    denoised = denoiser(y + noise, sigma)
    if denoised.shape != y.shape:
        raise ValueError(f"denoiser returned shape {denoised.shape}, expected {y.shape}")
    err = denoised - y
    if y.ndim <= 1:
        return sum_(err * err)
    per_example = sum_(err * err, axis=tuple(range(1, y.ndim)))
    return mean(per_example)


def ode_derivative(denoised, x, sigma: float) -> np.ndarray:
    """dx/dsigma = -(D(x; sigma) - x) / sigma."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return -(np.asarray(denoised) - np.asarray(x)) / sigma


def cfg_derivative(d_cond, d_uncond, x, sigma: float, guidance: GuidanceConfig) -> np.ndarray:
    """Guided ODE slope, a linear combination of conditional and unconditional branches."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    d_cond, d_uncond, x = np.asarray(d_cond), np.asarray(d_uncond), np.asarray(x)
    if d_cond.shape != d_uncond.shape or d_cond.shape != x.shape:
        raise ValueError(f"shape mismatch: {d_cond.shape}, {d_uncond.shape}, {x.shape}")
    g = guidance.gamma
    return -g * (d_cond - x) / sigma + (g - 1.0) * (d_uncond - x) / sigma


def sigma_grid(n_steps: int, sigma_range: SigmaRange = SigmaRange(), rho: float = 7.0) -> np.ndarray:
    """Descending power-law noise grid with a trailing zero."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if not isinstance(sigma_range, SigmaRange):
        raise TypeError("sigma_range must be a SigmaRange")
    if n_steps == 1:
        return np.array([sigma_range.sigma_max, 0.0])
    i = np.arange(n_steps, dtype=np.float64)
    hi, lo = sigma_range.sigma_max ** (1 / rho), sigma_range.sigma_min ** (1 / rho)
    sig = (hi + i / (n_steps - 1) * (lo - hi)) ** rho
    sig[0], sig[-1] = sigma_range.sigma_max, sigma_range.sigma_min
    return np.append(sig, 0.0)


def sample(
    denoisers: tuple[Denoiser, Denoiser | None] | Denoiser,
    shape: Sequence[int],
    sigmas: Sequence[float],
    guidance: GuidanceConfig,
    rng: np.random.Generator,
    x_init: np.ndarray | None = None,
) -> np.ndarray:
    """Euler integration of the (guided) probability-flow ODE down the sigma grid.

    ``denoisers`` is ``(conditional, unconditional)``; the unconditional one
    may be ``None`` only when ``guidance.gamma == 1``.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if sigmas.ndim != 1 or len(sigmas) < 2:
        raise ValueError("sigma grid needs at least two entries")
    if np.any(np.diff(sigmas) >= 0):
        raise ValueError("sigma grid must be strictly decreasing")
    if sigmas[-1] != 0:
        raise ValueError("sigma grid must end at 0")
    if callable(denoisers):
        d_cond, d_uncond = denoisers, None
    else:
        d_cond, d_uncond = denoisers
    if d_uncond is None and guidance.gamma != 1:
        raise ValueError("guided sampling needs an unconditional denoiser")
    if x_init is None:
        x = rng.standard_normal(tuple(shape)) * sigmas[0]
    else:
        x = np.array(x_init, dtype=np.float64)
    for s_cur, s_next in zip(sigmas[:-1], sigmas[1:]):
        dc = d_cond(x, float(s_cur))
        if d_uncond is None:
            slope = ode_derivative(dc, x, float(s_cur))
        else:
            slope = cfg_derivative(dc, d_uncond(x, float(s_cur)), x, float(s_cur), guidance)
        x = x + (s_next - s_cur) * slope
    return x
