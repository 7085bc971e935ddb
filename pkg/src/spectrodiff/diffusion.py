"""Noise schedule, perturbation and the stochastic Heun sampler.

Denoisers are callables ``D(x, sigma, labels)`` returning an estimate of the
clean batch ``x`` (shape ``(B, ...)``). ``labels`` is an int array of class
labels, or ``None`` for the unconditional (null-token) branch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ValidationError

Denoiser = Callable[[np.ndarray, float, "np.ndarray | None"], np.ndarray]

MAX_GAMMA = math.sqrt(2.0) - 1.0


@dataclass
class EdmParams:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    P_mean: float = -1.2
    P_std: float = 1.2
    S_churn: float = 0.0
    S_noise: float = 1.0
    steps: int = 18
    S_tmin: float = 0.0
    S_tmax: float = float("inf")

    def validate(self) -> None:
        if not self.sigma_min >= 0 or not self.sigma_max > self.sigma_min:
            raise ValidationError("need 0 <= sigma_min < sigma_max")
        if not self.rho > 0:
            raise ValidationError("rho must be positive")
        if not self.P_std > 0:
            raise ValidationError("P_std must be positive")
        if self.S_churn < 0 or not self.S_noise > 0:
            raise ValidationError("need S_churn >= 0 and S_noise > 0")
        if int(self.steps) < 1:
            raise ValidationError("steps must be >= 1")

    def gamma(self, sigma: float) -> float:
        if self.S_churn > 0 and self.S_tmin <= sigma <= self.S_tmax:
            return min(self.S_churn / self.steps, MAX_GAMMA)
        return 0.0


@dataclass
class NoiseSchedule:
    sigmas: np.ndarray

    def __len__(self) -> int:
        return len(self.sigmas)

    def pairs(self):
        return zip(self.sigmas[:-1], self.sigmas[1:])


@dataclass
class GuidanceSpec:
    scale: float = 1.0
    class_label: int | None = None

    def validate(self) -> None:
        if not math.isfinite(self.scale) or self.scale < 0:
            raise ValidationError("guidance scale must be finite and >= 0")


def build_schedule(params: EdmParams) -> NoiseSchedule:
    """rho-warped interpolation from sigma_max to sigma_min, then a terminal 0."""
    params.validate()
    n = int(params.steps)
    if n == 1:
        return NoiseSchedule(np.array([params.sigma_max, 0.0]))
    inv_rho = 1.0 / params.rho
    hi = params.sigma_max ** inv_rho
    lo = params.sigma_min ** inv_rho
    t = np.arange(n) / (n - 1)
    sigmas = (hi + t * (lo - hi)) ** params.rho
    # Pin the endpoints so they hold exactly rather than up to pow() round-off.
    sigmas[0] = params.sigma_max
    sigmas[-1] = params.sigma_min
    return NoiseSchedule(np.append(sigmas, 0.0))


def sample_training_sigma(rng: np.random.Generator, P_mean: float = -1.2, P_std: float = 1.2,
                          size=None):
    eta = rng.standard_normal(size)
    return np.exp(eta * P_std + P_mean)


def perturb(x0: np.ndarray, sigma, rng: np.random.Generator) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValidationError("sigma must be >= 0")
    eps = rng.standard_normal(x0.shape)
    if sigma.ndim:
        sigma = sigma.reshape(sigma.shape + (1,) * (x0.ndim - sigma.ndim))
    return x0 + sigma * eps


def cfg_combine(d_cond, d_uncond, g: float):
    d_cond = np.asarray(d_cond, dtype=np.float64)
    d_uncond = np.asarray(d_uncond, dtype=np.float64)
    if d_cond.shape != d_uncond.shape:
        raise ValidationError(f"shape mismatch {d_cond.shape} vs {d_uncond.shape}")
    return d_uncond + g * (d_cond - d_uncond)


def guided(denoiser: Denoiser, guidance: GuidanceSpec) -> Callable[[np.ndarray, float], np.ndarray]:
    """Collapse a conditional denoiser and a guidance spec into ``D(x, sigma)``."""
    guidance.validate()

    def D(x: np.ndarray, sigma: float) -> np.ndarray:
        if guidance.class_label is None:
            return denoiser(x, sigma, None)
        labels = np.full(x.shape[0], guidance.class_label, dtype=int)
        d_cond = denoiser(x, sigma, labels)
        if guidance.scale == 1.0:
            return d_cond
        return cfg_combine(d_cond, denoiser(x, sigma, None), guidance.scale)

    return D


def _noise_like(x: np.ndarray, rng) -> np.ndarray:
    """Standard normal noise; a list of generators draws one item per generator."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(x.shape)
    if len(rng) != x.shape[0]:
        raise ValidationError(f"{len(rng)} generators for a batch of {x.shape[0]}")
    return np.stack([g.standard_normal(x.shape[1:]) for g in rng])


def heun_step(x_t, sigma_t: float, sigma_next: float, denoiser, guidance: GuidanceSpec | None,
              params: EdmParams, rng) -> np.ndarray:
    """One stochastic Heun step from ``sigma_t`` to ``sigma_next``.

    ``denoiser`` is a conditional denoiser when ``guidance`` is given, else a
    plain ``D(x, sigma)``.
    """
    if not sigma_t > sigma_next >= 0:
        raise ValidationError(f"need sigma_t > sigma_next >= 0, got {sigma_t}, {sigma_next}")
    D = guided(denoiser, guidance) if guidance is not None else denoiser
    x = np.asarray(x_t, dtype=np.float64)
    gamma = params.gamma(sigma_t)
    sigma_hat = sigma_t * (1.0 + gamma)
    if gamma > 0:
        x = x + math.sqrt(sigma_hat ** 2 - sigma_t ** 2) * params.S_noise * _noise_like(x, rng)
    d_hat = D(x, sigma_hat)
    if sigma_next == 0:
        # the Euler update x + (0 - sigma_hat) * (x - d_hat) / sigma_hat, without round-off
        return np.array(d_hat, dtype=np.float64)
    # Euler and Heun updates written with r = sigma_next / sigma_hat so that x only
    # enters as r * x; the textbook form x + (sigma_next - sigma_hat) * d cancels
    # badly when r is small. Algebraically identical.
    r = sigma_next / sigma_hat
    x_euler = r * x + (1.0 - r) * d_hat
    d_next = D(x_euler, sigma_next)
    return r * x + (1.0 - r) / (2.0 * r) * ((2.0 * r - 1.0) * d_hat + d_next)


def sample(denoiser, schedule: NoiseSchedule, guidance: GuidanceSpec | None, shape: Sequence[int],
           rng, params: EdmParams | None = None) -> np.ndarray:
    """Run the reverse process over ``schedule``.

    ``rng`` may be a single generator or one generator per sample (``shape[0]``
    of them); in the latter case every sample's noise comes from its own
    stream, so results do not depend on how samples are batched.
    """
    params = params or EdmParams(steps=len(schedule) - 1)
    x = np.zeros(tuple(shape))
    x = schedule.sigmas[0] * _noise_like(x, rng)
    D = guided(denoiser, guidance) if guidance is not None else denoiser
    for sigma_t, sigma_next in schedule.pairs():
        if sigma_t == 0.0:  # degenerate schedules such as [1, 0, 0]
            break
        x = heun_step(x, float(sigma_t), float(sigma_next), D, None, params, rng)
    return x
