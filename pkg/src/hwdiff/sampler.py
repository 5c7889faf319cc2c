"""Reverse-process samplers and classifier-free guidance."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Optional, Protocol, Sequence

import numpy as np
import torch

from .schedule import NoiseSchedule, predict_mu_from_eps

SAMPLER_KINDS = ("ancestral", "strided_deterministic")
NOISE_STD_CHOICES = ("posterior", "beta")


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "strided_deterministic"
    num_steps: int = 50
    guidance_scale: float = 0.0
    seed: int = 0
    # "posterior": sqrt(beta_tilde_t); "beta": sqrt(beta_t)
    noise_std: str = "posterior"

    def __post_init__(self) -> None:
        kind = {"strided": "strided_deterministic"}.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be non-negative")
        if self.noise_std not in NOISE_STD_CHOICES:
            raise ValueError(f"noise_std must be one of {NOISE_STD_CHOICES}")


class NoisePredictor(Protocol):
    def __call__(self, z_t: torch.Tensor, t: int, t_emb: Any, C: Any) -> torch.Tensor: ...


class ConditioningProvider(Protocol):
    """Supplies ``(t_emb, C)`` for a timestep; ``null=True`` asks for the guidance null."""

    def __call__(self, t: int, null: bool = False) -> Optional[tuple[Any, Any]]: ...


def cfg_combine(eps_cond: Any, eps_uncond: Any, w_gs: float) -> Any:
    if tuple(eps_cond.shape) != tuple(eps_uncond.shape):
        raise ValueError(f"shape mismatch {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    if w_gs < 0:
        raise ValueError(f"guidance scale must be non-negative, got {w_gs}")
    # same as (1 + w) * eps_cond - w * eps_uncond, but exact when both agree
    return eps_cond + w_gs * (eps_cond - eps_uncond)


def _is_zero(x: Any) -> bool:
    if x is None:
        return True
    if isinstance(x, torch.Tensor):
        return not bool(torch.any(x != 0))
    return not bool(np.any(np.asarray(x) != 0))


def ancestral_step(
    z_t: Any,
    t: int,
    eps_hat: Any,
    noise: Any,
    sched: NoiseSchedule,
    noise_std: str = "posterior",
) -> Any:
    """One step ``z_t -> z_{t-1}``. At ``t == 1`` no noise is added."""
    mean = predict_mu_from_eps(z_t, eps_hat, t, sched)
    if t == 1:
        if not _is_zero(noise):
            raise ValueError("noise must be zero (or None) at t=1")
        return mean
    if noise is None:
        raise ValueError("noise is required for t > 1")
    var = sched.posterior_variance(t) if noise_std == "posterior" else sched.beta(t)
    return mean + math.sqrt(var) * noise


def strided_timesteps(T: int, num_steps: int) -> list[int]:
    """Uniformly strided decreasing subsequence of ``1..T`` of length ``num_steps``."""
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must be in 1..{T}, got {num_steps}")
    ts = np.unique(np.round(np.linspace(1, T, num_steps)).astype(int))
    return [int(t) for t in ts[::-1]]


def strided_step(z_t: Any, t: int, t_prev: int, eps_hat: Any, sched: NoiseSchedule) -> Any:
    """Deterministic (eta = 0) jump from ``t`` to ``t_prev < t``; ``t_prev = 0`` ends the chain."""
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    x0_hat = (z_t - math.sqrt(sched.one_minus_alpha_bar(t)) * eps_hat) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


def _predict(
    predictor: NoisePredictor,
    conditioning: Optional[ConditioningProvider],
    z: torch.Tensor,
    t: int,
    w_gs: float,
) -> torch.Tensor:
    cond = conditioning(t) if conditioning is not None else None
    t_emb, C = cond if cond is not None else (None, None)
    eps = predictor(z, t, t_emb, C)
    if w_gs == 0:
        return eps
    null = conditioning(t, null=True) if conditioning is not None else None
    if null is None:
        raise ValueError("guidance_scale > 0 requires a null conditioning")
    eps_uncond = predictor(z, t, null[0], null[1])
    return cfg_combine(eps, eps_uncond, w_gs)


@torch.no_grad()
def sample(
    predictor: NoisePredictor,
    conditioning: Optional[ConditioningProvider],
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    shape: Sequence[int],
    dtype: torch.dtype = torch.float32,
    callback: Optional[Callable[[int, torch.Tensor], None]] = None,
) -> torch.Tensor:
    """Run the reverse process from ``z_T ~ N(0, I)`` and return ``z_0``.

    The random stream depends only on ``cfg.seed``: ``z_T`` is drawn first,
    then one noise tensor per ancestral step with ``t > 1``.
    """
    gen = torch.Generator().manual_seed(int(cfg.seed))
    z = torch.randn(tuple(shape), generator=gen, dtype=dtype)
    w = float(cfg.guidance_scale)

    if cfg.kind == "ancestral":
        if cfg.num_steps != sched.T:
            raise ValueError(f"ancestral sampling needs num_steps == T ({sched.T})")
        for t in range(sched.T, 0, -1):
            eps = _predict(predictor, conditioning, z, t, w)
            noise = torch.randn(z.shape, generator=gen, dtype=dtype) if t > 1 else None
            z = ancestral_step(z, t, eps, noise, sched, cfg.noise_std)
            if callback is not None:
                callback(t, z)
        return z

    ts = strided_timesteps(sched.T, cfg.num_steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps = _predict(predictor, conditioning, z, t, w)
        z = strided_step(z, t, t_prev, eps, sched)
        if callback is not None:
            callback(t, z)
    return z
