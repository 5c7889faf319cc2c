"""Variance schedule and closed-form forward/posterior quantities.

Timesteps are 1-based at the API (``t`` in ``1..T``); the tables are stored
0-based. ``alpha_bar(0)`` is defined as 1 so the posterior is well defined at
``t = 1``. All schedule arithmetic is done in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    beta_start: float
    beta_end: float
    T: int
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    one_minus_alpha_bars: np.ndarray = field(repr=False)
    alpha_bar_0: float = 1.0

    def alpha_bar(self, t: int) -> float:
        """Cumulative product up to ``t``; ``alpha_bar(0) == 1``."""
        t = int(t)
        if t == 0:
            return self.alpha_bar_0
        _check_t(t, self.T)
        return float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        _check_t(t, self.T)
        return float(self.betas[int(t) - 1])

    def alpha(self, t: int) -> float:
        _check_t(t, self.T)
        return float(self.alphas[int(t) - 1])

    def posterior_variance(self, t: int) -> float:
        _check_t(t, self.T)
        ab_prev = self.alpha_bar(t - 1)
        return (1.0 - ab_prev) / self.one_minus_alpha_bar(t) * self.beta(t)

    def one_minus_alpha_bar(self, t: int) -> float:
        _check_t(t, self.T)
        return float(self.one_minus_alpha_bars[int(t) - 1])

    def to_text(self) -> str:
        return f"beta_start={self.beta_start!r}\nbeta_end={self.beta_end!r}\nT={self.T}\n"

    @classmethod
    def from_text(cls, text: str) -> "NoiseSchedule":
        kv: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        try:
            return linear_schedule(float(kv["beta_start"]), float(kv["beta_end"]), int(kv["T"]))
        except KeyError as exc:
            raise ValueError(f"schedule text is missing key {exc.args[0]!r}") from None


def _check_t(t: Any, T: int) -> None:
    if isinstance(t, (np.ndarray, torch.Tensor)):
        lo, hi = int(t.min()), int(t.max())
    else:
        lo = hi = int(t)
    if lo < 1 or hi > T:
        raise ValueError(f"timestep out of range 1..{T}: {lo if lo < 1 else hi}")


def linear_schedule(beta_start: float = 1e-4, beta_end: float = 0.02, T: int = 1000) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    T = int(T)
    i = np.arange(T, dtype=np.float64)
    betas = beta_start + i * (beta_end - beta_start) / (T - 1)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    # 1 - alpha_bar_1 is beta_1 by definition; keep it exact so the t=1 posterior mean is x0
    one_minus = 1.0 - alpha_bars
    one_minus[0] = betas[0]
    for arr in (betas, alphas, alpha_bars, one_minus):
        arr.flags.writeable = False
    return NoiseSchedule(float(beta_start), float(beta_end), T, betas, alphas, alpha_bars, one_minus)


def _coef(table: np.ndarray, t: Any, like: Any) -> Any:
    """Look up a 1-based table entry, shaped to broadcast against ``like``.

    Scalar ``t`` gives a Python float. Array ``t`` (one per batch item) gives
    an array of the same kind as ``like`` with trailing singleton axes.
    """
    if isinstance(t, torch.Tensor):
        vals = torch.from_numpy(table[t.long().numpy() - 1].copy())
        vals = vals.to(dtype=like.dtype if isinstance(like, torch.Tensor) else torch.float64)
        return vals.reshape(-1, *([1] * (like.ndim - 1)))
    if isinstance(t, np.ndarray):
        vals = table[t.astype(np.int64) - 1]
        if isinstance(like, torch.Tensor):
            return torch.as_tensor(vals, dtype=like.dtype).reshape(-1, *([1] * (like.ndim - 1)))
        return vals.reshape(-1, *([1] * (np.ndim(like) - 1)))
    return float(table[int(t) - 1])


def _check_shapes(a: Any, b: Any, what: str) -> None:
    if tuple(np.shape(a)) != tuple(np.shape(b)):
        raise ValueError(f"{what}: shape mismatch {tuple(np.shape(a))} vs {tuple(np.shape(b))}")


def q_sample(x0: Any, t: Any, eps: Any, sched: NoiseSchedule) -> Any:
    """Draw ``x_t ~ q(x_t | x_0)`` by reparameterisation with supplied noise."""
    _check_shapes(x0, eps, "q_sample")
    _check_t(t, sched.T)
    ab = _coef(sched.alpha_bars, t, x0)
    om = _coef(sched.one_minus_alpha_bars, t, x0)
    if isinstance(ab, float):
        return math.sqrt(ab) * x0 + math.sqrt(om) * eps
    sqrt = torch.sqrt if isinstance(ab, torch.Tensor) else np.sqrt
    return sqrt(ab) * x0 + sqrt(om) * eps


@dataclass(frozen=True)
class PosteriorParams:
    mean: Any
    variance: float


def posterior(x0: Any, xt: Any, t: int, sched: NoiseSchedule) -> PosteriorParams:
    """Mean and variance of ``q(x_{t-1} | x_t, x_0)``."""
    _check_shapes(x0, xt, "posterior")
    _check_t(t, sched.T)
    one_minus_ab = sched.one_minus_alpha_bar(t)
    ab_prev = sched.alpha_bar(t - 1)
    beta_t = sched.beta(t)
    alpha_t = sched.alpha(t)
    c0 = math.sqrt(ab_prev) * beta_t / one_minus_ab
    ct = math.sqrt(alpha_t) * (1.0 - ab_prev) / one_minus_ab
    variance = (1.0 - ab_prev) / one_minus_ab * beta_t
    return PosteriorParams(mean=c0 * x0 + ct * xt, variance=float(variance))


def predict_mu_from_eps(xt: Any, eps_hat: Any, t: int, sched: NoiseSchedule) -> Any:
    """Reverse-process mean implied by a noise prediction."""
    _check_shapes(xt, eps_hat, "predict_mu_from_eps")
    _check_t(t, sched.T)
    beta_t = sched.beta(t)
    return (xt - (beta_t / math.sqrt(sched.one_minus_alpha_bar(t))) * eps_hat) / math.sqrt(sched.alpha(t))
