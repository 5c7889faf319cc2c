"""Diffusion training: simplified noise-prediction loss, conditioning dropout,
EMA weights and labeled/unlabeled mixing."""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .conditioning import ContentEncoder, EncoderConfig, encode_texts
from .schedule import NoiseSchedule, q_sample
from .unet import UNet, UNetConfig

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 224
    learning_rate: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    p_uncond: float = 0.1
    ema_gamma: float = 0.995
    style_inclusion: str = "ts"
    seed: int = 0
    max_steps: Optional[int] = None
    checkpoint_every: int = 0  # epochs; 0 = only at the end
    semi_supervised: bool = False
    warmup_steps: int = 0  # linear learning-rate ramp; 0 = constant

    def __post_init__(self) -> None:
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if not 0.0 <= self.p_uncond < 1.0:
            raise ValueError(f"p_uncond must be in [0, 1), got {self.p_uncond}")
        if not 0.0 < self.ema_gamma < 1.0:
            raise ValueError(f"ema_gamma must be in (0, 1), got {self.ema_gamma}")


@dataclass
class BatchItem:
    latent: np.ndarray  # (c, h, w)
    transcription: Optional[str]
    writer_id: str
    embeddings: np.ndarray  # (count, style_dim) resampled writer embeddings

    @property
    def labeled(self) -> bool:
        return bool(self.transcription)


class DiffusionModel(nn.Module):
    """Content encoder + UNet, i.e. everything trained by the diffusion loss."""

    def __init__(self, enc_cfg: EncoderConfig, unet_cfg: UNetConfig):
        super().__init__()
        if unet_cfg.conditioning_dim != enc_cfg.cond_dim:
            raise ValueError(
                f"UNet conditioning_dim {unet_cfg.conditioning_dim} != encoder d_c {enc_cfg.cond_dim} for mode {enc_cfg.mode}"
            )
        if unet_cfg.time_dim != enc_cfg.time_dim:
            raise ValueError("UNet and encoder time_dim differ")
        self.encoder = ContentEncoder(enc_cfg)
        self.unet = UNet(unet_cfg)

    def forward(self, z_t, t, tokens, style, drop_text, drop_style) -> torch.Tensor:
        cond = self.encoder(tokens, style, t, drop_text, drop_style)
        return self.unet(z_t, cond.t_emb, cond.C)


def apply_conditioning_dropout(labeled: bool, p_uncond: float, rng: np.random.Generator) -> tuple[bool, bool]:
    """Independent text/style drops; unlabeled items always drop text.

    Both draws are consumed for every item so the random stream does not
    depend on which items are labeled.
    """
    if not 0.0 <= p_uncond < 1.0:
        raise ValueError(f"p_uncond must be in [0, 1), got {p_uncond}")
    drop_text = bool(rng.random() < p_uncond)
    drop_style = bool(rng.random() < p_uncond)
    if not labeled:
        drop_text = True
    return drop_text, drop_style


@torch.no_grad()
def ema_update(ema: nn.Module | dict, params: nn.Module | dict, gamma: float):
    """``ema <- ema * gamma + (1 - gamma) * params`` in place; returns ``ema``."""
    e = ema.state_dict() if isinstance(ema, nn.Module) else ema
    p = params.state_dict() if isinstance(params, nn.Module) else params
    if e.keys() != p.keys():
        raise ValueError("parameter sets differ")
    for k, v in e.items():
        w = p[k]
        if v.shape != w.shape:
            raise ValueError(f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(w.shape)}")
        if v.is_floating_point():
            v.mul_(gamma).add_(w, alpha=1.0 - gamma)
        else:
            v.copy_(w)
    return ema


@dataclass
class PreparedBatch:
    z0: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    tokens: torch.Tensor
    style: torch.Tensor
    drop_text: torch.Tensor
    drop_style: torch.Tensor

    def noised(self, sched: NoiseSchedule) -> torch.Tensor:
        return q_sample(self.z0, self.t, self.eps, sched)


def prepare_batch(
    batch: Sequence[BatchItem],
    sched: NoiseSchedule,
    rng: np.random.Generator,
    p_uncond: float,
    max_len: int = 7,
    dtype: torch.dtype = torch.float32,
) -> PreparedBatch:
    """Draw timesteps, noise, dropout decisions and one resampled embedding per item."""
    if not batch:
        raise ValueError("empty batch")
    B = len(batch)
    z0 = torch.as_tensor(np.stack([it.latent for it in batch]), dtype=dtype)
    if not torch.isfinite(z0).all():
        bad = [i for i, it in enumerate(batch) if not np.all(np.isfinite(it.latent))]
        raise FloatingPointError(f"non-finite latent in batch items {bad}")
    t = torch.as_tensor(rng.integers(1, sched.T + 1, size=B), dtype=torch.long)
    eps = torch.as_tensor(rng.standard_normal(z0.shape), dtype=dtype)
    drops = [apply_conditioning_dropout(it.labeled, p_uncond, rng) for it in batch]
    style = np.stack([it.embeddings[rng.integers(len(it.embeddings))] for it in batch])
    return PreparedBatch(
        z0=z0,
        t=t,
        eps=eps,
        tokens=encode_texts([it.transcription for it in batch], max_len),
        style=torch.as_tensor(style, dtype=dtype),
        drop_text=torch.tensor([d[0] for d in drops]),
        drop_style=torch.tensor([d[1] for d in drops]),
    )


Predictor = Callable[..., torch.Tensor]


def batch_loss(model: Predictor, pb: PreparedBatch, sched: NoiseSchedule, batch: Sequence[BatchItem] = ()) -> torch.Tensor:
    """Mean squared error between the drawn noise and the prediction."""
    z_t = q_sample(pb.z0, pb.t, pb.eps, sched)
    pred = model(z_t, pb.t, pb.tokens, pb.style, pb.drop_text, pb.drop_style)
    per_item = ((pred - pb.eps) ** 2).flatten(1).mean(1)
    if not torch.isfinite(per_item).all():
        bad = torch.nonzero(~torch.isfinite(per_item)).flatten().tolist()
        names = [f"{batch[i].writer_id}:{batch[i].transcription}" for i in bad] if batch else bad
        raise FloatingPointError(f"non-finite loss for batch items {names}")
    return per_item.mean()


def training_step(
    model: Predictor,
    batch: Sequence[BatchItem],
    sched: NoiseSchedule,
    rng: np.random.Generator,
    p_uncond: float = 0.1,
    max_len: int = 7,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Loss for one batch (not yet backpropagated)."""
    pb = prepare_batch(batch, sched, rng, p_uncond, max_len, dtype)
    return batch_loss(model, pb, sched, batch)


def build_semisupervised_epoch(
    labeled: Sequence[BatchItem],
    unlabeled: Sequence[BatchItem],
    rng: np.random.Generator,
) -> list[BatchItem]:
    if not labeled:
        raise ValueError("labeled dataset is empty")
    pool = list(labeled) + list(unlabeled)
    return [pool[i] for i in rng.permutation(len(pool))]


def unlabeled_fraction(labeled_count: int, unlabeled_count: int) -> float:
    return unlabeled_count / (labeled_count + unlabeled_count)


# -- training loop ----------------------------------------------------------------


def warmup_lr(cfg: TrainConfig, step: int) -> float:
    """Learning rate for 0-based ``step``."""
    if step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    return cfg.learning_rate


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, epoch])


@dataclass
class TrainState:
    model: DiffusionModel
    ema: DiffusionModel
    optimizer: torch.optim.Optimizer
    step: int = 0

    def state_dict(self) -> dict:
        return {"model": self.model.state_dict(), "ema": self.ema.state_dict(),
                "optimizer": self.optimizer.state_dict(), "step": self.step}

    def load_state_dict(self, state: dict) -> None:
        self.model.load_state_dict(state["model"])
        self.ema.load_state_dict(state["ema"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.step = int(state["step"])


def init_train_state(model: DiffusionModel, cfg: TrainConfig) -> TrainState:
    ema = copy.deepcopy(model).eval()
    for p in ema.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    return TrainState(model, ema, opt)


def train_diffusion(
    state: TrainState,
    labeled: Sequence[BatchItem],
    unlabeled: Sequence[BatchItem],
    sched: NoiseSchedule,
    cfg: TrainConfig,
    log_file=None,
    checkpoint_fn: Optional[Callable[[int, TrainState], None]] = None,
) -> list[float]:
    """AdamW training with EMA, continuing from ``state.step``.

    Epoch order and per-step randomness are derived from ``(seed, epoch)`` and
    ``(seed, step)``, so a resumed run follows the same trajectory as an
    uninterrupted one. One JSON record per step goes to ``log_file``.
    """
    if not labeled:
        raise ValueError("labeled dataset is empty")
    n = len(labeled) + len(unlabeled)
    per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    model = state.model
    max_len = model.encoder.cfg.max_len
    losses = []
    if log_file is not None and state.step == 0:
        log_file.write(json.dumps({"event": "start", "labeled": len(labeled), "unlabeled": len(unlabeled),
                                   "unlabeled_fraction": unlabeled_fraction(len(labeled), len(unlabeled)),
                                   "style_inclusion": cfg.style_inclusion, "total_steps": total}) + "\n")
    stream, stream_epoch = None, -1
    while state.step < total:
        epoch, b = divmod(state.step, per_epoch)
        if epoch != stream_epoch:
            stream = build_semisupervised_epoch(labeled, unlabeled, epoch_rng(cfg.seed, epoch))
            stream_epoch = epoch
        batch = stream[b * cfg.batch_size : (b + 1) * cfg.batch_size]
        for group in state.optimizer.param_groups:
            group["lr"] = warmup_lr(cfg, state.step)
        model.train()
        loss = training_step(model, batch, sched, step_rng(cfg.seed, state.step), cfg.p_uncond, max_len)
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        state.optimizer.step()
        ema_update(state.ema, model, cfg.ema_gamma)
        state.step += 1
        losses.append(loss.item())
        if log_file is not None:
            log_file.write(json.dumps({"step": state.step, "epoch": epoch, "loss": losses[-1],
                                       "lr": state.optimizer.param_groups[0]["lr"], "timestamp": time.time()}) + "\n")
        end_of_epoch = (state.step % per_epoch) == 0
        if checkpoint_fn and cfg.checkpoint_every and end_of_epoch and (state.step // per_epoch) % cfg.checkpoint_every == 0:
            checkpoint_fn(state.step // per_epoch, state)
    return losses
