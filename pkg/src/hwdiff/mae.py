"""Masked-autoencoder style encoder and writer-embedding pooling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .conditioning import WriterEmbedding


@dataclass(frozen=True)
class MaeConfig:
    patch_size: int = 8
    image_height: int = 64
    image_width: int = 256
    in_chans: int = 1
    embed_dim: int = 768
    encoder_layers: int = 6
    decoder_layers: int = 6
    heads: int = 8
    mask_ratio: float = 0.75
    pos_embedding: str = "additive"  # or "concat"

    def __post_init__(self) -> None:
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError("image dims must be divisible by the patch size")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if self.pos_embedding not in ("additive", "concat"):
            raise ValueError("pos_embedding must be 'additive' or 'concat'")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.in_chans


def patchify(images, p: int = 8):
    """``(..., H, W[, ch])`` -> ``(..., N, p*p*ch)``, patches in row-major order."""
    xp = torch if isinstance(images, torch.Tensor) else np
    x = images[..., None] if images.ndim == 2 or images.shape[-1] > 4 else images
    *lead, H, W, ch = x.shape
    if H % p or W % p:
        raise ValueError(f"image dims {H}x{W} not divisible by patch size {p}")
    x = x.reshape(*lead, H // p, p, W // p, p, ch)
    x = xp.moveaxis(x, -4, -3) if xp is np else x.movedim(-4, -3)
    return x.reshape(*lead, (H // p) * (W // p), p * p * ch)


def unpatchify(patches, grid: tuple[int, int], p: int = 8, channels: int = 1):
    xp = torch if isinstance(patches, torch.Tensor) else np
    gh, gw = grid
    *lead, N, D = patches.shape
    if N != gh * gw or D != p * p * channels:
        raise ValueError(f"patch array {tuple(patches.shape)} does not match grid {grid}")
    x = patches.reshape(*lead, gh, gw, p, p, channels)
    x = xp.moveaxis(x, -3, -4) if xp is np else x.movedim(-3, -4)
    x = x.reshape(*lead, gh * p, gw * p, channels)
    return x[..., 0] if channels == 1 else x


@dataclass(frozen=True)
class MaskPlan:
    mask: np.ndarray  # bool, True = masked
    num_masked: int


def make_mask(N: int, r: float, seed) -> MaskPlan:
    if not 0.0 < r < 1.0:
        raise ValueError(f"mask ratio must be in (0, 1), got {r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = int(math.floor(N * r))
    mask = np.zeros(N, dtype=bool)
    mask[rng.choice(N, size=k, replace=False)] = True
    return MaskPlan(mask, k)


def masked_loss(pred, target, mask, reduction: str = "sum"):
    """Squared error summed over masked patches only.

    ``reduction="mean"`` divides by ``num_masked * patch_dim`` (per image,
    then averaged over the batch).
    """
    if tuple(pred.shape) != tuple(target.shape):
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if isinstance(mask, MaskPlan):
        mask = mask.mask
    if isinstance(pred, torch.Tensor):
        m = torch.as_tensor(mask, dtype=pred.dtype)
        per_patch = ((pred - target) ** 2).sum(-1)
        total = (per_patch * m).sum(-1)
        if reduction == "sum":
            return total.sum()
        return (total / (m.sum(-1) * pred.shape[-1])).mean()
    m = np.asarray(mask, dtype=np.float64)
    per_patch = ((np.asarray(pred, np.float64) - np.asarray(target, np.float64)) ** 2).sum(-1)
    total = (per_patch * m).sum(-1)
    if reduction == "sum":
        return float(np.sum(total))
    return float(np.mean(total / (m.sum(-1) * pred.shape[-1])))


def sincos_2d(embed_dim: int, grid: tuple[int, int]) -> np.ndarray:
    """Fixed 2-D sine-cosine position table, ``(gh*gw, embed_dim)``."""
    if embed_dim % 4:
        raise ValueError("embed_dim must be divisible by 4")
    gh, gw = grid
    ys, xs = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64), indexing="ij")
    omega = 1.0 / 10000 ** (np.arange(embed_dim // 4, dtype=np.float64) / (embed_dim / 4))

    def enc(pos):
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([enc(ys), enc(xs)], axis=1)


def _blocks(dim: int, heads: int, layers: int) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        dim, heads, dim_feedforward=4 * dim, dropout=0.0, activation="gelu", batch_first=True, norm_first=True
    )
    return nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)


class MaskedAutoencoder(nn.Module):
    def __init__(self, cfg: MaeConfig):
        super().__init__()
        self.cfg = cfg
        D, N = cfg.embed_dim, cfg.num_patches
        concat = cfg.pos_embedding == "concat"
        proj_dim = D // 2 if concat else D
        pos_dim = D - proj_dim if concat else D
        self.patch_embed = nn.Linear(cfg.patch_dim, proj_dim)
        self.register_buffer("pos", torch.from_numpy(sincos_2d(pos_dim, cfg.grid)).float(), persistent=False)
        self.encoder = _blocks(D, cfg.heads, cfg.encoder_layers)
        self.enc_norm = nn.LayerNorm(D)
        self.mask_token = nn.Parameter(torch.zeros(D))
        nn.init.normal_(self.mask_token, std=0.02)
        self.decoder = _blocks(D, cfg.heads, cfg.decoder_layers)
        self.dec_norm = nn.LayerNorm(D)
        self.head = nn.Linear(D, cfg.patch_dim)
        assert self.pos.shape[0] == N

    def embed_patches(self, patches: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(patches)
        pos = self.pos.to(x.dtype).expand(x.shape[0], -1, -1)
        if self.cfg.pos_embedding == "concat":
            return torch.cat([x, pos], dim=-1)
        return x + pos

    def encode_visible(self, patches: torch.Tensor, keep_idx: torch.Tensor) -> torch.Tensor:
        """Encode the visible tokens only; output length equals ``keep_idx.shape[1]``."""
        x = self.embed_patches(patches)
        x = torch.gather(x, 1, keep_idx[..., None].expand(-1, -1, x.shape[-1]))
        return self.enc_norm(self.encoder(x))

    def decode(self, latent: torch.Tensor, keep_idx: torch.Tensor) -> torch.Tensor:
        """Scatter visible latents into a length-N sequence filled with mask tokens."""
        B, _, D = latent.shape
        full = self.mask_token.to(latent.dtype).expand(B, self.cfg.num_patches, D).clone()
        full = full.scatter(1, keep_idx[..., None].expand(-1, -1, D), latent)
        pos = self.pos.to(full.dtype)
        if self.cfg.pos_embedding == "additive":
            full = full + pos
        else:
            full = torch.cat([full[..., : D - pos.shape[-1]], pos.expand(B, -1, -1)], dim=-1)
        return self.head(self.dec_norm(self.decoder(full)))

    def random_masks(self, batch: int, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        N = self.cfg.num_patches
        k = int(math.floor(N * self.cfg.mask_ratio))
        order = torch.argsort(torch.rand(batch, N, generator=gen), dim=1)
        keep_idx = torch.sort(order[:, k:], dim=1).values
        mask = torch.ones(batch, N, dtype=torch.bool)
        mask.scatter_(1, keep_idx, False)
        return keep_idx, mask

    def forward(self, images: torch.Tensor, gen: torch.Generator):
        """Returns ``(pred, target, mask)`` for a batch of ``(B, H, W[, ch])`` images."""
        target = patchify(images, self.cfg.patch_size)
        keep_idx, mask = self.random_masks(images.shape[0], gen)
        pred = self.decode(self.encode_visible(target, keep_idx), keep_idx)
        return pred, target, mask

    @torch.no_grad()
    def patch_embeddings(self, image) -> np.ndarray:
        """Encoder output for all N patches of one image (no masking), ``(N, D)``."""
        x = torch.as_tensor(np.asarray(image), dtype=self.pos.dtype)[None]
        patches = patchify(x, self.cfg.patch_size)
        keep = torch.arange(self.cfg.num_patches)[None]
        return self.encode_visible(patches, keep)[0].double().numpy()


def pool_embeddings(patch_embeddings: np.ndarray) -> np.ndarray:
    """Mean over all images and patches, ``(K, N, D) -> (D,)``.

    Values are sorted per dimension and summed relative to their minimum, so the
    result does not depend on image order and a constant input is returned
    unchanged.
    """
    e = np.asarray(patch_embeddings, dtype=np.float64)
    flat = np.sort(e.reshape(-1, e.shape[-1]), axis=0)
    ref = flat[0]
    return ref + np.sum(flat - ref, axis=0) / flat.shape[0]


def writer_embedding(
    model: MaskedAutoencoder,
    images: Sequence[np.ndarray],
    writer_id: str = "",
    image_ids: Optional[Sequence] = None,
) -> WriterEmbedding:
    if len(images) == 0:
        raise ValueError("writer embedding needs at least one example image")
    per_image = np.stack([model.patch_embeddings(img) for img in images])
    return WriterEmbedding(pool_embeddings(per_image), writer_id, list(image_ids or range(len(images))))


def resample_writer_embeddings(
    model: MaskedAutoencoder,
    images: Sequence[np.ndarray],
    K: int = 10,
    count: int = 100,
    seed=0,
    writer_id: str = "",
    image_ids: Optional[Sequence] = None,
) -> list[WriterEmbedding]:
    """``count`` embeddings, each pooled from ``K`` images of the writer.

    Draws without replacement when the writer has at least ``K`` images, with
    replacement otherwise.
    """
    if len(images) == 0:
        raise ValueError(f"writer {writer_id!r} has no images")
    if K < 1:
        raise ValueError("K must be >= 1")
    ids = list(image_ids) if image_ids is not None else list(range(len(images)))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cache = np.stack([model.patch_embeddings(img) for img in images])
    n = len(images)
    out = []
    for _ in range(count):
        pick = rng.choice(n, size=K, replace=n < K)
        out.append(WriterEmbedding(pool_embeddings(cache[pick]), writer_id, [ids[i] for i in pick]))
    return out


# -- embedding store --------------------------------------------------------------


def write_embedding_store(path: str | Path, records: Iterable[tuple[str, int, np.ndarray]]) -> int:
    """Write ``<path>.bin`` (rows of little-endian float32) and ``<path>.index.tsv``."""
    path = Path(path)
    rows = list(records)
    if not rows:
        raise ValueError("no embeddings to write")
    dim = len(rows[0][2])
    with open(path.with_suffix(".bin"), "wb") as fh:
        for _, _, vec in rows:
            if len(vec) != dim:
                raise ValueError("embeddings have inconsistent dimension")
            fh.write(np.asarray(vec, dtype="<f4").tobytes())
    with open(path.with_suffix(".index.tsv"), "w") as fh:
        fh.write(f"# dim={dim} rows={len(rows)}\n")
        for i, (wid, k, _) in enumerate(rows):
            fh.write(f"{i}\t{wid}\t{k}\n")
    return len(rows)


def read_embedding_store(path: str | Path) -> dict[str, np.ndarray]:
    """Map writer id -> ``(count, dim)`` array ordered by resample index."""
    path = Path(path)
    lines = path.with_suffix(".index.tsv").read_text().splitlines()
    header = dict(kv.split("=") for kv in lines[0].lstrip("# ").split())
    dim, nrows = int(header["dim"]), int(header["rows"])
    data = np.fromfile(path.with_suffix(".bin"), dtype="<f4")
    if data.size != dim * nrows:
        raise ValueError(f"embedding store size mismatch: {data.size} != {dim}*{nrows}")
    data = data.reshape(nrows, dim)
    grouped: dict[str, list[tuple[int, int]]] = {}
    for line in lines[1:]:
        row, wid, k = line.split("\t")
        grouped.setdefault(wid, []).append((int(k), int(row)))
    return {wid: data[[r for _, r in sorted(v)]].astype(np.float64) for wid, v in grouped.items()}



# -- training ---------------------------------------------------------------------


@dataclass(frozen=True)
class MaeTrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1.5e-4
    warmup_epochs: int = 3
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.05
    seed: int = 0
    max_steps: Optional[int] = None


def lr_factor(step: int, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup followed by cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class MaeTrainState:
    model: MaskedAutoencoder
    optimizer: torch.optim.Optimizer
    step: int = 0

    def state_dict(self) -> dict:
        return {"model": self.model.state_dict(), "optimizer": self.optimizer.state_dict(), "step": self.step}

    def load_state_dict(self, state: dict) -> None:
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.step = int(state["step"])


def init_mae_state(model: MaskedAutoencoder, cfg: MaeTrainConfig) -> MaeTrainState:
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    return MaeTrainState(model, opt)


def train_mae(
    state: MaeTrainState,
    images: np.ndarray,
    cfg: MaeTrainConfig,
    log_file=None,
    until_step: Optional[int] = None,
) -> list[float]:
    """Masked-patch reconstruction training on ``(n, H, W)`` images in ``[0, 1]``.

    Batches and masks for step ``s`` depend only on ``(seed, s)``, so stopping
    and resuming from a saved state reproduces the uninterrupted run.
    """
    images = np.asarray(images, dtype=np.float32)
    n = len(images)
    if n == 0:
        raise ValueError("no images to train on")
    per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    stop = total if until_step is None else min(total, until_step)
    warmup = cfg.warmup_epochs * per_epoch
    model = state.model
    losses = []
    order, order_epoch = None, -1
    while state.step < stop:
        epoch, b = divmod(state.step, per_epoch)
        if epoch != order_epoch:
            order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(n)
            order_epoch = epoch
        batch = torch.from_numpy(images[order[b * cfg.batch_size : (b + 1) * cfg.batch_size]])
        lr = cfg.learning_rate * lr_factor(state.step, warmup, total)
        for g in state.optimizer.param_groups:
            g["lr"] = lr
        gen = torch.Generator().manual_seed(int(np.random.default_rng([cfg.seed, state.step]).integers(2**62)))
        model.train()
        pred, target, mask = model(batch, gen)
        loss = masked_loss(pred, target, mask, reduction="mean")
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite MAE loss at step {state.step}")
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        state.optimizer.step()
        state.step += 1
        losses.append(loss.item())
        if log_file is not None:
            log_file.write(json.dumps({"step": state.step, "epoch": epoch, "loss": losses[-1], "lr": lr}) + "\n")
    return losses
