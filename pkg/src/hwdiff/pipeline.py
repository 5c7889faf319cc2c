"""Glue between the trained pieces: latents for training items and image
generation from text + writer embeddings."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch

from .codec import PatchCodec, SmallAutoencoder
from .conditioning import encode_texts, tokenize
from .sampler import SamplerConfig, sample
from .schedule import NoiseSchedule
from .training import DiffusionModel


def to_model_latent(latent: np.ndarray) -> np.ndarray:
    """Codec layout ``(..., h, w, c)`` -> model layout ``(..., c, h, w)``."""
    return np.moveaxis(np.asarray(latent), -1, -3)


def to_codec_latent(latent: np.ndarray) -> np.ndarray:
    return np.moveaxis(np.asarray(latent), -3, -1)


class DiffusionGenerator:
    """Samples word images for batches of ``(text, style vector)`` pairs."""

    def __init__(
        self,
        model: DiffusionModel,
        codec: PatchCodec | SmallAutoencoder,
        sched: NoiseSchedule,
        latent_hw: tuple[int, int] = (8, 32),
    ):
        self.model = model.eval()
        self.codec = codec
        self.sched = sched
        self.latent_hw = latent_hw

    def _conditioning(self, texts: Sequence[str], styles: np.ndarray):
        enc = self.model.encoder
        B = len(texts)
        tokens = encode_texts(list(texts), enc.cfg.max_len)
        style = torch.as_tensor(np.asarray(styles), dtype=torch.float32).reshape(B, -1)
        keep = torch.zeros(B, dtype=torch.bool)
        drop = torch.ones(B, dtype=torch.bool)

        def provider(t: int, null: bool = False):
            tt = torch.full((B,), int(t), dtype=torch.long)
            flag = drop if null else keep
            c = enc(tokens, style, tt, flag, flag)
            return c.t_emb, c.C

        return provider

    def _predict(self, z, t, t_emb, C):
        return self.model.unet(z, t_emb, C)

    @torch.no_grad()
    def latents(self, texts: Sequence[str], styles: np.ndarray, cfg: SamplerConfig) -> torch.Tensor:
        for t in texts:
            tokenize(t, self.model.encoder.cfg.max_len)  # raises on filter violations
        shape = (len(texts), self.model.unet.cfg.latent_channels, *self.latent_hw)
        return sample(self._predict, self._conditioning(texts, styles), cfg, self.sched, shape)

    def images(self, texts: Sequence[str], styles: np.ndarray, cfg: SamplerConfig) -> np.ndarray:
        """``(B, 64, 256)`` grayscale images in ``[0, 1]``."""
        z = self.latents(texts, styles, cfg).double().numpy()
        img = self.codec.decode(to_codec_latent(z))
        return img[..., 0]


def batched_generate(
    gen: DiffusionGenerator,
    pairs: Sequence[tuple[str, np.ndarray]],
    cfg: SamplerConfig,
    batch_size: int = 32,
) -> list[np.ndarray]:
    """Generate in fixed-size chunks; chunk ``i`` uses seed ``cfg.seed + i``."""
    out: list[np.ndarray] = []
    for i, start in enumerate(range(0, len(pairs), batch_size)):
        chunk = pairs[start : start + batch_size]
        sub = SamplerConfig(cfg.kind, cfg.num_steps, cfg.guidance_scale, cfg.seed + i, cfg.noise_std)
        imgs = gen.images([p[0] for p in chunk], np.stack([p[1] for p in chunk]), sub)
        out.extend(imgs)
    return out


def noise_image(seed: int, shape: tuple[int, int] = (64, 256)) -> np.ndarray:
    """Untrained-generator stand-in: uniform noise."""
    return np.random.default_rng(seed).random(shape)


def fit_patch_codec(images: np.ndarray, sample_limit: Optional[int] = None) -> PatchCodec:
    imgs = np.asarray(images)
    if sample_limit is not None:
        imgs = imgs[:sample_limit]
    return PatchCodec().fit(imgs)
