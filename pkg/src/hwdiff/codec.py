"""Image <-> latent codecs with a fixed spatial downsampling factor of 8.

``PatchCodec`` is an exact invertible transform: each 8x8 patch is taken
through an orthonormal 2-D DCT and affinely rescaled per latent channel.
``SmallAutoencoder`` is an optional trainable KL-regularised codec.

Images are ``(..., H, W, ch)`` float arrays in ``[0, 1]``; latents are
``(..., H/8, W/8, c)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.fft
import torch
import torch.nn.functional as F
from torch import nn

FACTOR = 8


@dataclass(frozen=True)
class CodecSpec:
    kind: str = "patch_orthogonal"
    downsample_factor: int = FACTOR
    latent_channels: int = FACTOR * FACTOR
    image_channels: int = 1

    def __post_init__(self) -> None:
        if self.downsample_factor != FACTOR:
            raise ValueError("downsample factor is fixed at 8")
        if self.kind not in ("patch_orthogonal", "trained_small"):
            raise ValueError(f"unknown codec kind {self.kind!r}")
        if self.kind == "patch_orthogonal" and self.latent_channels != self.image_channels * FACTOR**2:
            raise ValueError("patch_orthogonal latent_channels must be image_channels * 64")


def _dct_matrix(n: int = FACTOR) -> np.ndarray:
    return scipy.fft.dct(np.eye(n), norm="ortho", axis=0)


class PatchCodec:
    """Patch DCT codec. ``center``/``scale`` are per latent channel.

    Unfitted, ``center`` is the transform of a mid-gray patch and ``scale`` is
    1, so a zero latent decodes to mid-gray. ``fit`` recalibrates both from a
    corpus so latents are roughly zero-mean, unit-variance per channel.
    """

    def __init__(self, image_channels: int = 1, center: Optional[np.ndarray] = None, scale: Optional[np.ndarray] = None):
        self.image_channels = image_channels
        self.spec = CodecSpec("patch_orthogonal", FACTOR, image_channels * FACTOR**2, image_channels)
        self._D = _dct_matrix()
        c = self.spec.latent_channels
        gray = np.full((FACTOR, FACTOR, image_channels), 0.5)
        self.center = np.asarray(center, dtype=np.float64) if center is not None else self._transform(gray)
        self.scale = np.asarray(scale, dtype=np.float64) if scale is not None else np.ones(c)
        if self.center.shape != (c,) or self.scale.shape != (c,):
            raise ValueError(f"center/scale must have shape ({c},)")
        if np.any(self.scale <= 0):
            raise ValueError("scale must be positive")

    @property
    def latent_channels(self) -> int:
        return self.spec.latent_channels

    def _patches(self, image: np.ndarray) -> np.ndarray:
        *lead, H, W, ch = image.shape
        if H % FACTOR or W % FACTOR:
            raise ValueError(f"image dims must be divisible by {FACTOR}, got {H}x{W}")
        if ch != self.image_channels:
            raise ValueError(f"expected {self.image_channels} channel(s), got {ch}")
        p = image.reshape(*lead, H // FACTOR, FACTOR, W // FACTOR, FACTOR, ch)
        return np.moveaxis(p, -4, -3)  # (..., h, w, 8, 8, ch)

    def _transform(self, patches: np.ndarray) -> np.ndarray:
        coef = np.einsum("ij,...jkc,lk->...ilc", self._D, patches, self._D)
        return coef.reshape(*coef.shape[:-3], -1)

    def _inverse(self, coef: np.ndarray) -> np.ndarray:
        coef = coef.reshape(*coef.shape[:-1], FACTOR, FACTOR, self.image_channels)
        return np.einsum("ji,...jkc,kl->...ilc", self._D, coef, self._D)

    def _as_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2 or (self.image_channels == 1 and image.shape[-1] != 1):
            image = image[..., None]
        return image

    def encode(self, image: np.ndarray) -> np.ndarray:
        coef = self._transform(self._patches(self._as_image(image)))
        return (coef - self.center) / self.scale

    def decode(self, latent: np.ndarray, clamp: bool = True) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float64)
        if latent.shape[-1] != self.latent_channels:
            raise ValueError(f"expected {self.latent_channels} latent channels, got {latent.shape[-1]}")
        patches = self._inverse(latent * self.scale + self.center)
        *lead, h, w, _, _, ch = patches.shape
        img = np.moveaxis(patches, -3, -4).reshape(*lead, h * FACTOR, w * FACTOR, ch)
        return np.clip(img, 0.0, 1.0) if clamp else img

    def fit(self, images: np.ndarray, min_scale: float = 1e-3) -> "PatchCodec":
        coef = self._transform(self._patches(self._as_image(images)))
        flat = coef.reshape(-1, self.latent_channels)
        self.center = flat.mean(axis=0)
        self.scale = np.maximum(flat.std(axis=0), min_scale)
        return self

    def state(self) -> dict:
        return {"kind": "patch_orthogonal", "image_channels": self.image_channels,
                "center": self.center.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_state(cls, state: dict) -> "PatchCodec":
        return cls(state["image_channels"], np.array(state["center"]), np.array(state["scale"]))


class SmallAutoencoder(nn.Module):
    """Three stride-2 stages down to 1/8 resolution with a Gaussian latent."""

    def __init__(self, image_channels: int = 1, latent_channels: int = 16, width: int = 32):
        super().__init__()
        self.spec = CodecSpec("trained_small", FACTOR, latent_channels, image_channels)
        w = width

        def down(i, o):
            return nn.Sequential(nn.Conv2d(i, o, 4, stride=2, padding=1), nn.SiLU(), nn.Conv2d(o, o, 3, padding=1), nn.SiLU())

        def up(i, o):
            return nn.Sequential(nn.ConvTranspose2d(i, o, 4, stride=2, padding=1), nn.SiLU(), nn.Conv2d(o, o, 3, padding=1), nn.SiLU())

        self.enc = nn.Sequential(down(image_channels, w), down(w, 2 * w), down(2 * w, 2 * w))
        self.to_moments = nn.Conv2d(2 * w, 2 * latent_channels, 1)
        self.from_latent = nn.Conv2d(latent_channels, 2 * w, 3, padding=1)
        self.dec = nn.Sequential(up(2 * w, 2 * w), up(2 * w, w), up(w, w))
        self.to_image = nn.Conv2d(w, image_channels, 3, padding=1)

    @property
    def latent_channels(self) -> int:
        return self.spec.latent_channels

    def moments(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean, logvar = self.to_moments(self.enc(x)).chunk(2, dim=1)
        return mean, logvar.clamp(-20, 10)

    def decode_tensor(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.to_image(self.dec(self.from_latent(z))))

    def encode(self, image: np.ndarray) -> np.ndarray:
        x, single = _to_nchw(image, self.spec.image_channels)
        if x.shape[2] % FACTOR or x.shape[3] % FACTOR:
            raise ValueError(f"image dims must be divisible by {FACTOR}")
        with torch.no_grad():
            mean, _ = self.moments(x)
        out = mean.permute(0, 2, 3, 1).double().numpy()
        return out[0] if single else out

    def decode(self, latent: np.ndarray, clamp: bool = True) -> np.ndarray:
        lat = np.asarray(latent, dtype=np.float32)
        single = lat.ndim == 3
        z = torch.from_numpy(lat[None] if single else lat).permute(0, 3, 1, 2)
        if z.shape[1] != self.latent_channels:
            raise ValueError(f"expected {self.latent_channels} latent channels, got {z.shape[1]}")
        with torch.no_grad():
            img = self.decode_tensor(z).permute(0, 2, 3, 1).double().numpy()
        img = np.clip(img, 0.0, 1.0) if clamp else img
        return img[0] if single else img


def _to_nchw(image: np.ndarray, channels: int) -> tuple[torch.Tensor, bool]:
    """Accepts ``(H, W)``, ``(H, W, ch)`` or ``(B, H, W, ch)``; reports whether input was unbatched."""
    x = np.asarray(image, dtype=np.float32)
    if x.ndim == 2:
        x = x[..., None]
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[-1] != channels:
        raise ValueError(f"expected {channels} image channel(s), got shape {np.shape(image)}")
    return torch.from_numpy(np.ascontiguousarray(x)).permute(0, 3, 1, 2), single


def train_small_autoencoder(
    images: np.ndarray,
    latent_channels: int = 16,
    width: int = 32,
    steps: int = 2000,
    batch_size: int = 16,
    lr: float = 2e-3,
    kl_weight: float = 1e-6,
    seed: int = 0,
) -> SmallAutoencoder:
    """Fit the small codec with an L2 reconstruction loss plus a light KL term."""
    torch.manual_seed(seed)
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    model = SmallAutoencoder(images.shape[-1], latent_channels, width)
    data, _ = _to_nchw(images, images.shape[-1])
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(steps):
        idx = torch.randint(0, data.shape[0], (batch_size,), generator=gen)
        x = data[idx]
        mean, logvar = model.moments(x)
        z = mean + torch.exp(0.5 * logvar) * torch.randn(mean.shape, generator=gen)
        rec = model.decode_tensor(z)
        kl = 0.5 * torch.mean(mean**2 + logvar.exp() - 1.0 - logvar)
        loss = F.mse_loss(rec, x) + kl_weight * kl
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    return model.eval()


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


def make_codec(spec: CodecSpec):
    if spec.kind == "patch_orthogonal":
        return PatchCodec(spec.image_channels)
    return SmallAutoencoder(spec.image_channels, spec.latent_channels)


def dump_latent(path: str | Path, latent: np.ndarray) -> None:
    """Debug dump: ``uint32`` rank, ``uint32`` dims, then little-endian float32 data."""
    arr = np.ascontiguousarray(latent, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_latent(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (ndim,) = struct.unpack_from("<I", raw, 0)
    shape = struct.unpack_from(f"<{ndim}I", raw, 4)
    return np.frombuffer(raw, dtype="<f4", offset=4 + 4 * ndim).reshape(shape).copy()
