"""Reduced conditional UNet noise predictor.

Residual blocks take the timestep embedding additively; every residual block
is followed by a transformer block (self-attention, cross-attention over the
content conditioning, MLP). The latent is downsampled exactly once. A 1x1
convolution from z_t is added to the output, so the trunk only has to learn
the part of the noise that is not a linear function of its input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class UNetConfig:
    latent_channels: int = 64
    base_channels: int = 64
    channel_mult: tuple = (1, 2)
    num_res_blocks: int = 2
    attention_heads: int = 4
    cross_attention_dim: int = 64
    conditioning_dim: int = 256
    time_dim: int = 256
    norm_groups: int = 8
    # 1x1 linear path from z_t to the output, initialised to the identity
    latent_skip: bool = True

    @property
    def downsample_count(self) -> int:
        return len(self.channel_mult) - 1

    def __post_init__(self) -> None:
        if len(self.channel_mult) != 2:
            raise ValueError("the UNet has exactly two levels (one downsample)")


def _groups(channels: int, preferred: int) -> int:
    return math.gcd(channels, preferred)


class MultiHeadAttention(nn.Module):
    """``H`` heads of width ``head_dim``; keys/values come from ``context``.

    Query weights map ``query_dim -> H*head_dim``; key and value weights map
    ``context_dim -> H*head_dim``; the output projection maps back to
    ``query_dim``. Scores are scaled by ``sqrt(head_dim)``.
    """

    def __init__(self, query_dim: int, context_dim: int, heads: int, head_dim: int):
        super().__init__()
        self.heads = heads
        self.head_dim = head_dim
        inner = heads * head_dim
        self.to_q = nn.Linear(query_dim, inner, bias=False)
        self.to_k = nn.Linear(context_dim, inner, bias=False)
        self.to_v = nn.Linear(context_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, query_dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        B, N, _ = x.shape
        L = context.shape[1]
        if context.shape[-1] != self.to_k.in_features:
            raise ValueError(f"context dim {context.shape[-1]} != {self.to_k.in_features}")
        h, d = self.heads, self.head_dim
        q = self.to_q(x).view(B, N, h, d).transpose(1, 2)
        k = self.to_k(context).view(B, L, h, d).transpose(1, 2)
        v = self.to_v(context).view(B, L, h, d).transpose(1, 2)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        out = (w @ v).transpose(1, 2).reshape(B, N, h * d)
        return self.to_out(out)


def mhca(features: torch.Tensor, C: torch.Tensor, attn: MultiHeadAttention) -> torch.Tensor:
    """Cross-attention of ``features`` (N x d_i) over the columns of ``C`` (d_c x L)."""
    return attn(features.unsqueeze(0), C.transpose(0, 1).unsqueeze(0))[0]


class TransformerBlock(nn.Module):
    def __init__(self, channels: int, cfg: UNetConfig):
        super().__init__()
        heads, head_dim = cfg.attention_heads, cfg.cross_attention_dim
        self.norm_in = nn.GroupNorm(_groups(channels, cfg.norm_groups), channels)
        self.ln1 = nn.LayerNorm(channels)
        self.self_attn = MultiHeadAttention(channels, channels, heads, head_dim)
        self.ln2 = nn.LayerNorm(channels)
        self.cross_attn = MultiHeadAttention(channels, cfg.conditioning_dim, heads, head_dim)
        self.ln3 = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(nn.Linear(channels, 4 * channels), nn.GELU(), nn.Linear(4 * channels, channels))

    def forward(self, x: torch.Tensor, C: torch.Tensor) -> torch.Tensor:
        B, ch, H, W = x.shape
        h = self.norm_in(x).flatten(2).transpose(1, 2)
        n = self.ln1(h)
        h = h + self.self_attn(n, n)
        h = h + self.cross_attn(self.ln2(h), C)
        h = h + self.mlp(self.ln3(h))
        return x + h.transpose(1, 2).reshape(B, ch, H, W)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch, groups), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch, groups), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(t_emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        g = cfg.norm_groups
        chs = [cfg.base_channels * m for m in cfg.channel_mult]
        self.conv_in = nn.Conv2d(cfg.latent_channels, chs[0], 3, padding=1)

        self.down = nn.ModuleList()
        skip_chs = []
        ch = chs[0]
        for level, out_ch in enumerate(chs):
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(nn.ModuleList([ResBlock(ch, out_ch, cfg.time_dim, g), TransformerBlock(out_ch, cfg)]))
                ch = out_ch
                skip_chs.append(ch)
            self.down.append(blocks)
        self.downsample = nn.Conv2d(chs[0], chs[0], 3, stride=2, padding=1)

        self.mid = nn.ModuleList([
            ResBlock(ch, ch, cfg.time_dim, g),
            TransformerBlock(ch, cfg),
            ResBlock(ch, ch, cfg.time_dim, g),
        ])

        self.up = nn.ModuleList()
        for level in reversed(range(len(chs))):
            out_ch = chs[level]
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(nn.ModuleList([
                    ResBlock(ch + skip_chs.pop(), out_ch, cfg.time_dim, g),
                    TransformerBlock(out_ch, cfg),
                ]))
                ch = out_ch
            self.up.append(blocks)
        self.upsample = nn.Conv2d(chs[1], chs[1], 3, padding=1)

        self.norm_out = nn.GroupNorm(_groups(ch, g), ch)
        self.conv_out = nn.Conv2d(ch, cfg.latent_channels, 3, padding=1)
        if cfg.latent_skip:
            self.skip_out = nn.Conv2d(cfg.latent_channels, cfg.latent_channels, 1)
            with torch.no_grad():
                self.skip_out.weight.copy_(torch.eye(cfg.latent_channels)[:, :, None, None])
                self.skip_out.bias.zero_()

    def forward(self, z_t: torch.Tensor, t_emb: torch.Tensor, C: torch.Tensor) -> torch.Tensor:
        if z_t.ndim != 4 or z_t.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"expected (B, {self.cfg.latent_channels}, h, w) latent, got {tuple(z_t.shape)}")
        if z_t.shape[2] % 2 or z_t.shape[3] % 2:
            raise ValueError(f"latent spatial dims must be even, got {tuple(z_t.shape[2:])}")
        if C.shape[-1] != self.cfg.conditioning_dim:
            raise ValueError(f"conditioning dim {C.shape[-1]} != {self.cfg.conditioning_dim}")

        h = self.conv_in(z_t)
        skips = []
        for level, blocks in enumerate(self.down):
            if level == 1:
                h = self.downsample(h)
            for res, attn in blocks:
                h = attn(res(h, t_emb), C)
                skips.append(h)

        h = self.mid[0](h, t_emb)
        h = self.mid[1](h, C)
        h = self.mid[2](h, t_emb)

        for i, blocks in enumerate(self.up):
            if i == 1:
                h = self.upsample(F.interpolate(h, scale_factor=2, mode="nearest"))
            for res, attn in blocks:
                h = attn(res(torch.cat([h, skips.pop()], dim=1), t_emb), C)

        out = self.conv_out(F.silu(self.norm_out(h)))
        return out + self.skip_out(z_t) if self.cfg.latent_skip else out

    def smallest_feature_shape(self, latent_hw: tuple[int, int]) -> tuple[int, int]:
        h, w = latent_hw
        return (h + 1) // 2, (w + 1) // 2
