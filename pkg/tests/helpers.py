"""Tiny models and data shared by several test modules."""

import numpy as np
import torch

from hwdiff.conditioning import EncoderConfig
from hwdiff.training import BatchItem, DiffusionModel
from hwdiff.unet import UNetConfig

LATENT = (4, 4, 8)


def tiny_model(mode="ts", seed=0, dtype=torch.float32, base=8, style_dim=6):
    enc = EncoderConfig(mode, style_dim=style_dim, char_dim=8, time_dim=8, max_len=7, heads=2)
    unet = UNetConfig(latent_channels=LATENT[0], base_channels=base, num_res_blocks=1, attention_heads=2,
                      cross_attention_dim=4, conditioning_dim=enc.cond_dim, time_dim=8, norm_groups=4)
    torch.manual_seed(seed)
    return DiffusionModel(enc, unet).to(dtype)


def items(n, seed=0, labeled=True, writers=2, style_dim=6, words=("ab", "cat", "hello", "zebra")):
    g = np.random.default_rng(seed)
    out = []
    for i in range(n):
        wid = f"w{i % writers}"
        text = words[i % len(words)] if labeled else None
        out.append(BatchItem(g.standard_normal(LATENT), text, wid, g.standard_normal((3, style_dim))))
    return out


VERDICTS: list[str] = []


def verdict(criterion, ok: bool, detail: str) -> None:
    """Record and print one PASS/FAIL line, then fail the test if needed."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line
