"""Content encoder: character sequence + writer style -> conditioning ``C`` and ``t_emb``.

``C`` is kept in sequence-major layout ``(..., L, d_c)``: row ``i`` is the
content vector ``c_i``. ``ContentConditioning.matrix`` gives the ``d_c x L``
view for a single item.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

STYLE_MODES = ("tp", "tpl", "cp", "ta", "ca", "ts")
WORD_RE = re.compile(r"^[a-zA-Z]{2,7}$")


@dataclass(frozen=True)
class Vocabulary:
    characters: str = string.ascii_letters
    pad_id: int = 0

    @property
    def size(self) -> int:
        return len(self.characters) + 1

    def index(self, ch: str) -> int:
        i = self.characters.find(ch)
        if i < 0 or len(ch) != 1:
            raise ValueError(f"character {ch!r} is not in the vocabulary")
        return i + 1

    def char(self, idx: int) -> str:
        if idx == self.pad_id:
            raise ValueError("pad index has no character")
        return self.characters[idx - 1]


VOCAB = Vocabulary()


def tokenize(text: str, l: int = 7, vocab: Vocabulary = VOCAB) -> list[int]:
    if not 1 <= len(text) <= l:
        raise ValueError(f"text length must be in 1..{l}, got {len(text)} ({text!r})")
    ids = [vocab.index(ch) for ch in text]
    return ids + [vocab.pad_id] * (l - len(ids))


def sinusoidal_pe(pos, dim: int) -> torch.Tensor:
    """Sinusoidal encoding; ``pos`` may be an int or a 1-d tensor of positions."""
    if dim % 2:
        raise ValueError(f"dim must be even, got {dim}")
    scalar = not isinstance(pos, torch.Tensor)
    p = torch.as_tensor(pos, dtype=torch.float64).reshape(-1, 1)
    i = torch.arange(dim // 2, dtype=torch.float64)
    angle = p / torch.pow(10000.0, 2 * i / dim)
    pe = torch.empty(p.shape[0], dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle)
    return pe[0] if scalar else pe


@dataclass
class ContentConditioning:
    C: torch.Tensor
    t_emb: torch.Tensor
    mode: str
    null_text: torch.Tensor | bool = False
    null_style: torch.Tensor | bool = False

    @property
    def matrix(self) -> torch.Tensor:
        return self.C.transpose(-1, -2)


@dataclass
class WriterEmbedding:
    vector: np.ndarray
    writer_id: str
    source_image_ids: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.vector)):
            raise ValueError(f"writer embedding for {self.writer_id!r} is not finite")


@dataclass(frozen=True)
class EncoderConfig:
    mode: str = "ts"
    style_dim: int = 768
    char_dim: int = 256
    time_dim: int = 256
    max_len: int = 7
    heads: int = 4

    def __post_init__(self) -> None:
        if self.mode not in STYLE_MODES:
            raise ValueError(f"style_inclusion must be one of {STYLE_MODES}, got {self.mode!r}")

    @property
    def cond_dim(self) -> int:
        return 2 * self.char_dim if self.mode in ("cp", "ca") else self.char_dim

    @property
    def seq_len(self) -> int:
        return self.max_len + 1 if self.mode in ("tp", "tpl", "ta") else self.max_len

    @property
    def style_target_dim(self) -> int:
        return self.time_dim if self.mode == "ts" else self.char_dim


class ContentEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, vocab: Vocabulary = VOCAB):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        d_e, d_t = cfg.char_dim, cfg.time_dim
        self.char_embed = nn.Embedding(vocab.size, d_e)
        self.text_mask = nn.Parameter(torch.randn(d_e) * 0.02)
        self.style_proj = nn.Linear(cfg.style_dim, cfg.style_target_dim, bias=False)
        self.null_style = nn.Parameter(torch.randn(cfg.style_target_dim) * 0.02)
        if cfg.mode == "tpl":
            self.style_pos = nn.Parameter(torch.randn(d_e) * 0.02)
        attn_dim = 2 * d_e if cfg.mode == "cp" else d_e
        self.attn = nn.MultiheadAttention(attn_dim, cfg.heads, batch_first=True)
        self.time_mlp = nn.Sequential(nn.Linear(d_t, d_t), nn.SiLU(), nn.Linear(d_t, d_t))
        self.register_buffer("char_pe", sinusoidal_pe(torch.arange(1, cfg.max_len + 1), d_e).float(), persistent=False)

    def project_style(self, style: torch.Tensor, drop_style: torch.Tensor) -> torch.Tensor:
        if style.shape[-1] != self.cfg.style_dim:
            raise ValueError(f"style dim {style.shape[-1]} != configured {self.cfg.style_dim}")
        s_hat = self.style_proj(style)
        return torch.where(drop_style[:, None], self.null_style.expand_as(s_hat), s_hat)

    def context(self, tokens: torch.Tensor, s_hat: torch.Tensor, drop_text: torch.Tensor) -> torch.Tensor:
        mode = self.cfg.mode
        emb = self.char_embed(tokens)
        emb = torch.where(drop_text[:, None, None], self.text_mask.expand_as(emb), emb)
        y = emb + self.char_pe.to(emb.dtype)
        if mode in ("tp", "tpl"):
            tok = s_hat + self.style_pos if mode == "tpl" else s_hat
            y = torch.cat([y, tok[:, None, :]], dim=1)
        elif mode == "cp":
            y = torch.cat([y, s_hat[:, None, :].expand(-1, y.shape[1], -1)], dim=-1)
        c = y + self.attn(y, y, y, need_weights=False)[0]
        if mode == "ta":
            c = torch.cat([c, s_hat[:, None, :]], dim=1)
        elif mode == "ca":
            c = torch.cat([c, s_hat[:, None, :].expand(-1, c.shape[1], -1)], dim=-1)
        return c

    def time_embedding(self, t: torch.Tensor, s_hat: Optional[torch.Tensor] = None) -> torch.Tensor:
        pe = sinusoidal_pe(t.reshape(-1), self.cfg.time_dim).to(self.text_mask.dtype)
        t_emb = self.time_mlp(pe)
        if self.cfg.mode == "ts":
            t_emb = t_emb + s_hat
        return t_emb

    def forward(
        self,
        tokens: torch.Tensor,
        style: torch.Tensor,
        t: torch.Tensor,
        drop_text: Optional[torch.Tensor] = None,
        drop_style: Optional[torch.Tensor] = None,
    ) -> ContentConditioning:
        B = tokens.shape[0]
        if drop_text is None:
            drop_text = torch.zeros(B, dtype=torch.bool)
        if drop_style is None:
            drop_style = torch.zeros(B, dtype=torch.bool)
        s_hat = self.project_style(style, drop_style)
        C = self.context(tokens, s_hat, drop_text)
        t_emb = self.time_embedding(t, s_hat)
        return ContentConditioning(C, t_emb, self.cfg.mode, drop_text, drop_style)

    # -- single-item conveniences -------------------------------------------------

    def _style_tensor(self, style) -> torch.Tensor:
        if style is None:
            return torch.zeros(1, self.cfg.style_dim, dtype=self.text_mask.dtype)
        vec = style.vector if isinstance(style, WriterEmbedding) else style
        return torch.as_tensor(np.asarray(vec), dtype=self.text_mask.dtype).reshape(1, -1)

    def _tokens(self, text: Optional[str]) -> torch.Tensor:
        if text is None:
            return torch.full((1, self.cfg.max_len), self.vocab.pad_id, dtype=torch.long)
        return torch.tensor([tokenize(text, self.cfg.max_len, self.vocab)], dtype=torch.long)

    def encode(self, text: str, style, t: int, drop_text: bool = False, drop_style: bool = False) -> ContentConditioning:
        out = self(
            self._tokens(text),
            self._style_tensor(style),
            torch.tensor([int(t)]),
            torch.tensor([drop_text]),
            torch.tensor([drop_style]),
        )
        return ContentConditioning(out.C[0], out.t_emb[0], out.mode, drop_text, drop_style)

    def null_conditioning(
        self,
        t: int,
        drop_text: bool,
        drop_style: bool,
        text: Optional[str] = None,
        style=None,
    ) -> ContentConditioning:
        if not (drop_text or drop_style):
            raise ValueError("null conditioning needs drop_text or drop_style")
        if not drop_text and text is None:
            raise ValueError("text is required when it is not dropped")
        if not drop_style and style is None:
            raise ValueError("style is required when it is not dropped")
        return self.encode(None if drop_text else text, None if drop_style else style, t, drop_text, drop_style)


def encode_texts(texts: Sequence[Optional[str]], l: int = 7, vocab: Vocabulary = VOCAB) -> torch.Tensor:
    """Token ids for a batch; ``None`` (unlabeled) becomes an all-pad row."""
    rows = [tokenize(t, l, vocab) if t else [vocab.pad_id] * l for t in texts]
    return torch.tensor(rows, dtype=torch.long)

