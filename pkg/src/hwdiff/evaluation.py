"""Recognition-based metrics: CER, a small CTC recognizer, the CER-train
protocol and Diff-IV."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import STYLE_MODES, VOCAB, Vocabulary
from .data import fit_to_box

log = logging.getLogger(__name__)

INK_THRESHOLD = 0.75
INK_MARGIN = 4


# -- character error rate ---------------------------------------------------------


@dataclass(frozen=True)
class CerReport:
    cer: float
    substitutions: int
    insertions: int
    deletions: int
    num_references: int
    reference_chars: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def percent(self) -> float:
        return 100.0 * self.cer


def edit_ops(ref: str, hyp: str) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of one minimal Levenshtein alignment."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]))
    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), ins, dels


def cer(references: Sequence[str], hypotheses: Sequence[str]) -> CerReport:
    if len(references) != len(hypotheses):
        raise ValueError(f"{len(references)} references vs {len(hypotheses)} hypotheses")
    if not references:
        raise ValueError("no references")
    S = I = D = total = 0
    for k, (r, h) in enumerate(zip(references, hypotheses)):
        if not r:
            raise ValueError(f"empty reference at index {k}")
        s, i, d = edit_ops(r, h)
        S, I, D, total = S + s, I + i, D + d, total + len(r)
    return CerReport((S + I + D) / total, S, I, D, len(references), total)


# -- CTC decoding -----------------------------------------------------------------


def blank_id(vocab: Vocabulary = VOCAB) -> int:
    return vocab.size


def ctc_greedy_decode(logits, vocab: Vocabulary = VOCAB) -> str:
    """Per-frame argmax, collapse repeats, drop blanks (and pad)."""
    path = np.asarray(torch.as_tensor(logits).argmax(-1)).reshape(-1)
    blank = blank_id(vocab)
    out = []
    prev = None
    for k in path:
        k = int(k)
        if k != prev and k != blank and k != vocab.pad_id:
            out.append(vocab.char(k))
        prev = k
    return "".join(out)


# -- cropping ---------------------------------------------------------------------


def ink_box(image: np.ndarray, threshold: float = INK_THRESHOLD, margin: int = INK_MARGIN) -> tuple[int, int, int, int]:
    """``(top, bottom, left, right)`` half-open bounds; the full frame when there is no ink."""
    img = np.asarray(image)
    H, W = img.shape[:2]
    ink = img < threshold
    if ink.ndim == 3:
        ink = ink.any(-1)
    rows, cols = np.nonzero(ink.any(1))[0], np.nonzero(ink.any(0))[0]
    if rows.size == 0:
        return 0, H, 0, W
    return (max(0, rows[0] - margin), min(H, rows[-1] + margin + 1),
            max(0, cols[0] - margin), min(W, cols[-1] + margin + 1))


def crop_to_ink(image: np.ndarray, threshold: float = INK_THRESHOLD, margin: int = INK_MARGIN) -> np.ndarray:
    t, b, l, r = ink_box(image, threshold, margin)
    return np.asarray(image)[t:b, l:r]


# -- recognizer -------------------------------------------------------------------


@dataclass(frozen=True)
class HtrConfig:
    height: int = 32
    width: int = 128
    channels: tuple = (32, 64, 96)
    hidden: int = 128
    epochs: int = 240
    batch_size: int = 32
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 5e-5
    decay_at: tuple = (0.5, 0.75)  # fractions of training; lr divided by 10 at each
    augment: float = 0.0  # strength of random shear/scale/shift during training
    seed: int = 0


class HtrModel(nn.Module):
    """Convolutional features collapsed over height, then a BiLSTM and a CTC head."""

    def __init__(self, cfg: HtrConfig = HtrConfig(), vocab: Vocabulary = VOCAB):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        c1, c2, c3 = cfg.channels
        self.features = nn.Sequential(
            nn.Conv2d(1, c1, 3, padding=1), nn.BatchNorm2d(c1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(c1, c2, 3, padding=1), nn.BatchNorm2d(c2), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(c2, c3, 3, padding=1), nn.BatchNorm2d(c3), nn.ReLU(), nn.MaxPool2d((2, 1)),
        )
        feat_h = cfg.height // 8
        self.rnn = nn.LSTM(c3 * feat_h, cfg.hidden, batch_first=True, bidirectional=True)
        self.head = nn.Linear(2 * cfg.hidden, vocab.size + 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, H, W)`` ink-dark images -> ``(B, frames, classes)`` log-probabilities."""
        f = self.features(x[:, None])
        B, C, h, w = f.shape
        seq = f.permute(0, 3, 1, 2).reshape(B, w, C * h)
        out, _ = self.rnn(seq)
        return F.log_softmax(self.head(out), dim=-1)

    def prepare(self, images: Sequence[np.ndarray]) -> torch.Tensor:
        """Crop to ink, fit into the input box and invert so ink is positive."""
        boxes = [fit_to_box(crop_to_ink(np.asarray(im, dtype=np.float64)), self.cfg.height, self.cfg.width) for im in images]
        return torch.from_numpy(1.0 - np.stack(boxes)).float()

    @torch.no_grad()
    def recognize(self, images: Sequence[np.ndarray], batch_size: int = 128) -> list[str]:
        self.eval()
        out = []
        for i in range(0, len(images), batch_size):
            logp = self(self.prepare(images[i : i + batch_size]))
            out.extend(ctc_greedy_decode(row, self.vocab) for row in logp)
        return out


def _targets(texts: Sequence[str], vocab: Vocabulary) -> tuple[torch.Tensor, torch.Tensor]:
    ids = [vocab.index(c) for t in texts for c in t]
    return torch.tensor(ids, dtype=torch.long), torch.tensor([len(t) for t in texts], dtype=torch.long)


def random_affine(x: torch.Tensor, strength: float, gen: torch.Generator) -> torch.Tensor:
    """Random shear, scale and shift of an ink-positive batch ``(B, H, W)``."""
    B = x.shape[0]
    u = (torch.rand(B, 4, generator=gen) * 2 - 1) * strength
    scale = 1.0 + 0.5 * u[:, 0]
    theta = torch.zeros(B, 2, 3)
    theta[:, 0, 0] = scale
    theta[:, 0, 1] = u[:, 1]
    theta[:, 1, 1] = scale
    theta[:, 0, 2] = 0.5 * u[:, 2]
    theta[:, 1, 2] = 0.5 * u[:, 3]
    grid = F.affine_grid(theta, (B, 1, *x.shape[1:]), align_corners=False)
    return F.grid_sample(x[:, None], grid, align_corners=False, padding_mode="zeros")[:, 0]


def train_htr(
    images: Sequence[np.ndarray],
    texts: Sequence[str],
    cfg: HtrConfig = HtrConfig(),
    vocab: Vocabulary = VOCAB,
) -> HtrModel:
    """AdamW with step decay (lr / 10 at the configured fractions of training)."""
    if len(images) != len(texts) or not images:
        raise ValueError("need equally many images and transcriptions")
    torch.manual_seed(cfg.seed)
    model = HtrModel(cfg, vocab)
    x_all = model.prepare(images)
    n = len(texts)
    per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * per_epoch
    milestones = [int(round(f * total)) for f in cfg.decay_at]
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    lr_sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones, gamma=0.1)
    ctc = nn.CTCLoss(blank=blank_id(vocab), zero_infinity=True)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model.train()
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x = x_all[idx]
            if cfg.augment > 0:
                x = random_affine(x, cfg.augment, gen)
            logp = model(x)
            tgt, tgt_len = _targets([texts[i] for i in idx], vocab)
            in_len = torch.full((len(idx),), logp.shape[1], dtype=torch.long)
            loss = ctc(logp.transpose(0, 1), tgt, in_len, tgt_len)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), 5.0)
            opt.step()
            lr_sched.step()
    return model.eval()


# -- protocols --------------------------------------------------------------------


class ProtocolAborted(RuntimeError):
    pass


Generator = Callable[[str, str, int], np.ndarray]
Trainer = Callable[[Sequence[np.ndarray], Sequence[str]], HtrModel]


@dataclass
class ProtocolResult:
    report: CerReport
    failures: int
    generated: int


def generate_replicas(
    generator: Generator,
    pairs: Sequence[tuple[str, str]],
    max_failure_rate: float = 0.01,
) -> tuple[list[np.ndarray], list[str], int]:
    """One image per ``(text, writer)`` pair; aborts if more than 1% fail."""
    if not pairs:
        raise ValueError("no conditioning pairs to generate")
    images, texts, failures = [], [], 0
    for k, (text, writer) in enumerate(pairs):
        try:
            img = np.asarray(generator(text, writer, k), dtype=np.float64)
            if not np.all(np.isfinite(img)):
                raise FloatingPointError("non-finite pixels")
        except Exception as exc:  # noqa: BLE001 - any generator failure counts
            failures += 1
            log.warning("generation failed for %r / %s: %s", text, writer, exc)
            if failures > max_failure_rate * len(pairs):
                raise ProtocolAborted(f"{failures} of {len(pairs)} generations failed") from exc
            continue
        images.append(img)
        texts.append(text)
    return images, texts, failures


def cer_train_protocol(
    generator: Generator,
    train_pairs: Sequence[tuple[str, str]],
    trainer: Trainer,
    test_images: Sequence[np.ndarray],
    test_texts: Sequence[str],
) -> ProtocolResult:
    """Train the recognizer on generated replicas of the train set, score on real test data."""
    images, texts, failures = generate_replicas(generator, train_pairs)
    model = trainer(images, texts)
    report = cer(list(test_texts), model.recognize(list(test_images)))
    return ProtocolResult(report, failures, len(images))


def in_vocabulary(texts: Iterable[str], train_lexicon: Iterable[str]) -> list[bool]:
    lex = set(train_lexicon)
    return [t in lex for t in texts]


def diff_iv_points(generated_cer: float, real_cer: float) -> float:
    """Generated minus real CER, both fractions, in percentage points."""
    return 100.0 * (generated_cer - real_cer)


def diff_iv(
    model: HtrModel,
    generated_images: Sequence[np.ndarray],
    generated_texts: Sequence[str],
    real_images: Sequence[np.ndarray],
    real_texts: Sequence[str],
) -> float:
    """Signed difference in percentage points; negative means easier than real."""
    if not generated_images or not real_images:
        raise ValueError("empty IV subset")
    g = cer(list(generated_texts), model.recognize(list(generated_images)))
    r = cer(list(real_texts), model.recognize(list(real_images)))
    return diff_iv_points(g.cer, r.cer)


# -- reports ----------------------------------------------------------------------


def metric_table(values: dict[tuple[float, str], float], title: str = "") -> str:
    """Rows are guidance scales, columns style-inclusion modes; values in percent."""
    scales = sorted({k[0] for k in values})
    order = {m: i for i, m in enumerate(STYLE_MODES)}
    modes = sorted({k[1] for k in values}, key=lambda m: (order.get(m, len(order)), m))
    head = f"{'w_gs':>6} | " + " | ".join(f"{m.upper():>7}" for m in modes)
    lines = [title] if title else []
    lines += [head, "-" * len(head)]
    for w in scales:
        cells = []
        for m in modes:
            v = values.get((w, m))
            cells.append(f"{v:7.2f}" if v is not None and math.isfinite(v) else f"{'-':>7}")
        lines.append(f"{w:>6g} | " + " | ".join(cells))
    return "\n".join(lines) + "\n"


def report_record(**fields) -> str:
    clean = {k: (asdict(v) if hasattr(v, "__dataclass_fields__") else v) for k, v in fields.items()}
    return json.dumps(clean, sort_keys=True)
