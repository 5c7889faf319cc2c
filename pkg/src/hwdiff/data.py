"""Word-image ingestion, manifests, and a synthetic multi-writer corpus.

Manifest: one record per line, tab-separated
``image_path<TAB>transcription<TAB>writer_id<TAB>partition``; an empty
transcription marks an unlabeled image. Paths are relative to the manifest.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .conditioning import WORD_RE

log = logging.getLogger(__name__)

HEIGHT, WIDTH = 64, 256
PARTITIONS = ("train", "test")


class ManifestError(ValueError):
    pass


def valid_word(text: str) -> bool:
    return bool(WORD_RE.match(text))


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    transcription: Optional[str]
    writer_id: str
    partition: str
    dataset_tag: str = ""

    @property
    def labeled(self) -> bool:
        return bool(self.transcription)


def _to_gray_float(image) -> np.ndarray:
    if isinstance(image, (str, Path)):
        try:
            with Image.open(image) as im:
                image = im.convert("L")
                image.load()
        except (OSError, ValueError) as exc:
            raise OSError(f"cannot read image {image}: {exc}") from exc
    if isinstance(image, Image.Image):
        return np.asarray(image.convert("L"), dtype=np.float64) / 255.0
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=-1)
    if arr.max(initial=0.0) > 1.0:
        arr = arr / 255.0
    return arr


def filter_and_resize(image, transcription: Optional[str] = None) -> Optional[np.ndarray]:
    """Scale to height 64 keeping aspect; pad right with white to 256 or squeeze wider images.

    Returns ``None`` when a transcription is given and fails the 2-7 letter
    filter. Output is a ``(64, 256)`` float array in ``[0, 1]``, white = 1.
    """
    if transcription and not valid_word(transcription):
        return None
    arr = _to_gray_float(image)
    if arr.size == 0:
        raise ValueError("empty image")
    return fit_to_box(arr, HEIGHT, WIDTH)


def fit_to_box(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Scale to ``height`` keeping aspect, then white-pad right or squeeze to ``width``."""
    h, w = arr.shape
    new_w = max(1, int(round(w * height / h)))
    pil = Image.fromarray(np.uint8(np.clip(arr, 0, 1) * 255 + 0.5))
    if new_w >= width:
        return np.asarray(pil.resize((width, height), Image.BILINEAR), dtype=np.float64) / 255.0
    scaled = np.asarray(pil.resize((new_w, height), Image.BILINEAR), dtype=np.float64) / 255.0
    out = np.ones((height, width))
    out[:, :new_w] = scaled
    return out


# -- synthetic writers ------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticWriterParams:
    slant_shear: float = 0.0
    stroke_width: int = 1
    letter_spacing: float = 2.0
    baseline_jitter_amplitude: float = 2.0
    glyph_seed: int = 0
    font_size: int = 44

    def __post_init__(self) -> None:
        if not -0.6 <= self.slant_shear <= 0.6:
            raise ValueError("slant_shear outside renderer-safe range [-0.6, 0.6]")
        if not 0 <= self.stroke_width <= 3:
            raise ValueError("stroke_width outside [0, 3]")
        if not -4.0 <= self.letter_spacing <= 12.0:
            raise ValueError("letter_spacing outside [-4, 12]")
        if not 0.0 <= self.baseline_jitter_amplitude <= 6.0:
            raise ValueError("baseline_jitter_amplitude outside [0, 6]")
        if not 24 <= self.font_size <= 56:
            raise ValueError("font_size outside [24, 56]")

    @classmethod
    def random(cls, rng: np.random.Generator, glyph_seed: Optional[int] = None) -> "SyntheticWriterParams":
        return cls(
            slant_shear=float(rng.uniform(-0.35, 0.45)),
            stroke_width=int(rng.integers(0, 3)),
            letter_spacing=float(rng.uniform(-2.0, 8.0)),
            baseline_jitter_amplitude=float(rng.uniform(0.0, 4.0)),
            glyph_seed=int(rng.integers(0, 2**31 - 1)) if glyph_seed is None else glyph_seed,
            font_size=int(rng.integers(36, 52)),
        )


_FONTS: dict[int, ImageFont.FreeTypeFont] = {}


def _font(size: int) -> ImageFont.FreeTypeFont:
    if size not in _FONTS:
        _FONTS[size] = ImageFont.load_default(size=size)
    return _FONTS[size]


def _glyph(ch: str, params: SyntheticWriterParams) -> Image.Image:
    """One character, distorted the same way every time for this writer."""
    seed = int.from_bytes(hashlib.sha256(f"{params.glyph_seed}:{ch}".encode()).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    font = _font(params.font_size)
    pad = params.font_size
    canvas = Image.new("L", (2 * pad, 2 * pad), 0)
    ImageDraw.Draw(canvas).text((pad // 2, pad // 4), ch, font=font, fill=255, stroke_width=params.stroke_width, stroke_fill=255)
    sx, sy = rng.uniform(0.85, 1.15), rng.uniform(0.9, 1.1)
    rot = rng.uniform(-0.12, 0.12)
    c, s = math.cos(rot), math.sin(rot)
    cx, cy = canvas.width / 2, canvas.height / 2
    a, b, d, e = c / sx, s / sx, -s / sy, c / sy
    coeffs = (a, b, cx - a * cx - b * cy, d, e, cy - d * cx - e * cy)
    return canvas.transform(canvas.size, Image.AFFINE, coeffs, resample=Image.BILINEAR)


def render_synthetic(params: SyntheticWriterParams, text: str) -> np.ndarray:
    """Deterministic ``(64, 256)`` grayscale rendering of ``text`` in this writer's hand."""
    if not valid_word(text):
        raise ValueError(f"text {text!r} does not pass the 2-7 letter filter")
    size = params.font_size
    canvas = Image.new("L", (len(text) * 2 * size + 64, 3 * size), 0)
    seed = int.from_bytes(hashlib.sha256(f"{params.glyph_seed}|{text}".encode()).digest()[:8], "little")
    jitter = np.random.default_rng(seed).uniform(-1, 1, len(text)) * params.baseline_jitter_amplitude
    x = 16.0
    for i, ch in enumerate(text):
        g = _glyph(ch, params)
        bbox = g.getbbox()
        if bbox is None:
            continue
        g = g.crop((bbox[0], 0, bbox[2], g.height))
        canvas.paste(255, (int(round(x)), int(round(size // 2 + jitter[i]))), mask=g)
        x += g.width + params.letter_spacing
    # shear about the vertical centre: positive slant leans right
    k = params.slant_shear
    cy = canvas.height / 2
    canvas = canvas.transform(canvas.size, Image.AFFINE, (1, k, -k * cy, 0, 1, 0), resample=Image.BILINEAR)
    bbox = canvas.getbbox()
    if bbox is not None:
        m = 3
        canvas = canvas.crop((max(0, bbox[0] - m), max(0, bbox[1] - m), bbox[2] + m, bbox[3] + m))
    ink = np.asarray(canvas, dtype=np.float64) / 255.0
    return filter_and_resize(1.0 - ink)


# -- corpora and manifests --------------------------------------------------------


@dataclass
class Corpus:
    records: list[SampleRecord]
    writers: dict[str, SyntheticWriterParams]
    train_lexicon: list[str]
    oov_words: list[str]
    words: dict[str, str]  # image_path -> rendered word (kept even for unlabeled records)


def make_synthetic_corpus(
    num_writers: int,
    lexicon: Sequence[str],
    samples_per_writer: int,
    seed: int = 0,
    test_writers: int = 2,
    oov_fraction: float = 0.1,
    labeled: bool = True,
    writer_prefix: str = "w",
    dataset_tag: str = "synth",
) -> Corpus:
    """Writers split into disjoint train/test sets; a slice of the lexicon is test-only (OOV).

    ``round(oov_fraction * |lexicon|)`` words never appear in train, and each
    test sample is drawn from them with probability ``oov_fraction``.
    """
    lexicon = list(dict.fromkeys(lexicon))
    bad = [w for w in lexicon if not valid_word(w)]
    if bad:
        raise ValueError(f"lexicon words fail the filter: {bad[:5]}")
    if not 0 <= test_writers < num_writers:
        raise ValueError("need 0 <= test_writers < num_writers")
    rng = np.random.default_rng(seed)
    n_oov = int(round(oov_fraction * len(lexicon)))
    if oov_fraction > 0 and (n_oov < 1 or n_oov >= len(lexicon)):
        raise ValueError(f"lexicon of {len(lexicon)} words is too small for an OOV split of {oov_fraction}")
    perm = [lexicon[i] for i in rng.permutation(len(lexicon))]
    oov, iv = sorted(perm[:n_oov]), sorted(perm[n_oov:])

    writers = {f"{writer_prefix}{i:03d}": SyntheticWriterParams.random(rng) for i in range(num_writers)}
    ids = list(writers)
    test_ids = set(ids[len(ids) - test_writers :])
    records, words = [], {}
    for wid in ids:
        part = "test" if wid in test_ids else "train"
        for j in range(samples_per_writer):
            if part == "test" and oov and rng.random() < oov_fraction:
                word = oov[int(rng.integers(len(oov)))]
            else:
                word = iv[int(rng.integers(len(iv)))]
            path = f"images/{wid}_{j:04d}_{word}.png" if labeled else f"images/{wid}_{j:04d}.png"
            records.append(SampleRecord(path, word if labeled else "", wid, part, dataset_tag))
            words[path] = word
    return Corpus(records, writers, iv, oov, words)


def render_corpus(corpus: Corpus, root: str | Path) -> None:
    """Render every record's image to ``root / image_path`` as 8-bit grayscale PNG."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for rec in corpus.records:
        img = render_synthetic(corpus.writers[rec.writer_id], corpus.words[rec.image_path])
        save_image(root / rec.image_path, img)


def save_image(path: str | Path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.uint8(np.clip(image, 0, 1) * 255 + 0.5), mode="L").save(path, optimize=False)


def load_image(path: str | Path) -> np.ndarray:
    return _to_gray_float(path)


def write_manifest(path: str | Path, records: Iterable[SampleRecord]) -> None:
    with open(path, "w", newline="\n") as fh:
        for r in records:
            fh.write(f"{r.image_path}\t{r.transcription or ''}\t{r.writer_id}\t{r.partition}\n")


@dataclass
class ManifestStats:
    samples: int
    writers: int
    lexicon: int
    unlabeled: int
    oov_fraction: Optional[float]


@dataclass
class LoadedManifest:
    records: list[SampleRecord]
    skipped: int
    root: Path

    def stats(self, reference_lexicon: Optional[Iterable[str]] = None) -> ManifestStats:
        return manifest_stats(self.records, reference_lexicon)

    def path(self, rec: SampleRecord) -> Path:
        return self.root / rec.image_path


def load_manifest(path: str | Path, dataset_tag: Optional[str] = None) -> LoadedManifest:
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        raise ManifestError(f"{path}: manifest is empty")
    tag = dataset_tag if dataset_tag is not None else path.stem
    records, skipped = [], 0
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}")
        img, trans, wid, part = fields
        if part not in PARTITIONS:
            raise ManifestError(f"{path}:{lineno}: partition must be train or test, got {part!r}")
        if not img or not wid:
            raise ManifestError(f"{path}:{lineno}: empty image path or writer id")
        if trans and not valid_word(trans):
            log.warning("%s:%d: transcription %r fails the word filter; skipped", path, lineno, trans)
            skipped += 1
            continue
        records.append(SampleRecord(img, trans or None, wid, part, tag))
    if not records:
        raise ManifestError(f"{path}: no valid records")
    return LoadedManifest(records, skipped, path.parent)


def manifest_stats(records: Sequence[SampleRecord], reference_lexicon: Optional[Iterable[str]] = None) -> ManifestStats:
    labeled = [r for r in records if r.labeled]
    oov = None
    if reference_lexicon is not None and labeled:
        ref = set(reference_lexicon)
        oov = sum(r.transcription not in ref for r in labeled) / len(labeled)
    return ManifestStats(
        samples=len(records),
        writers=len({r.writer_id for r in records}),
        lexicon=len({r.transcription for r in labeled}),
        unlabeled=len(records) - len(labeled),
        oov_fraction=oov,
    )


def stats_table(rows: Sequence[tuple[str, str, ManifestStats]]) -> str:
    """Plain-text table: dataset, partition, samples, writers, lexicon, OOV %."""
    w = max([len("Dataset")] + [len(r[0]) for r in rows]) + 2
    head = f"{'Dataset':<{w}}{'Partition':<10}{'#Samples':>10}{'#Writers':>10}{'#Lexicon':>10}{'OOV [%]':>10}"
    lines = [head, "-" * len(head)]
    for name, part, s in rows:
        oov = "--" if s.oov_fraction is None else f"{100 * s.oov_fraction:.2f}"
        lines.append(f"{name:<{w}}{part:<10}{s.samples:>10}{s.writers:>10}{s.lexicon:>10}{oov:>10}")
    return "\n".join(lines) + "\n"


def check_disjoint_writers(records: Sequence[SampleRecord]) -> bool:
    train = {r.writer_id for r in records if r.partition == "train"}
    test = {r.writer_id for r in records if r.partition == "test"}
    return not (train & test)


def writers_to_json(writers: dict[str, SyntheticWriterParams]) -> dict:
    return {wid: asdict(p) for wid, p in sorted(writers.items())}


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


DEFAULT_LEXICON = (
    "the and that with this from have were which they been their there would about "
    "other into more some could time only these than then first also after over back "
    "where must many most before such through made much great well even people being "
    "still under never while might again place little world thought found every same "
    "along while seemed nothing almost often always known three small large light night "
    "house water right point order began given power young early whole means going hand"
).split()
