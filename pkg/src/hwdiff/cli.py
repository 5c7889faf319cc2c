"""Command-line entry point.

All artifacts live under one work directory::

    data/        synthetic corpus, manifests, statistics
    mae/         style encoder parameters and loss log
    embeddings/  resampled writer embeddings
    dm/          diffusion parameters (raw + EMA), codec, training log
    samples/     generated images and gallery page
    eval/        metric reports

Each subdirectory records the resolved config, the seed and content hashes
of the manifests it consumed.
"""

from __future__ import annotations

import argparse
import html
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import checkpoint
from .codec import PatchCodec, SmallAutoencoder, train_small_autoencoder
from .config import ConfigError, RunConfig, load_config
from .conditioning import tokenize
from .data import (
    DEFAULT_LEXICON,
    LoadedManifest,
    check_disjoint_writers,
    file_sha256,
    filter_and_resize,
    load_image,
    load_manifest,
    make_synthetic_corpus,
    manifest_stats,
    render_corpus,
    save_image,
    stats_table,
    write_manifest,
    writers_to_json,
)
from .evaluation import (
    ProtocolAborted,
    cer,
    cer_train_protocol,
    crop_to_ink,
    diff_iv,
    generate_replicas,
    in_vocabulary,
    metric_table,
    report_record,
    train_htr,
)
from .mae import (
    MaskedAutoencoder,
    init_mae_state,
    read_embedding_store,
    resample_writer_embeddings,
    train_mae,
    write_embedding_store,
    writer_embedding,
)
from .pipeline import DiffusionGenerator, batched_generate, noise_image, to_model_latent
from .training import BatchItem, DiffusionModel, init_train_state, train_diffusion, unlabeled_fraction

log = logging.getLogger("hwdiff")


class CommandError(RuntimeError):
    pass


# -- run directory bookkeeping ----------------------------------------------------


def prepare_run_dir(path: Path, cfg: RunConfig, inputs: Sequence[Path] = ()) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.yaml").write_text(cfg.to_yaml())
    (path / "seed.txt").write_text(f"{cfg.seed}\n")
    hashes = {str(p.name): file_sha256(p) for p in inputs}
    (path / "inputs.json").write_text(json.dumps(hashes, indent=1, sort_keys=True) + "\n")
    return path


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CommandError(f"missing {what}: {path}")
    return path


def _data_dir(workdir: Path) -> Path:
    return _require(workdir / "data", "dataset (run synth-data first)")


def _manifest(workdir: Path, name: str) -> LoadedManifest:
    return load_manifest(_require(_data_dir(workdir) / f"{name}.tsv", f"{name} manifest"))


def _images(m: LoadedManifest, records=None) -> np.ndarray:
    recs = m.records if records is None else records
    return np.stack([load_image(m.path(r)) for r in recs])


def _lexicon(workdir: Path) -> list[str]:
    return _require(_data_dir(workdir) / "train_lexicon.txt", "train lexicon").read_text().split()


# -- synth-data -------------------------------------------------------------------


def cmd_synth_data(cfg: RunConfig, workdir: Path) -> Path:
    d = cfg.dataset
    if d.lexicon_size > len(DEFAULT_LEXICON):
        raise CommandError(f"lexicon_size {d.lexicon_size} exceeds the built-in lexicon ({len(DEFAULT_LEXICON)})")
    lexicon = DEFAULT_LEXICON[: d.lexicon_size]
    out = prepare_run_dir(workdir / "data", cfg)
    corpus = make_synthetic_corpus(d.num_writers, lexicon, d.samples_per_writer, cfg.seed, d.test_writers, d.oov_fraction)
    render_corpus(corpus, out)
    train = [r for r in corpus.records if r.partition == "train"]
    test = [r for r in corpus.records if r.partition == "test"]
    write_manifest(out / "train.tsv", train)
    write_manifest(out / "test.tsv", test)
    (out / "train_lexicon.txt").write_text("\n".join(corpus.train_lexicon) + "\n")
    (out / "oov_words.txt").write_text("\n".join(corpus.oov_words) + "\n")
    writers = writers_to_json(corpus.writers)
    rows = [("synthetic", "train", manifest_stats(train, corpus.train_lexicon)),
            ("synthetic", "test", manifest_stats(test, corpus.train_lexicon))]
    if d.unlabeled_writers > 0:
        extra = make_synthetic_corpus(d.unlabeled_writers, lexicon, d.unlabeled_samples_per_writer, cfg.seed + 1,
                                      test_writers=0, oov_fraction=0.0, labeled=False, writer_prefix="u",
                                      dataset_tag="synthetic-unlabeled")
        render_corpus(extra, out)
        write_manifest(out / "unlabeled.tsv", extra.records)
        writers.update(writers_to_json(extra.writers))
        rows.append(("synthetic-unlabeled", "train", manifest_stats(extra.records)))
    (out / "writers.json").write_text(json.dumps(writers, indent=1, sort_keys=True) + "\n")
    if not check_disjoint_writers(corpus.records):
        raise CommandError("train and test writers overlap")
    table = stats_table(rows)
    (out / "stats.txt").write_text(table)
    print(table, end="")
    return out


# -- train-mae --------------------------------------------------------------------


def _mae_model(cfg: RunConfig) -> MaskedAutoencoder:
    torch.manual_seed(cfg.seed)
    return MaskedAutoencoder(cfg.mae_config())


def _save_mae(path: Path, state, cfg: RunConfig) -> None:
    checkpoint.save_params(path / "mae", state.model.state_dict(), {"mae": cfg.to_dict()["mae"], "step": state.step})
    save_optimizer(path / "mae_optim", state.optimizer, state.step)


def cmd_train_mae(cfg: RunConfig, workdir: Path, resume: bool = False, until_step: Optional[int] = None) -> Path:
    train = _manifest(workdir, "train")
    if not train.records:
        raise CommandError("training manifest is empty")
    out = prepare_run_dir(workdir / "mae", cfg, [train.root / "train.tsv"])
    images = _images(train).astype(np.float32)
    state = init_mae_state(_mae_model(cfg), cfg.mae_train_config())
    if resume:
        state.model.load_state_dict(checkpoint.load_params(_require(out / "mae.bin", "MAE checkpoint")))
        state.step = load_optimizer(out / "mae_optim", state.optimizer)
    with open(out / "log.ndjson", "a" if resume else "w") as fh:
        losses = train_mae(state, images, cfg.mae_train_config(), fh, until_step)
    _save_mae(out, state, cfg)
    if losses:
        print(f"mae: {state.step} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return out


def load_mae(workdir: Path, cfg: RunConfig) -> MaskedAutoencoder:
    model = MaskedAutoencoder(cfg.mae_config())
    model.load_state_dict(checkpoint.load_params(_require(workdir / "mae" / "mae.bin", "MAE checkpoint")))
    return model.eval()


# -- optimizer state as flat tensors ------------------------------------------------


def save_optimizer(path: Path, opt: torch.optim.Optimizer, step: int) -> None:
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            tensors[f"{idx}.{key}"] = torch.as_tensor(val)
    checkpoint.save_params(path, tensors, {"param_groups": sd["param_groups"], "step": step})


def load_optimizer(path: Path, opt: torch.optim.Optimizer) -> int:
    meta = checkpoint.load_manifest(_require(path.with_suffix(".json"), "optimizer state"))["config"]
    state: dict = {}
    for name, t in checkpoint.load_params(path).items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = t
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
    return int(meta["step"])


# -- embed-writers ----------------------------------------------------------------


def cmd_embed_writers(cfg: RunConfig, workdir: Path) -> Path:
    model = load_mae(workdir, cfg)
    names = ["train", "test"] + (["unlabeled"] if (_data_dir(workdir) / "unlabeled.tsv").exists() else [])
    manifests = [_manifest(workdir, n) for n in names]
    out = prepare_run_dir(workdir / "embeddings", cfg, [m.root / f"{n}.tsv" for n, m in zip(names, manifests)])
    by_writer: dict[str, list] = {}
    roots: dict[str, LoadedManifest] = {}
    for m in manifests:
        for r in m.records:
            by_writer.setdefault(r.writer_id, []).append(r)
            roots[r.writer_id] = m
    records = []
    a = cfg.mae
    for i, wid in enumerate(sorted(by_writer)):
        recs = by_writer[wid]
        if not recs:
            raise CommandError(f"writer {wid} has no images")
        imgs = [load_image(roots[wid].path(r)) for r in recs]
        embs = resample_writer_embeddings(model, imgs, a.examples_per_embedding, a.embeddings_per_writer,
                                          np.random.default_rng([cfg.seed, i]), wid, [r.image_path for r in recs])
        records.extend((wid, k, e.vector) for k, e in enumerate(embs))
    n = write_embedding_store(out / "store", records)
    print(f"embeddings: {len(by_writer)} writers, {n} rows")
    return out


def load_embeddings(workdir: Path) -> dict[str, np.ndarray]:
    return read_embedding_store(_require(workdir / "embeddings" / "store.bin", "writer embeddings"))


# -- train-dm ---------------------------------------------------------------------


def _codec_for_training(cfg: RunConfig, images: np.ndarray, out: Path):
    if cfg.codec.kind == "patch_orthogonal":
        codec = PatchCodec().fit(images)
        (out / "codec.json").write_text(json.dumps(codec.state()) + "\n")
        return codec
    codec = train_small_autoencoder(images, cfg.codec.latent_channels, steps=cfg.codec.train_steps, seed=cfg.seed)
    checkpoint.save_params(out / "codec", codec.state_dict(), {"latent_channels": cfg.codec.latent_channels})
    return codec


def load_codec(workdir: Path, cfg: RunConfig):
    d = workdir / "dm"
    if cfg.codec.kind == "patch_orthogonal":
        return PatchCodec.from_state(json.loads(_require(d / "codec.json", "codec state").read_text()))
    codec = SmallAutoencoder(1, cfg.codec.latent_channels)
    codec.load_state_dict(checkpoint.load_params(_require(d / "codec.bin", "codec parameters")))
    return codec.eval()


def _items(m: LoadedManifest, latents: np.ndarray, emb: dict[str, np.ndarray]) -> list[BatchItem]:
    items = []
    for r, z in zip(m.records, latents):
        if r.writer_id not in emb:
            raise CommandError(f"no embeddings for writer {r.writer_id}; run embed-writers")
        items.append(BatchItem(z, r.transcription or None, r.writer_id, emb[r.writer_id]))
    return items


def _dm_model(cfg: RunConfig) -> DiffusionModel:
    torch.manual_seed(cfg.seed)
    return DiffusionModel(cfg.encoder_config(), cfg.unet_config())


def cmd_train_dm(cfg: RunConfig, workdir: Path, resume: bool = False) -> Path:
    train = _manifest(workdir, "train")
    inputs = [train.root / "train.tsv"]
    unl = None
    if cfg.training.semi_supervised:
        unl = _manifest(workdir, "unlabeled")
        inputs.append(unl.root / "unlabeled.tsv")
    emb = load_embeddings(workdir)
    out = prepare_run_dir(workdir / "dm", cfg, inputs)
    images = _images(train)
    codec = load_codec(workdir, cfg) if resume else _codec_for_training(cfg, images, out)
    labeled = _items(train, to_model_latent(codec.encode(images)), emb)
    unlabeled = _items(unl, to_model_latent(codec.encode(_images(unl))), emb) if unl is not None else []
    tcfg = cfg.train_config()
    state = init_train_state(_dm_model(cfg), tcfg)
    if resume:
        state.model.load_state_dict(checkpoint.load_params(_require(out / "dm.bin", "DM checkpoint")))
        state.ema.load_state_dict(checkpoint.load_params(out / "dm_ema"))
        state.step = load_optimizer(out / "dm_optim", state.optimizer)

    meta = {"style_inclusion": cfg.model.style_inclusion, "config_hash": cfg.hash()}

    def save(tag: str, st) -> None:
        checkpoint.save_params(out / f"dm{tag}", st.model.state_dict(), {**meta, "step": st.step})
        checkpoint.save_params(out / f"dm_ema{tag}", st.ema.state_dict(), {**meta, "step": st.step})

    with open(out / "log.ndjson", "a" if resume else "w") as fh:
        losses = train_diffusion(state, labeled, unlabeled, cfg.noise_schedule(), tcfg, fh,
                                 lambda epoch, st: save(f"_epoch{epoch:04d}", st))
    save("", state)
    save_optimizer(out / "dm_optim", state.optimizer, state.step)
    frac = unlabeled_fraction(len(labeled), len(unlabeled))
    if losses:
        print(f"dm: {state.step} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}, unlabeled fraction {frac:.3f}")
    return out


def load_generator(workdir: Path, cfg: RunConfig) -> DiffusionGenerator:
    model = DiffusionModel(cfg.encoder_config(), cfg.unet_config())
    name = "dm_ema" if cfg.sampler.use_ema else "dm"
    model.load_state_dict(checkpoint.load_params(_require(workdir / "dm" / f"{name}.bin", "DM checkpoint")))
    return DiffusionGenerator(model, load_codec(workdir, cfg), cfg.noise_schedule())


# -- sample -----------------------------------------------------------------------


EXAMPLE_WRITER = "examples"


def _writer_style(emb: dict[str, np.ndarray], writer: str, k: int = 0) -> np.ndarray:
    if writer not in emb:
        raise CommandError(f"unknown writer {writer!r}")
    rows = emb[writer]
    return rows[k % len(rows)]


def read_pairs(path: Path) -> list[tuple[str, str]]:
    pairs = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise CommandError(f"{path}:{n}: expected 'text<TAB>writer'")
        pairs.append((parts[0], parts[1]))
    return pairs


def cmd_sample(
    cfg: RunConfig,
    workdir: Path,
    pairs: Sequence[tuple[str, str]],
    guidance_scales: Sequence[float] = (),
    name: str = "samples",
    examples: Optional[Sequence[Path]] = None,
) -> Path:
    """Generate one image per ``(text, writer)`` pair and guidance scale.

    With ``examples``, the writer id ``EXAMPLE_WRITER`` refers to the pooled
    embedding of those images instead of a stored writer.
    """
    if not pairs:
        raise CommandError("nothing to sample")
    for text, _ in pairs:
        try:
            tokenize(text, cfg.model.max_len)
        except ValueError as exc:
            raise CommandError(str(exc)) from exc
    gen = load_generator(workdir, cfg)
    emb = load_embeddings(workdir)
    if examples:
        imgs = [filter_and_resize(load_image(_require(Path(p), "example image"))) for p in examples]
        emb = {**emb, EXAMPLE_WRITER: writer_embedding(load_mae(workdir, cfg), imgs, EXAMPLE_WRITER,
                                                      [str(p) for p in examples]).vector[None]}
    styles = [(t, _writer_style(emb, w)) for t, w in pairs]
    out = prepare_run_dir(workdir / name, cfg)
    scales = list(guidance_scales) or [cfg.sampler.guidance_scale]
    grid: list[list[str]] = [[] for _ in pairs]
    for w in scales:
        imgs = batched_generate(gen, styles, cfg.sampler_config(w), cfg.sampler.batch_size)
        for i, ((text, writer), img) in enumerate(zip(pairs, imgs)):
            fname = f"w{w:g}_{i:03d}_{text}_{writer}.png"
            save_image(out / fname, crop_to_ink(img))
            grid[i].append(fname)
    write_gallery(out / "gallery.html", pairs, scales, grid)
    print(f"samples: {len(pairs) * len(scales)} images in {out}")
    return out


def write_gallery(path: Path, pairs, scales, grid) -> None:
    head = "".join(f"<th>w_gs = {w:g}</th>" for w in scales)
    rows = []
    for (text, writer), files in zip(pairs, grid):
        cells = "".join(f'<td><img src="{html.escape(f)}" alt="{html.escape(text)}"></td>' for f in files)
        rows.append(f"<tr><th>{html.escape(text)}<br><small>{html.escape(writer)}</small></th>{cells}</tr>")
    path.write_text(
        "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>samples</title>"
        "<style>td,th{padding:6px;border:1px solid #ccc;text-align:center}img{background:#fff}</style>"
        f"</head><body><table><tr><th></th>{head}</tr>\n" + "\n".join(rows) + "\n</table></body></html>\n"
    )


# -- evaluate ---------------------------------------------------------------------


def cmd_evaluate(cfg: RunConfig, workdir: Path) -> Path:
    train, test = _manifest(workdir, "train"), _manifest(workdir, "test")
    lexicon = _lexicon(workdir)
    out = prepare_run_dir(workdir / "eval", cfg, [train.root / "train.tsv", test.root / "test.tsv"])
    kind = cfg.evaluation.generator
    htr_cfg = cfg.htr_config()
    train_imgs, test_imgs = list(_images(train)), list(_images(test))
    train_texts = [r.transcription for r in train.records]
    test_texts = [r.transcription for r in test.records]
    iv = in_vocabulary(test_texts, lexicon)
    iv_idx = [i for i, f in enumerate(iv) if f]
    if not iv_idx:
        raise CommandError("test set has no in-vocabulary words")

    reference = train_htr(train_imgs, train_texts, htr_cfg)
    ref_report = cer(test_texts, reference.recognize(test_imgs))
    real_iv = cer([test_texts[i] for i in iv_idx], reference.recognize([test_imgs[i] for i in iv_idx]))
    records = [report_record(metric="reference_cer", generator="real", cer=ref_report, config_hash=cfg.hash())]

    if kind == "model":
        gen = load_generator(workdir, cfg)
        emb = load_embeddings(workdir)
        scales = list(cfg.evaluation.guidance_scales)
    else:
        gen = emb = None
        scales = [0.0]

    def fixed_generator(images: Sequence[np.ndarray]):
        # oracle returns the real image of record k; noise ignores the conditioning
        if kind == "oracle":
            return lambda text, writer, k: images[k]
        return lambda text, writer, k: noise_image(cfg.seed * 1_000_003 + k)

    cer_train: dict[tuple[float, str], float] = {}
    diff: dict[tuple[float, str], float] = {}
    mode = cfg.model.style_inclusion
    train_pairs = [(r.transcription, r.writer_id) for r in train.records]
    iv_pairs = [(test_texts[i], test.records[i].writer_id) for i in iv_idx]
    for w in scales:
        if kind == "model":
            scfg = cfg.sampler_config(w)
            gen_train = batched_generate(gen, [(t, _writer_style(emb, wid, k)) for k, (t, wid) in enumerate(train_pairs)],
                                         scfg, cfg.sampler.batch_size)
            gen_iv = batched_generate(gen, [(t, _writer_style(emb, wid, k)) for k, (t, wid) in enumerate(iv_pairs)],
                                      scfg, cfg.sampler.batch_size)
            g_train = lambda text, writer, k: gen_train[k]  # noqa: E731
            g_iv = lambda text, writer, k: gen_iv[k]  # noqa: E731
        else:
            g_train = fixed_generator(train_imgs)
            g_iv = fixed_generator([test_imgs[i] for i in iv_idx])
        try:
            res = cer_train_protocol(g_train, train_pairs, lambda x, y: train_htr(x, y, htr_cfg), test_imgs, test_texts)
            iv_imgs, iv_texts, _ = generate_replicas(g_iv, iv_pairs)
        except ProtocolAborted as exc:
            raise CommandError(str(exc)) from exc
        if not iv_imgs:
            raise CommandError("generated IV set is empty")
        d_iv = diff_iv(reference, iv_imgs, iv_texts, [test_imgs[i] for i in iv_idx], [test_texts[i] for i in iv_idx])
        cer_train[(w, mode)] = res.report.percent
        diff[(w, mode)] = d_iv
        records.append(report_record(metric="cer_train", generator=kind, guidance_scale=w, style_inclusion=mode,
                                     cer=res.report, failures=res.failures, config_hash=cfg.hash()))
        records.append(report_record(metric="diff_iv", generator=kind, guidance_scale=w, style_inclusion=mode,
                                     value_pp=d_iv, real_iv_cer=real_iv.cer, config_hash=cfg.hash()))

    text = (
        f"config hash: {cfg.hash()}\ngenerator: {kind}\n"
        f"reference HTR CER on real test data: {ref_report.percent:.2f}%\n\n"
        + metric_table(cer_train, "CER-train (%)") + "\n" + metric_table(diff, "Diff-IV (pp)")
    )
    (out / "report.txt").write_text(text)
    (out / "metrics.ndjson").write_text("\n".join(records) + "\n")
    print(text, end="")
    return out


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hwdiff", description="Styled handwritten word generation with latent diffusion.")
    p.add_argument("--workdir", type=Path, default=Path("run"), help="directory holding all artifacts")
    p.add_argument("--profile", default="desk", choices=["desk", "paper"])
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. training.max_steps=100")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth-data", help="render a synthetic multi-writer corpus")
    m = sub.add_parser("train-mae", help="train the style encoder")
    m.add_argument("--resume", action="store_true")
    m.add_argument("--until-step", type=int)
    sub.add_parser("embed-writers", help="compute resampled writer embeddings")
    d = sub.add_parser("train-dm", help="train the diffusion model")
    d.add_argument("--resume", action="store_true")
    s = sub.add_parser("sample", help="generate word images")
    s.add_argument("--text", action="append", default=[])
    s.add_argument("--writer", help="writer id used for every --text")
    s.add_argument("--pairs", type=Path, help="file of text<TAB>writer lines")
    s.add_argument("--examples", type=Path, nargs="+", metavar="IMAGE",
                   help="example images of a new writer; their pooled embedding is used as style")
    s.add_argument("--guidance", "--guidance-scale", dest="guidance", type=float, nargs="+", default=[],
                   help="one or more guidance scales (one image column each)")
    s.add_argument("--name", default="samples", help="output subdirectory")
    _sampler_args(s)
    e = sub.add_parser("evaluate", help="CER-train and Diff-IV reports")
    e.add_argument("--guidance", "--guidance-scale", dest="guidance", type=float, nargs="+", default=[])
    e.add_argument("--generator", choices=["model", "oracle", "noise"])
    _sampler_args(e)
    return p


def _sampler_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sampler", choices=["ancestral", "strided"], help="reverse-process sampler")
    p.add_argument("--steps", type=int, help="number of sampling steps (strided only; ancestral uses T)")


def _flag_overrides(args: argparse.Namespace) -> list[str]:
    out = []
    if args.seed is not None:
        out.append(f"seed={args.seed}")
    sampler = getattr(args, "sampler", None)
    if sampler is not None:
        out.append("sampler.kind=" + ("strided_deterministic" if sampler == "strided" else sampler))
    if getattr(args, "steps", None) is not None:
        out.append(f"sampler.num_steps={args.steps}")
    if args.command == "evaluate":
        if args.guidance:
            out.append("evaluation.guidance_scales=[" + ", ".join(repr(float(w)) for w in args.guidance) + "]")
        if args.generator:
            out.append(f"evaluation.generator={args.generator}")
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.profile, args.config, list(args.overrides) + _flag_overrides(args))
        wd = args.workdir
        if args.command == "synth-data":
            cmd_synth_data(cfg, wd)
        elif args.command == "train-mae":
            cmd_train_mae(cfg, wd, args.resume, args.until_step)
        elif args.command == "embed-writers":
            cmd_embed_writers(cfg, wd)
        elif args.command == "train-dm":
            cmd_train_dm(cfg, wd, args.resume)
        elif args.command == "sample":
            pairs = read_pairs(args.pairs) if args.pairs else []
            if args.text:
                if not (args.writer or args.examples):
                    raise CommandError("--text needs --writer or --examples")
                pairs += [(t, args.writer or EXAMPLE_WRITER) for t in args.text]
            cmd_sample(cfg, wd, pairs, args.guidance, args.name, args.examples)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, wd)
    except (CommandError, ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
