"""Run configuration: nested sections with defaults, named profiles, YAML
files and ``key=value`` overrides. Unknown keys are errors."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .codec import CodecSpec
from .conditioning import EncoderConfig
from .evaluation import HtrConfig
from .mae import MaeConfig, MaeTrainConfig
from .sampler import SamplerConfig
from .schedule import NoiseSchedule, linear_schedule
from .training import TrainConfig
from .unet import UNetConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleSection:
    beta_start: float = 1e-4
    beta_end: float = 0.02
    T: int = 1000


@dataclass
class CodecSection:
    kind: str = "patch_orthogonal"  # or "trained_small"
    latent_channels: int = 16  # trained_small only; patch_orthogonal uses 64
    train_steps: int = 2000  # trained_small only


@dataclass
class ModelSection:
    style_inclusion: str = "ts"  # tp, tpl, cp, ta, ca, ts
    char_dim: int = 256
    time_dim: int = 256
    encoder_heads: int = 4
    max_len: int = 7
    base_channels: int = 64
    channel_mult: tuple = (1, 2)
    num_res_blocks: int = 2
    attention_heads: int = 4
    cross_attention_dim: int = 64  # per-head width
    norm_groups: int = 8


@dataclass
class MaeSection:
    patch_size: int = 8
    embed_dim: int = 768
    encoder_layers: int = 6
    decoder_layers: int = 6
    heads: int = 8
    mask_ratio: float = 0.75
    pos_embedding: str = "additive"  # or "concat"
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1.5e-4
    warmup_epochs: int = 3
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.05
    max_steps: Optional[int] = None
    examples_per_embedding: int = 10
    embeddings_per_writer: int = 100


@dataclass
class TrainingSection:
    epochs: int = 1000
    batch_size: int = 224
    learning_rate: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    p_uncond: float = 0.1
    ema_gamma: float = 0.995
    max_steps: Optional[int] = None
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    semi_supervised: bool = False
    warmup_steps: int = 0


@dataclass
class SamplerSection:
    kind: str = "strided_deterministic"  # or "ancestral"
    num_steps: int = 50
    guidance_scale: float = 0.0
    noise_std: str = "posterior"  # or "beta"
    use_ema: bool = True
    batch_size: int = 32


@dataclass
class DatasetSection:
    num_writers: int = 10
    test_writers: int = 2
    lexicon_size: int = 40
    samples_per_writer: int = 200
    oov_fraction: float = 0.1
    unlabeled_writers: int = 0  # writers in the unlabeled second set
    unlabeled_samples_per_writer: int = 0


@dataclass
class EvaluationSection:
    generator: str = "model"  # model, oracle or noise
    guidance_scales: tuple = (0.0,)
    htr_epochs: int = 240
    htr_batch_size: int = 32
    htr_learning_rate: float = 1e-3
    htr_weight_decay: float = 5e-5
    htr_augment: float = 0.0
    htr_height: int = 32
    htr_width: int = 128


@dataclass
class RunConfig:
    seed: int = 0
    profile: str = "paper"
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    codec: CodecSection = field(default_factory=CodecSection)
    model: ModelSection = field(default_factory=ModelSection)
    mae: MaeSection = field(default_factory=MaeSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    # -- derived component configs ------------------------------------------------

    def noise_schedule(self) -> NoiseSchedule:
        s = self.schedule
        return linear_schedule(s.beta_start, s.beta_end, s.T)

    def codec_spec(self) -> CodecSpec:
        if self.codec.kind == "patch_orthogonal":
            return CodecSpec("patch_orthogonal", 8, 64, 1)
        return CodecSpec(self.codec.kind, 8, self.codec.latent_channels, 1)

    def encoder_config(self) -> EncoderConfig:
        m = self.model
        return EncoderConfig(m.style_inclusion, self.mae.embed_dim, m.char_dim, m.time_dim, m.max_len, m.encoder_heads)

    def unet_config(self) -> UNetConfig:
        m = self.model
        return UNetConfig(
            latent_channels=self.codec_spec().latent_channels,
            base_channels=m.base_channels,
            channel_mult=tuple(m.channel_mult),
            num_res_blocks=m.num_res_blocks,
            attention_heads=m.attention_heads,
            cross_attention_dim=m.cross_attention_dim,
            conditioning_dim=self.encoder_config().cond_dim,
            time_dim=m.time_dim,
            norm_groups=m.norm_groups,
        )

    def mae_config(self) -> MaeConfig:
        a = self.mae
        return MaeConfig(patch_size=a.patch_size, embed_dim=a.embed_dim, encoder_layers=a.encoder_layers,
                         decoder_layers=a.decoder_layers, heads=a.heads, mask_ratio=a.mask_ratio,
                         pos_embedding=a.pos_embedding)

    def mae_train_config(self) -> MaeTrainConfig:
        a = self.mae
        return MaeTrainConfig(a.epochs, a.batch_size, a.learning_rate, a.warmup_epochs, tuple(a.betas),
                              a.weight_decay, self.seed, a.max_steps)

    def train_config(self) -> TrainConfig:
        t = self.training
        return TrainConfig(t.epochs, t.batch_size, t.learning_rate, tuple(t.betas), t.weight_decay, t.p_uncond,
                           t.ema_gamma, self.model.style_inclusion, self.seed, t.max_steps, t.checkpoint_every,
                           t.semi_supervised, t.warmup_steps)

    def sampler_config(self, guidance_scale: Optional[float] = None, seed: Optional[int] = None) -> SamplerConfig:
        s = self.sampler
        w = s.guidance_scale if guidance_scale is None else guidance_scale
        # the ancestral chain always visits every timestep
        steps = self.schedule.T if s.kind == "ancestral" else s.num_steps
        return SamplerConfig(s.kind, steps, w, self.seed if seed is None else seed, s.noise_std)

    def htr_config(self) -> HtrConfig:
        e = self.evaluation
        return HtrConfig(height=e.htr_height, width=e.htr_width, epochs=e.htr_epochs, batch_size=e.htr_batch_size,
                         learning_rate=e.htr_learning_rate, weight_decay=e.htr_weight_decay,
                         augment=e.htr_augment, seed=self.seed)

    # -- serialisation ------------------------------------------------------------

    def to_dict(self) -> dict:
        def plain(v):
            if isinstance(v, tuple):
                return [plain(x) for x in v]
            return v

        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = {k: plain(x) for k, x in dataclasses.asdict(v).items()} if dataclasses.is_dataclass(v) else v
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> "RunConfig":
        # Building every component config runs their own checks.
        try:
            self.encoder_config()
            self.unet_config()
            self.mae_config()
            self.mae_train_config()
            self.train_config()
            self.sampler_config()
            self.noise_schedule()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.evaluation.generator not in ("model", "oracle", "noise"):
            raise ConfigError(f"unknown evaluation.generator {self.evaluation.generator!r}")
        if self.dataset.test_writers >= self.dataset.num_writers:
            raise ConfigError("dataset.test_writers must leave at least one train writer")
        return self


PROFILES: dict[str, dict] = {
    "paper": {},
    "desk": {
        "model": {"char_dim": 64, "time_dim": 64},
        "mae": {"embed_dim": 64, "encoder_layers": 2, "decoder_layers": 1, "heads": 4, "epochs": 20,
                "batch_size": 32, "learning_rate": 1e-3, "warmup_epochs": 1, "embeddings_per_writer": 100},
        "training": {"epochs": 200, "batch_size": 16, "learning_rate": 5e-4},
        "evaluation": {"htr_epochs": 12, "htr_augment": 0.1},
    },
}


def _coerce(value: Any, default: Any, key: str) -> Any:
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            value = [value]
        return tuple(value)
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def _apply(cfg: RunConfig, doc: dict, where: str = "") -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cfg)}
    for key, value in doc.items():
        if key not in names:
            raise ConfigError(f"unknown config key {where + key!r}")
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a mapping")
            sub = {f.name for f in dataclasses.fields(current)}
            for k, v in value.items():
                if k not in sub:
                    raise ConfigError(f"unknown config key {key + '.' + k!r}")
                setattr(current, k, _coerce(v, getattr(current, k), f"{key}.{k}"))
        else:
            setattr(cfg, key, _coerce(value, current, key))


def parse_override(item: str) -> dict:
    """``a.b=value`` -> ``{"a": {"b": value}}`` with ``value`` parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    value = yaml.safe_load(raw) if raw.strip() else ""
    doc: Any = value
    for p in reversed(parts):
        doc = {p: doc}
    return doc


def load_config(profile: str = "desk", path: Optional[str | Path] = None, overrides: tuple | list = ()) -> RunConfig:
    """Defaults, then the profile, then the YAML file, then ``key=value`` overrides."""
    file_doc = {}
    if path is not None:
        file_doc = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(file_doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        profile = file_doc.get("profile", profile)
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = RunConfig(profile=profile)
    _apply(cfg, copy.deepcopy(PROFILES[profile]))
    _apply(cfg, file_doc)
    for item in overrides:
        _apply(cfg, parse_override(item))
    return cfg.validate()
