import pytest
import yaml

from hwdiff.config import PROFILES, ConfigError, RunConfig, load_config, parse_override


def test_paper_profile_values():
    cfg = load_config("paper")
    m = cfg.mae_train_config()
    assert (m.learning_rate, m.warmup_epochs, m.epochs, m.batch_size, m.betas) == (1.5e-4, 3, 100, 64, (0.9, 0.95))
    t = cfg.train_config()
    assert (t.epochs, t.batch_size, t.p_uncond, t.learning_rate, t.ema_gamma) == (1000, 224, 0.1, 1e-4, 0.995)
    assert cfg.mae_config().embed_dim == 768 and cfg.mae_config().mask_ratio == 0.75
    assert cfg.mae.examples_per_embedding == 10 and cfg.mae.embeddings_per_writer == 100
    enc = cfg.encoder_config()
    assert (enc.mode, enc.char_dim, enc.max_len) == ("ts", 256, 7)


def test_desk_profile_is_smaller():
    desk = load_config("desk")
    assert desk.training.epochs == 200 and desk.training.batch_size == 16
    assert desk.mae.embed_dim < 768
    assert desk.unet_config().base_channels >= desk.codec_spec().latent_channels


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config("desk", overrides=["training.nope=1"])
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config("desk", overrides=["nosection.x=1"])
    p = tmp_path / "c.yaml"
    p.write_text("model:\n  style_inclusion: tp\n  colour: blue\n")
    with pytest.raises(ConfigError):
        load_config(path=p)


def test_file_and_overrides_layer(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("profile: desk\nseed: 3\nmodel:\n  style_inclusion: ca\n")
    cfg = load_config(path=p, overrides=["seed=5", "sampler.guidance_scale=2"])
    assert cfg.profile == "desk" and cfg.seed == 5 and cfg.model.style_inclusion == "ca"
    assert cfg.sampler.guidance_scale == 2.0 and isinstance(cfg.sampler.guidance_scale, float)
    assert cfg.unet_config().conditioning_dim == 2 * cfg.model.char_dim


def test_type_and_value_errors():
    with pytest.raises(ConfigError):
        load_config("desk", overrides=["training.epochs=lots"])
    with pytest.raises(ConfigError):
        load_config("desk", overrides=["training.p_uncond=1.5"])
    with pytest.raises(ConfigError):
        load_config("desk", overrides=["model.style_inclusion=xx"])
    with pytest.raises(ConfigError):
        load_config("nope")
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_parse_override_nests():
    assert parse_override("a.b.c=[1, 2]") == {"a": {"b": {"c": [1, 2]}}}


def test_yaml_echo_round_trips(tmp_path):
    cfg = load_config("desk", overrides=["seed=9", "evaluation.guidance_scales=[0, 2]"])
    p = tmp_path / "echo.yaml"
    p.write_text(cfg.to_yaml())
    again = load_config(path=p)
    assert again.to_dict() == cfg.to_dict()
    assert again.hash() == cfg.hash()
    assert load_config("desk").hash() != cfg.hash()


def test_every_section_has_defaults():
    doc = RunConfig().to_dict()
    assert set(doc) >= {"schedule", "model", "mae", "training", "sampler", "dataset", "evaluation"}
    assert yaml.safe_load(RunConfig().to_yaml()) == doc


def test_ancestral_sampler_uses_full_chain():
    cfg = load_config("desk", overrides=["sampler.kind=ancestral", "schedule.T=200"])
    assert cfg.sampler_config().num_steps == 200


def test_profiles_listed():
    assert set(PROFILES) == {"paper", "desk"}
