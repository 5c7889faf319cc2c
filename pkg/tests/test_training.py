import io
import json

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from helpers import LATENT, items, tiny_model
from hwdiff.schedule import linear_schedule, q_sample
from hwdiff.training import (
    TrainConfig,
    apply_conditioning_dropout,
    batch_loss,
    build_semisupervised_epoch,
    ema_update,
    init_train_state,
    prepare_batch,
    train_diffusion,
    training_step,
    unlabeled_fraction,
)

SCHED = linear_schedule()


def test_paper_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.p_uncond, cfg.ema_gamma) == (1000, 224, 0.1, 0.995)
    assert (cfg.learning_rate, cfg.betas, cfg.weight_decay) == (1e-4, (0.9, 0.999), 0.01)


@pytest.mark.parametrize("kw", [{"p_uncond": 1.0}, {"p_uncond": -0.1}, {"ema_gamma": 1.0}, {"ema_gamma": 0.0}])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_oracle_predictor_gives_zero_loss():
    batch = items(4)
    pb = prepare_batch(batch, SCHED, np.random.default_rng(0), 0.1)

    def oracle(z_t, t, *rest):
        return pb.eps

    assert batch_loss(oracle, pb, SCHED).item() == 0.0


@given(delta=st.floats(-3, 3))
def test_offset_predictor_gives_delta_squared(delta):
    batch = items(3)
    pb = prepare_batch(batch, SCHED, np.random.default_rng(1), 0.1, dtype=torch.float64)

    def shifted(z_t, t, *rest):
        return pb.eps + delta

    assert batch_loss(shifted, pb, SCHED).item() == pytest.approx(delta**2, rel=1e-12, abs=1e-15)


def test_loss_is_non_negative_and_uses_q_sample():
    batch = items(3)
    pb = prepare_batch(batch, SCHED, np.random.default_rng(2), 0.1)
    seen = {}

    def spy(z_t, t, *rest):
        seen["z_t"] = z_t
        return torch.zeros_like(z_t)

    assert batch_loss(spy, pb, SCHED).item() >= 0
    torch.testing.assert_close(seen["z_t"], q_sample(pb.z0, pb.t, pb.eps, SCHED))
    assert pb.t.min() >= 1 and pb.t.max() <= SCHED.T


def test_non_finite_loss_names_item():
    batch = items(2)

    def bad(z_t, t, *rest):
        out = torch.zeros_like(z_t)
        out[1] = float("nan")
        return out

    with pytest.raises(FloatingPointError, match="w1:cat"):
        training_step(bad, batch, SCHED, np.random.default_rng(0))


def test_non_finite_latent_rejected():
    batch = items(2)
    batch[0].latent[0, 0, 0] = np.inf
    with pytest.raises(FloatingPointError):
        prepare_batch(batch, SCHED, np.random.default_rng(0), 0.1)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        prepare_batch([], SCHED, np.random.default_rng(0), 0.1)


def test_dropout_zero_probability():
    rng = np.random.default_rng(0)
    assert all(apply_conditioning_dropout(True, 0.0, rng) == (False, False) for _ in range(1000))
    assert all(apply_conditioning_dropout(False, 0.0, rng) == (True, False) for _ in range(1000))
    with pytest.raises(ValueError):
        apply_conditioning_dropout(True, 1.0, rng)


def test_dropout_rates():
    rng = np.random.default_rng(2024)
    draws = np.array([apply_conditioning_dropout(True, 0.1, rng) for _ in range(100_000)])
    rates = draws.mean(axis=0)
    assert abs(rates[0] - 0.1) <= 0.005 and abs(rates[1] - 0.1) <= 0.005
    # independence: joint rate close to the product
    assert abs(np.mean(draws[:, 0] & draws[:, 1]) - 0.01) < 0.002


def test_unlabeled_style_drop_still_drawn():
    rng = np.random.default_rng(5)
    draws = np.array([apply_conditioning_dropout(False, 0.1, rng) for _ in range(20_000)])
    assert draws[:, 0].all()
    assert abs(draws[:, 1].mean() - 0.1) < 0.01


def test_ema_examples():
    ema = {"w": torch.zeros(3)}
    ema_update(ema, {"w": torch.ones(3)}, 0.995)
    torch.testing.assert_close(ema["w"], torch.full((3,), 0.005))
    same = {"w": torch.tensor([0.25, -1.0])}
    ema_update(same, {"w": same["w"].clone()}, 0.995)
    assert torch.equal(same["w"], torch.tensor([0.25, -1.0]))
    with pytest.raises(ValueError):
        ema_update({"w": torch.zeros(2)}, {"w": torch.zeros(3)}, 0.9)


def test_ema_converges_geometrically():
    gamma = 0.995
    ema = {"w": torch.zeros(4, dtype=torch.float64)}
    target = {"w": torch.tensor([1.0, -2.0, 0.5, 3.0], dtype=torch.float64)}
    for _ in range(100):
        ema_update(ema, target, gamma)
    gap = (ema["w"] - target["w"]).abs()
    torch.testing.assert_close(gap, target["w"].abs() * gamma**100, rtol=1e-10, atol=0)


def test_ema_on_modules():
    a, b = tiny_model(seed=0), tiny_model(seed=1)
    before = {k: v.clone() for k, v in a.state_dict().items()}
    ema_update(a, b, 0.9)
    k = "unet.conv_in.weight"
    torch.testing.assert_close(a.state_dict()[k], 0.9 * before[k] + 0.1 * b.state_dict()[k])


def test_unlabeled_fraction_example():
    assert unlabeled_fraction(44405, 34468) == pytest.approx(0.437, abs=5e-4)


def test_semisupervised_epoch():
    lab, unl = items(5), items(3, labeled=False, seed=1)
    stream = build_semisupervised_epoch(lab, unl, np.random.default_rng(0))
    assert sorted(map(id, stream)) == sorted(map(id, lab + unl))
    again = build_semisupervised_epoch(lab, unl, np.random.default_rng(0))
    assert [id(x) for x in stream] == [id(x) for x in again]
    sup = build_semisupervised_epoch(lab, [], np.random.default_rng(0))
    perm = np.random.default_rng(0).permutation(5)
    assert [id(x) for x in sup] == [id(lab[i]) for i in perm]
    with pytest.raises(ValueError):
        build_semisupervised_epoch([], unl, np.random.default_rng(0))


def test_zero_dropout_conditioning_is_deterministic():
    batch = items(4)
    a = prepare_batch(batch, SCHED, np.random.default_rng(3), 0.0)
    b = prepare_batch(batch, SCHED, np.random.default_rng(3), 0.0)
    assert not a.drop_text.any() and not a.drop_style.any()
    assert torch.equal(a.style, b.style) and torch.equal(a.tokens, b.tokens)


@pytest.mark.parametrize("mode", ["ts", "ta", "cp"])
def test_unlabeled_conditioning_matches_dropped_text(mode):
    model = tiny_model(mode, dtype=torch.float64)
    lab = items(1, labeled=True)[0]
    unl = items(1, labeled=False)[0]
    unl.embeddings = lab.embeddings
    from hwdiff.conditioning import encode_texts

    style = torch.as_tensor(lab.embeddings[:1])
    t = torch.tensor([77])
    c_lab = model.encoder(encode_texts([lab.transcription]), style, t, torch.tensor([True]), torch.tensor([False]))
    c_unl = model.encoder(encode_texts([None]), style, t, torch.tensor([True]), torch.tensor([False]))
    assert torch.equal(c_lab.C, c_unl.C) and torch.equal(c_lab.t_emb, c_unl.t_emb)


def test_gradients_reach_encoder_and_unet():
    model = tiny_model()
    loss = training_step(model, items(4), SCHED, np.random.default_rng(0), p_uncond=0.0)
    loss.backward()
    assert model.encoder.char_embed.weight.grad.abs().sum() > 0
    assert model.encoder.style_proj.weight.grad.abs().sum() > 0
    assert model.unet.conv_out.weight.grad.abs().sum() > 0


def small_cfg(**kw):
    base = dict(epochs=3, batch_size=3, learning_rate=1e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_training_log_and_checkpoints():
    state = init_train_state(tiny_model(), small_cfg())
    log = io.StringIO()
    saved = []
    losses = train_diffusion(state, items(5), items(2, labeled=False), SCHED, small_cfg(checkpoint_every=1), log,
                             checkpoint_fn=lambda ep, st: saved.append(ep))
    assert len(losses) == 9 and state.step == 9
    assert saved == [1, 2, 3]
    recs = [json.loads(line) for line in log.getvalue().splitlines()]
    assert recs[0]["event"] == "start" and recs[0]["unlabeled_fraction"] == pytest.approx(2 / 7)
    assert set(recs[1]) == {"step", "epoch", "loss", "lr", "timestamp"}


def test_warmup_ramps_learning_rate():
    cfg = small_cfg(warmup_steps=4, max_steps=6)
    log = io.StringIO()
    train_diffusion(init_train_state(tiny_model(), cfg), items(5), [], SCHED, cfg, log)
    lrs = [json.loads(line)["lr"] for line in log.getvalue().splitlines()[1:]]
    assert lrs == pytest.approx([2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3, 1e-3], rel=1e-12)
    with pytest.raises(ValueError):
        small_cfg(warmup_steps=-1)


def test_ema_differs_from_raw_after_training():
    state = init_train_state(tiny_model(), small_cfg())
    train_diffusion(state, items(6), [], SCHED, small_cfg())
    k = "unet.conv_out.weight"
    assert not torch.equal(state.ema.state_dict()[k], state.model.state_dict()[k])


def test_resume_reproduces_uninterrupted_run():
    data = items(7)
    cfg = small_cfg(epochs=4)
    full = init_train_state(tiny_model(), cfg)
    ref = train_diffusion(full, data, [], SCHED, cfg)

    part = init_train_state(tiny_model(), cfg)
    first = train_diffusion(part, data, [], SCHED, small_cfg(epochs=4, max_steps=5))
    snapshot = {
        "model": {k: v.clone() for k, v in part.model.state_dict().items()},
        "ema": {k: v.clone() for k, v in part.ema.state_dict().items()},
        "optimizer": part.optimizer.state_dict(),
        "step": part.step,
    }
    resumed = init_train_state(tiny_model(seed=9), cfg)
    resumed.load_state_dict(snapshot)
    second = train_diffusion(resumed, data, [], SCHED, cfg)
    assert first + second == ref
    for k, v in full.ema.state_dict().items():
        assert torch.equal(v, resumed.ema.state_dict()[k])


def test_training_requires_labeled_data():
    state = init_train_state(tiny_model(), small_cfg())
    with pytest.raises(ValueError):
        train_diffusion(state, [], items(2, labeled=False), SCHED, small_cfg())
