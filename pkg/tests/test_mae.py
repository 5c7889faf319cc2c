import io
import json

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from hwdiff.mae import (
    MaeConfig,
    MaeTrainConfig,
    MaskedAutoencoder,
    init_mae_state,
    lr_factor,
    make_mask,
    masked_loss,
    patchify,
    pool_embeddings,
    read_embedding_store,
    resample_writer_embeddings,
    sincos_2d,
    train_mae,
    unpatchify,
    writer_embedding,
    write_embedding_store,
)

TINY = MaeConfig(image_height=16, image_width=32, embed_dim=16, encoder_layers=1, decoder_layers=1, heads=2)


def tiny_model(seed=0, cfg=TINY):
    torch.manual_seed(seed)
    return MaskedAutoencoder(cfg).double().eval()


def images(n, seed=0, shape=(16, 32)):
    return np.random.default_rng(seed).random((n, *shape))


def test_patchify_default_grid():
    p = patchify(np.zeros((64, 256)))
    assert p.shape == (256, 64)
    assert MaeConfig().num_patches == 256


def test_patchify_row_major():
    img = np.arange(16 * 32, dtype=np.float64).reshape(16, 32)
    p = patchify(img)
    np.testing.assert_array_equal(p[1], img[0:8, 8:16].reshape(-1))
    np.testing.assert_array_equal(p[4], img[8:16, 0:8].reshape(-1))


def test_constant_image_gives_identical_patches():
    p = patchify(np.full((64, 256), 0.3))
    assert np.all(p == p[0])


@given(seed=st.integers(0, 1000))
def test_unpatchify_inverts(seed):
    img = np.random.default_rng(seed).random((2, 16, 32))
    np.testing.assert_array_equal(unpatchify(patchify(img), (2, 4)), img)
    t = torch.from_numpy(img)
    assert torch.equal(unpatchify(patchify(t), (2, 4)), t)


def test_patchify_bad_dims():
    with pytest.raises(ValueError):
        patchify(np.zeros((60, 256)))
    with pytest.raises(ValueError):
        MaeConfig(image_height=60)


def test_mask_examples():
    assert make_mask(256, 0.75, 0).num_masked == 192
    assert make_mask(256, 0.75, 0).mask.sum() == 192
    assert make_mask(4, 0.5, 0).mask.sum() == 2
    for r in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            make_mask(10, r, 0)


@given(N=st.integers(1, 500), r=st.floats(0.01, 0.99))
def test_mask_cardinality(N, r):
    plan = make_mask(N, r, 1)
    assert plan.mask.sum() == plan.num_masked == int(np.floor(N * r))


def test_masks_differ_across_seeds():
    masks = {make_mask(256, 0.75, s).mask.tobytes() for s in range(100)}
    assert len(masks) == 100


def test_masked_loss_examples():
    target = np.zeros((4, 3))
    assert masked_loss(target, target, np.array([1, 1, 0, 0], bool)) == 0.0
    pred = target.copy()
    pred[2, 0] = 1.0
    assert masked_loss(pred, target, np.array([0, 0, 1, 0], bool)) == 1.0
    assert masked_loss(pred, target, np.array([1, 0, 0, 0], bool)) == 0.0
    assert masked_loss(pred, target, np.array([0, 0, 1, 0], bool), reduction="mean") == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        masked_loss(np.zeros((3, 3)), target, np.zeros(4, bool))


@given(seed=st.integers(0, 1000))
def test_masked_loss_ignores_visible_predictions(seed):
    g = np.random.default_rng(seed)
    pred, target = g.standard_normal((16, 5)), g.standard_normal((16, 5))
    plan = make_mask(16, 0.5, seed)
    base = masked_loss(pred, target, plan)
    pert = pred.copy()
    pert[~plan.mask] += g.standard_normal(pert[~plan.mask].shape) * 10
    assert masked_loss(pert, target, plan) == base


def test_masked_loss_gradient_zero_on_visible():
    g = np.random.default_rng(0)
    pred = torch.tensor(g.standard_normal((8, 4)), requires_grad=True)
    target = torch.tensor(g.standard_normal((8, 4)))
    plan = make_mask(8, 0.5, 3)
    masked_loss(pred, target, plan).backward()
    assert torch.all(pred.grad[~torch.from_numpy(plan.mask)] == 0)
    assert torch.all(pred.grad[torch.from_numpy(plan.mask)].abs().sum(-1) > 0)
    # central finite difference on a visible entry
    i = int(np.flatnonzero(~plan.mask)[0])
    p = pred.detach().numpy().copy()
    h = 1e-6
    p[i, 0] += h
    up = masked_loss(p, target.numpy(), plan)
    p[i, 0] -= 2 * h
    down = masked_loss(p, target.numpy(), plan)
    assert (up - down) / (2 * h) == 0.0


def test_encoder_is_length_preserving_and_decoder_restores_n():
    model = tiny_model()
    x = torch.from_numpy(images(2))
    patches = patchify(x)
    keep = torch.tensor([[0, 3, 5], [1, 2, 7]])
    enc = model.encode_visible(patches, keep)
    assert enc.shape == (2, 3, TINY.embed_dim)
    dec = model.decode(enc, keep)
    assert dec.shape == (2, TINY.num_patches, TINY.patch_dim)


def test_forward_masks_expected_count():
    model = tiny_model()
    pred, target, mask = model(torch.from_numpy(images(3)), torch.Generator().manual_seed(0))
    assert pred.shape == target.shape == (3, 8, 64)
    assert mask.sum(1).tolist() == [6, 6, 6]


def test_concat_positional_variant():
    cfg = MaeConfig(image_height=16, image_width=32, embed_dim=16, encoder_layers=1, decoder_layers=1, heads=2,
                    pos_embedding="concat")
    model = tiny_model(cfg=cfg)
    assert model.patch_embeddings(images(1)[0]).shape == (8, 16)


def test_sincos_table():
    table = sincos_2d(8, (2, 3))
    assert table.shape == (6, 8)
    np.testing.assert_allclose(table[0], [0, 0, 1, 1, 0, 0, 1, 1])


def test_pool_constant_returns_value():
    v = np.array([0.1, -2.5, 3.3])
    assert np.array_equal(pool_embeddings(np.broadcast_to(v, (4, 5, 3))), v)


@given(seed=st.integers(0, 1000))
def test_pool_order_invariant_and_idempotent(seed):
    g = np.random.default_rng(seed)
    e = g.standard_normal((5, 6, 4))
    base = pool_embeddings(e)
    assert np.array_equal(pool_embeddings(e[g.permutation(5)]), base)
    np.testing.assert_allclose(pool_embeddings(np.concatenate([e, e])), base, rtol=0, atol=1e-14)
    np.testing.assert_allclose(base, e.reshape(-1, 4).mean(0), rtol=0, atol=1e-14)


def test_writer_embedding_order_invariance():
    model = tiny_model()
    imgs = list(images(4, seed=2))
    a = writer_embedding(model, imgs, "w")
    b = writer_embedding(model, imgs[::-1], "w")
    assert np.array_equal(a.vector, b.vector)
    assert a.vector.shape == (16,)
    with pytest.raises(ValueError):
        writer_embedding(model, [], "w")


def test_resample_counts_and_determinism():
    model = tiny_model()
    imgs = list(images(12, seed=3))
    a = resample_writer_embeddings(model, imgs, K=10, count=100, seed=5, writer_id="w")
    b = resample_writer_embeddings(model, imgs, K=10, count=100, seed=5, writer_id="w")
    assert len(a) == 100
    assert all(np.array_equal(x.vector, y.vector) for x, y in zip(a, b))
    assert all(len(set(x.source_image_ids)) == 10 for x in a)


def test_resample_with_exactly_k_images_is_constant():
    model = tiny_model()
    out = resample_writer_embeddings(model, list(images(4, seed=4)), K=4, count=7, seed=0)
    assert all(np.array_equal(o.vector, out[0].vector) for o in out)


def test_resample_with_replacement_and_errors():
    model = tiny_model()
    out = resample_writer_embeddings(model, list(images(2)), K=5, count=3, seed=0)
    assert all(len(o.source_image_ids) == 5 for o in out)
    with pytest.raises(ValueError):
        resample_writer_embeddings(model, [], K=5)


def test_embedding_store_round_trip(tmp_path):
    g = np.random.default_rng(0)
    rows = [("w1", k, g.standard_normal(6)) for k in range(3)] + [("w0", k, g.standard_normal(6)) for k in range(2)]
    assert write_embedding_store(tmp_path / "store", rows) == 5
    back = read_embedding_store(tmp_path / "store")
    assert set(back) == {"w0", "w1"}
    np.testing.assert_allclose(back["w1"], np.stack([r[2] for r in rows[:3]]), rtol=1e-6)
    with pytest.raises(ValueError):
        write_embedding_store(tmp_path / "empty", [])


def test_lr_factor_warmup_and_cosine():
    assert lr_factor(0, 10, 100) == pytest.approx(0.1)
    assert lr_factor(9, 10, 100) == pytest.approx(1.0)
    assert lr_factor(10, 10, 100) == pytest.approx(1.0)
    assert lr_factor(55, 10, 100) == pytest.approx(0.5)
    assert lr_factor(100, 10, 100) == pytest.approx(0.0)


def train_cfg(**kw):
    base = dict(epochs=3, batch_size=4, learning_rate=1e-3, warmup_epochs=1, seed=0)
    base.update(kw)
    return MaeTrainConfig(**base)


def test_training_reduces_loss():
    torch.manual_seed(0)
    model = MaskedAutoencoder(TINY)
    imgs = images(16, seed=7)
    state = init_mae_state(model, train_cfg(epochs=40))
    losses = train_mae(state, imgs, train_cfg(epochs=40))
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])


def test_training_resume_is_exact():
    imgs = images(10, seed=8)
    cfg = train_cfg()

    torch.manual_seed(0)
    full = init_mae_state(MaskedAutoencoder(TINY), cfg)
    log = io.StringIO()
    ref = train_mae(full, imgs, cfg, log_file=log)

    torch.manual_seed(0)
    part = init_mae_state(MaskedAutoencoder(TINY), cfg)
    first = train_mae(part, imgs, cfg, until_step=4)
    saved = {"model": {k: v.clone() for k, v in part.model.state_dict().items()},
             "optimizer": part.optimizer.state_dict(), "step": part.step}
    torch.manual_seed(99)
    resumed = init_mae_state(MaskedAutoencoder(TINY), cfg)
    resumed.load_state_dict(saved)
    second = train_mae(resumed, imgs, cfg)

    assert first + second == ref
    for k, v in full.model.state_dict().items():
        assert torch.equal(v, resumed.model.state_dict()[k])
    records = [json.loads(line) for line in log.getvalue().splitlines()]
    assert [r["step"] for r in records] == list(range(1, len(ref) + 1))
