"""Token transformer: embedding blend, conditions, backbone, loss, training."""

import math

import numpy as np
import pytest

from patchfill import tensor as T
from patchfill import transformer as X
from patchfill import vqvae as V
from patchfill.optim import adamw_for_transformer
from patchfill.tensor import ShapeError, Tensor

from toydata import patch_mask, tiled_images


def toy_config(grid=(4, 4), vocab=32, feature_dim=16, input_dim=16, depth=2, heads=4,
               with_conditions=False, condition_dim=0):
    return X.TransformerConfig(
        depth=depth, heads=heads, grid=grid, vocab=vocab,
        feature_dim=feature_dim, input_dim=input_dim,
        with_conditions=with_conditions, condition_dim=condition_dim,
    )


def toy_model(seed=0, **kw):
    return X.TokenTransformer(toy_config(**kw), T.rng(seed))


# ----------------------------------------------------------------------
# embedding blend
# ----------------------------------------------------------------------

def test_embed_blend_extremes_and_midpoint():
    model = toy_model()
    rng = T.rng(1)
    feats = rng.normal(size=(1, 4, 4, 16)).astype(np.float32)
    adapted = (feats.reshape(-1, 16) @ model.adapter.w.data + model.adapter.b.data).reshape(1, 4, 4, 16)
    pos = model.embeddings.position.data
    mvec = model.embeddings.mask_embed.data

    for r in (0.0, 0.25, 0.5, 1.0):
        ratio = np.full((1, 4, 4, 1), r, dtype=np.float32)
        out = model.embed_input(feats, ratio).data
        expect = r * adapted + (1 - r) * mvec + pos
        assert np.allclose(out, expect, atol=1e-6)


def test_embed_mask_separation():
    # a fully masked cell and a zero-content unmasked cell embed differently
    model = toy_model()
    zeros = np.zeros((1, 4, 4, 16), dtype=np.float32)
    masked = model.embed_input(zeros, np.zeros((1, 4, 4, 1), dtype=np.float32)).data
    unmasked = model.embed_input(zeros, np.ones((1, 4, 4, 1), dtype=np.float32)).data
    assert not np.allclose(masked, unmasked)


def test_embed_rejects_wrong_grid():
    model = toy_model()
    with pytest.raises(ShapeError):
        model.embed_input(np.zeros((1, 3, 4, 16), dtype=np.float32), np.ones((1, 3, 4, 1)))


# ----------------------------------------------------------------------
# conditions
# ----------------------------------------------------------------------

def test_concat_channel_arithmetic():
    model = toy_model(with_conditions=True, condition_dim=16)
    feats = np.zeros((1, 4, 4, 16), dtype=np.float32)
    x = model.embed_input(feats, np.ones((1, 4, 4, 1), dtype=np.float32))
    out = model.concat_conditions(x)
    assert out.shape == (1, 4, 4, 48)
    assert model.config.hidden_dim == 48


def test_concat_placeholders_fill_absent_blocks():
    model = toy_model(with_conditions=True, condition_dim=16)
    feats = np.zeros((1, 4, 4, 16), dtype=np.float32)
    x = model.embed_input(feats, np.ones((1, 4, 4, 1), dtype=np.float32))
    out1 = model.concat_conditions(x).data
    out2 = model.concat_conditions(x).data
    assert np.array_equal(out1, out2)
    assert np.allclose(out1[0, 0, 0, 16:32], model.embeddings.placeholder_sem.data)
    assert np.allclose(out1[0, 0, 0, 32:], model.embeddings.placeholder_str.data)


def test_concat_swapping_absent_condition_changes_only_its_block():
    model = toy_model(with_conditions=True, condition_dim=16)
    rng = T.rng(2)
    feats = np.zeros((1, 4, 4, 16), dtype=np.float32)
    cond = rng.normal(size=(1, 4, 4, 16)).astype(np.float32)
    x = model.embed_input(feats, np.ones((1, 4, 4, 1), dtype=np.float32))
    sem_only = model.concat_conditions(x, sem_features=Tensor(cond)).data
    str_only = model.concat_conditions(x, str_features=Tensor(cond)).data
    assert np.array_equal(sem_only[..., :16], str_only[..., :16])
    assert not np.array_equal(sem_only[..., 16:32], str_only[..., 16:32])
    assert not np.array_equal(sem_only[..., 32:], str_only[..., 32:])


# ----------------------------------------------------------------------
# backbone
# ----------------------------------------------------------------------

def test_forward_rows_sum_to_one():
    model = toy_model()
    rng = T.rng(3)
    x = rng.normal(size=(2, 4, 4, 16)).astype(np.float32)
    probs = model.forward(x).data
    assert probs.shape == (2, 4, 4, 32)
    assert np.all(probs >= 0)
    assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-5)


def test_forward_pure_function():
    model = toy_model()
    rng = T.rng(4)
    feats = rng.normal(size=(1, 4, 4, 16)).astype(np.float32)
    ratio = (rng.random((1, 4, 4, 1)) > 0.5).astype(np.float32)
    a = model.predict(feats, ratio).data
    b = model.predict(feats, ratio).data
    assert a.tobytes() == b.tobytes()


def test_position_embeddings_break_permutation_invariance():
    model = toy_model()
    rng = T.rng(5)
    feats = rng.normal(size=(1, 4, 4, 16)).astype(np.float32)
    ratio = np.ones((1, 4, 4, 1), dtype=np.float32)
    base = model.predict(feats, ratio).data
    pos = model.embeddings.position.data
    swapped = pos.copy()
    swapped[0, 0], swapped[3, 3] = pos[3, 3].copy(), pos[0, 0].copy()
    model.embeddings.position.data = swapped
    assert not np.allclose(base, model.predict(feats, ratio).data)


def test_depth_zero_matches_linear_softmax_oracle():
    model = toy_model(depth=0)
    rng = T.rng(6)
    x = rng.normal(size=(1, 4, 4, 16)).astype(np.float32)
    probs = model.forward(x).data

    flat = x.reshape(-1, 16).astype(np.float64)
    mu = flat.mean(axis=1, keepdims=True)
    var = flat.var(axis=1, keepdims=True)
    normed = (flat - mu) / np.sqrt(var + 1e-5)
    logits = normed @ model.head.w.data + model.head.b.data
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    oracle = (e / e.sum(axis=1, keepdims=True)).reshape(1, 4, 4, 32)
    assert np.allclose(probs, oracle, atol=1e-5)


# ----------------------------------------------------------------------
# loss
# ----------------------------------------------------------------------

def test_loss_zero_on_perfect_prediction():
    targets = np.array([[0, 1], [2, 3]])
    probs = np.zeros((1, 2, 2, 4), dtype=np.float32)
    for i in range(2):
        for j in range(2):
            probs[0, i, j, targets[i, j]] = 1.0
    loss, warn = X.transformer_loss(Tensor(probs), targets[None], np.ones((1, 2, 2), bool))
    assert loss.item() == 0.0 and not warn


def test_loss_uniform_is_log_vocab():
    k = 8192
    probs = Tensor(np.full((1, 1, 1, k), 1.0 / k, dtype=np.float32))
    loss, _ = X.transformer_loss(probs, np.zeros((1, 1, 1), np.int64), np.ones((1, 1, 1), bool))
    assert loss.item() == pytest.approx(math.log(8192), rel=1e-4)
    assert loss.item() == pytest.approx(9.0109, abs=1e-3)


def test_loss_matches_direct_summation_oracle():
    rng = T.rng(7)
    raw = rng.random((1, 3, 3, 5)).astype(np.float32) + 0.1
    probs = raw / raw.sum(axis=-1, keepdims=True)
    targets = rng.integers(0, 5, size=(1, 3, 3))
    masked = rng.random((1, 3, 3)) > 0.4
    masked[0, 0, 0] = True  # keep nonempty
    loss, _ = X.transformer_loss(Tensor(probs), targets, masked)

    acc, count = 0.0, 0
    for i in range(3):
        for j in range(3):
            if masked[0, i, j]:
                acc += -math.log(probs[0, i, j, targets[0, i, j]])
                count += 1
    assert loss.item() == pytest.approx(acc / count, rel=1e-5)


def test_loss_ignores_unmasked_cells():
    rng = T.rng(8)
    raw = rng.random((1, 2, 2, 4)).astype(np.float32) + 0.1
    probs = raw / raw.sum(axis=-1, keepdims=True)
    targets = np.zeros((1, 2, 2), np.int64)
    masked = np.zeros((1, 2, 2), bool)
    masked[0, 0, 0] = True
    base, _ = X.transformer_loss(Tensor(probs), targets, masked)
    perturbed = probs.copy()
    perturbed[0, 1, 1] = np.roll(perturbed[0, 1, 1], 1)
    after, _ = X.transformer_loss(Tensor(perturbed), targets, masked)
    assert base.item() == after.item()


def test_loss_empty_mask_flags_warning():
    probs = Tensor(np.full((1, 2, 2, 4), 0.25, dtype=np.float32))
    loss, warn = X.transformer_loss(probs, np.zeros((1, 2, 2), np.int64), np.zeros((1, 2, 2), bool))
    assert loss.item() == 0.0 and warn


# ----------------------------------------------------------------------
# random input quantization
# ----------------------------------------------------------------------

def test_random_quantize_extremes():
    rng = T.rng(9)
    feats = rng.normal(size=(1, 4, 4, 8)).astype(np.float32)
    rows = rng.normal(size=(1, 4, 4, 8)).astype(np.float32)
    assert np.array_equal(X.random_quantize_inputs(Tensor(feats), rows, T.rng(0), p=0.0).data, feats)
    assert np.array_equal(X.random_quantize_inputs(Tensor(feats), rows, T.rng(0), p=1.0).data, rows)


def test_random_quantize_rate():
    rng = T.rng(10)
    n = 10_000
    feats = np.zeros((1, 100, 100, 1), dtype=np.float32)
    rows = np.ones((1, 100, 100, 1), dtype=np.float32)
    mixed = X.random_quantize_inputs(Tensor(feats), rows, rng, p=0.3).data
    rate = mixed.sum() / n
    assert abs(rate - 0.3) <= 0.02


# ----------------------------------------------------------------------
# unknown categories
# ----------------------------------------------------------------------

def test_substitute_zero_unknowns_is_identity():
    sem = np.array([[0, 1], [2, 0]])
    out = X.substitute_unknown_categories(sem, T.rng(0), num_known=4, num_unknown=0)
    assert np.array_equal(out, sem)


def test_substitute_single_category_forced_remap():
    sem = np.full((4, 4), 2)
    for seed in range(50):
        out = X.substitute_unknown_categories(sem, T.rng(seed), num_known=4, num_unknown=3)
        if not np.array_equal(out, sem):
            vals = np.unique(out)
            assert len(vals) == 1 and 4 <= vals[0] < 7
            break
    else:
        pytest.fail("no seed produced a remap in 50 tries")


def test_substitute_preserves_histogram():
    rng = T.rng(11)
    sem = rng.integers(0, 6, size=(16, 16))
    out = X.substitute_unknown_categories(sem, T.rng(12), num_known=6, num_unknown=4)
    before = sorted(np.bincount(sem.reshape(-1)).tolist())
    after = sorted(v for v in np.bincount(out.reshape(-1)).tolist() if v)
    assert [v for v in before if v] == after


def test_substitute_rejects_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        X.substitute_unknown_categories(np.array([[99]]), T.rng(0), num_known=4, num_unknown=2)


def test_semantic_planes_one_hot():
    sem = np.array([[0, 2], [1, 0]])
    planes = X.semantic_to_planes(sem, 3)
    assert planes.shape == (2, 2, 3)
    assert np.array_equal(planes.argmax(-1), sem)
    assert np.array_equal(planes.sum(-1), np.ones((2, 2)))


# ----------------------------------------------------------------------
# training step
# ----------------------------------------------------------------------

def small_vqvae(seed=0):
    cfg = V.PVQVAEConfig(patch_size=4, feature_dim=16, codebook_size=32,
                         codebook_size_masked=8, image_size=(16, 16))
    return V.PatchVQVAE(cfg, T.rng(seed))


def test_train_step_freezes_vqvae_and_starts_near_log_vocab():
    vq = small_vqvae()
    model = toy_model(grid=(4, 4), vocab=32, feature_dim=16, input_dim=16)
    opt = adamw_for_transformer()
    images = tiled_images(2, 16, 4, seed=13, bank_size=8)
    rng = T.rng(14)
    masks = np.stack([patch_mask(16, 16, 4, rng) for _ in range(2)])[..., 0][..., None]
    before = vq.param_hash()
    rec = X.train_step_transformer(model, vq, opt, images, masks, step=0,
                                   total_steps=100, rng=rng, lr=1e-3)
    assert vq.param_hash() == before
    assert all(p.grad is None for p in vq.params().values())
    assert abs(rec["loss"] - math.log(32)) < 1.0


def test_train_step_loss_decreases():
    vq = small_vqvae()
    model = toy_model(grid=(4, 4), vocab=32, feature_dim=16, input_dim=16)
    opt = adamw_for_transformer()
    images = tiled_images(1, 16, 4, seed=15, bank_size=8)
    rng = T.rng(16)
    mask = patch_mask(16, 16, 4, T.rng(17))[None]
    losses = []
    for s in range(60):
        rec = X.train_step_transformer(model, vq, opt, images, mask, step=s,
                                       total_steps=60, rng=rng, lr=3e-3)
        losses.append(rec["loss"])
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_train_step_empty_mask_no_update():
    vq = small_vqvae()
    model = toy_model(grid=(4, 4), vocab=32, feature_dim=16, input_dim=16)
    opt = adamw_for_transformer()
    images = tiled_images(1, 16, 4, seed=18, bank_size=8)
    ones = np.ones((1, 16, 16, 1), dtype=np.float32)
    before = model.param_hash()
    rec = X.train_step_transformer(model, vq, opt, images, ones, step=0,
                                   total_steps=10, rng=T.rng(19), lr=1e-3)
    assert rec["empty_mask"] and rec["loss"] == 0.0
    assert model.param_hash() == before


class _CountingEncoders:
    def __init__(self, inner):
        self.inner = inner
        self.sem_calls = 0
        self.str_calls = 0

    def semantic_features(self, m):
        self.sem_calls += 1
        return self.inner.semantic_features(m)

    def sketch_features(self, m):
        self.str_calls += 1
        return self.inner.sketch_features(m)


def test_condition_dropout_rate_and_gradients():
    vq = small_vqvae()
    model = toy_model(grid=(4, 4), vocab=32, feature_dim=16, input_dim=16,
                      with_conditions=True, condition_dim=16)
    sem_cfg = V.PVQVAEConfig(patch_size=4, feature_dim=16, codebook_size=8,
                             codebook_size_masked=4, image_size=(16, 16), in_channels=6)
    str_cfg = V.PVQVAEConfig(patch_size=4, feature_dim=16, codebook_size=8,
                             codebook_size_masked=4, image_size=(16, 16), in_channels=1)
    encoders = _CountingEncoders(X.ConditionEncoders(
        V.PatchVQVAE(sem_cfg, T.rng(20), with_reference=False),
        V.PatchVQVAE(str_cfg, T.rng(21), with_reference=False),
        num_known=4, num_unknown=2,
    ))
    opt = adamw_for_transformer()
    images = tiled_images(1, 16, 4, seed=22, bank_size=8)
    mask = patch_mask(16, 16, 4, T.rng(23))[None]
    conds = [X.ConditionSet(semantic=np.zeros((16, 16), np.int64),
                            sketch=np.zeros((16, 16), np.float32))]
    rng = T.rng(24)
    steps = 400
    for s in range(steps):
        X.train_step_transformer(model, vq, opt, images, mask, step=s, total_steps=steps,
                                 rng=rng, conditions=conds, encoders=encoders, lr=1e-4)
    # each condition is used unless dropped with p = 0.3
    assert abs(encoders.sem_calls / steps - 0.7) < 0.08
    assert abs(encoders.str_calls / steps - 0.7) < 0.08
