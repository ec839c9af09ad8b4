"""Transformer that predicts codebook tokens for masked patches.

Inputs are the continuous patch features from the VQ-VAE encoder, never
their quantized rows: quantization only defines the prediction targets.
Each cell's embedding blends a learned mask vector in proportion to its
missing-pixel ratio, then adds a learned position embedding. Optional
semantic and structural condition features are concatenated channel-wise,
with learned placeholders standing in for absent conditions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .optim import transformer_lr
from .tensor import ShapeError, Tensor


@dataclass
class TransformerConfig:
    depth: int
    heads: int
    grid: tuple
    vocab: int
    feature_dim: int  # encoder feature width entering the linear adapter
    input_dim: int  # adapter output width (position/mask embedding width)
    mlp_ratio: float = 4.0
    with_conditions: bool = False
    condition_dim: int = 0

    def __post_init__(self):
        if self.with_conditions and self.condition_dim < 1:
            raise ValueError("with_conditions needs a positive condition_dim")
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden dim {self.hidden_dim} not divisible by {self.heads} heads")

    @property
    def hidden_dim(self):
        if self.with_conditions:
            return self.input_dim + 2 * self.condition_dim
        return self.input_dim

    @property
    def cells(self):
        return self.grid[0] * self.grid[1]

    def to_dict(self):
        return {
            "depth": self.depth,
            "heads": self.heads,
            "grid": list(self.grid),
            "vocab": self.vocab,
            "feature_dim": self.feature_dim,
            "input_dim": self.input_dim,
            "mlp_ratio": self.mlp_ratio,
            "with_conditions": self.with_conditions,
            "condition_dim": self.condition_dim,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["grid"] = tuple(d["grid"])
        return cls(**d)


class EmbeddingSet(nn.Module):
    """Learned position grid, shared mask vector, and condition placeholders."""

    def __init__(self, cfg, rng):
        h, w = cfg.grid
        self.position = Tensor(rng.normal(0, 0.02, size=(h, w, cfg.input_dim)), requires_grad=True)
        self.mask_embed = Tensor(rng.normal(0, 0.02, size=(cfg.input_dim,)), requires_grad=True)
        if cfg.with_conditions:
            self.placeholder_sem = Tensor(
                rng.normal(0, 0.02, size=(cfg.condition_dim,)), requires_grad=True
            )
            self.placeholder_str = Tensor(
                rng.normal(0, 0.02, size=(cfg.condition_dim,)), requires_grad=True
            )


class SelfAttention(nn.Module):
    def __init__(self, dim, heads, rng):
        self.heads = heads
        self.q = nn.Linear(dim, dim, rng)
        self.k = nn.Linear(dim, dim, rng)
        self.v = nn.Linear(dim, dim, rng)
        self.out = nn.Linear(dim, dim, rng)

    def __call__(self, x):
        n, t, dim = x.shape
        dh = dim // self.heads

        def split(z):
            return T.transpose(T.reshape(z, (n, t, self.heads, dh)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * Tensor(1.0 / np.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        mixed = T.matmul(attn, v)
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (n, t, dim))
        return self.out(merged)


class Block(nn.Module):
    """Pre-norm transformer block: attention then GELU MLP, both residual."""

    def __init__(self, dim, heads, mlp_ratio, rng):
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden, rng)
        self.fc2 = nn.Linear(hidden, dim, rng)

    def __call__(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.fc2(T.gelu(self.fc1(self.norm2(x))))
        return x


class TokenTransformer(nn.Module):
    def __init__(self, config: TransformerConfig, rng):
        self.config = config
        self.adapter = nn.Linear(config.feature_dim, config.input_dim, rng)
        self.embeddings = EmbeddingSet(config, rng)
        self.blocks = [
            Block(config.hidden_dim, config.heads, config.mlp_ratio, rng)
            for _ in range(config.depth)
        ]
        self.final_norm = nn.LayerNorm(config.hidden_dim)
        self.head = nn.Linear(config.hidden_dim, config.vocab, rng)

    # -- input construction ---------------------------------------------
    def embed_input(self, features, patch_ratio):
        """Blend adapted features with the mask vector by unmasked ratio, add positions.

        The blend weight is the continuous ratio: a cell missing half its
        pixels carries half feature, half mask embedding.
        """
        if not isinstance(features, Tensor):
            features = Tensor(features)
        n, h, w, d = features.shape
        if (h, w) != tuple(self.config.grid):
            raise ShapeError(f"feature grid {(h, w)} vs configured {self.config.grid}")
        ratio = np.asarray(patch_ratio, dtype=T.current_dtype()).reshape(n, h, w, 1)
        adapted = self.adapter(features)
        r = Tensor(ratio)
        blended = adapted * r + T.reshape(self.embeddings.mask_embed, (1, 1, 1, -1)) * Tensor(
            1.0 - ratio
        )
        return blended + T.reshape(self.embeddings.position, (1, h, w, -1))

    def concat_conditions(self, embedded, sem_features=None, str_features=None):
        """Channel-concat (embedded, semantic, structural); placeholders fill gaps."""
        if not self.config.with_conditions:
            raise ValueError("model was configured without condition support")
        n, h, w, _ = embedded.shape
        d = self.config.condition_dim

        def block(feat, placeholder):
            if feat is None:
                return self._broadcast_placeholder(placeholder, n, h, w)
            if not isinstance(feat, Tensor):
                feat = Tensor(feat)
            if feat.shape != (n, h, w, d):
                raise ShapeError(f"condition features {feat.shape} vs {(n, h, w, d)}")
            return feat

        sem = block(sem_features, self.embeddings.placeholder_sem)
        stru = block(str_features, self.embeddings.placeholder_str)
        return T.concat([embedded, sem, stru], axis=3)

    def _broadcast_placeholder(self, placeholder, n, h, w):
        d = self.config.condition_dim
        return T.reshape(placeholder, (1, 1, 1, d)) * Tensor(
            np.ones((n, h, w, 1), dtype=T.current_dtype())
        )

    def mixed_condition_features(self, per_sample, placeholder):
        """Stack per-sample feature arrays, substituting the placeholder for None."""
        h, w = self.config.grid
        rows = []
        for feat in per_sample:
            if feat is None:
                rows.append(self._broadcast_placeholder(placeholder, 1, h, w))
            else:
                rows.append(Tensor(np.asarray(feat)[None]))
        return T.concat(rows, axis=0)

    # -- backbone ---------------------------------------------------------
    def forward(self, x):
        """(N, h, w, hidden) -> (N, h, w, K) probabilities summing to 1 per cell."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        n, h, w, dim = x.shape
        if dim != self.config.hidden_dim:
            raise ShapeError(f"input channels {dim} vs hidden dim {self.config.hidden_dim}")
        z = T.reshape(x, (n, h * w, dim))
        for block in self.blocks:
            z = block(z)
        z = self.final_norm(z)
        logits = self.head(z)
        probs = T.softmax(logits, axis=-1)
        return T.reshape(probs, (n, h, w, self.config.vocab))

    def predict(self, features, patch_ratio, sem_features=None, str_features=None):
        x = self.embed_input(features, patch_ratio)
        if self.config.with_conditions:
            x = self.concat_conditions(x, sem_features, str_features)
        return self.forward(x)


def transformer_loss(probs, targets, masked):
    """Mean negative log-probability of the true token over masked cells.

    Unmasked cells contribute nothing. An empty masked set yields a zero
    loss with the warning flag set.
    """
    targets = np.asarray(targets)
    masked = np.asarray(masked, dtype=bool)
    if probs.shape[:-1] != targets.shape or targets.shape != masked.shape:
        raise ShapeError(
            f"probs {probs.shape} / targets {targets.shape} / mask {masked.shape} disagree"
        )
    count = int(masked.sum())
    if count == 0:
        return Tensor(0.0), True
    gathered = T.gather_last(probs, targets)
    weights = Tensor(masked.astype(T.current_dtype()) / count)
    loss = -T.reduce_sum(T.log(gathered) * weights)
    return loss, False


def random_quantize_inputs(features, quantized_rows, rng, p=0.3):
    """Independently replace each cell's feature by its quantized row with probability p."""
    if not isinstance(features, Tensor):
        features = Tensor(features)
    rows = quantized_rows.data if isinstance(quantized_rows, Tensor) else np.asarray(quantized_rows)
    if rows.shape != features.shape:
        raise ShapeError(f"quantized rows {rows.shape} vs features {features.shape}")
    n, h, w, _ = features.shape
    replace = (rng.random(size=(n, h, w, 1)) < p).astype(T.current_dtype())
    return features * Tensor(1.0 - replace) + Tensor(rows * replace)


def substitute_unknown_categories(sem_map, rng, num_known, num_unknown):
    """Remap a random subset of known categories to distinct unknown ids.

    Draws n ~ Uniform{0..min(U, present known categories)}, then applies a
    bijection known -> unknown so the category histogram is preserved.
    """
    sem = np.asarray(sem_map)
    if sem.size and sem.max() >= num_known + num_unknown:
        raise ValueError(
            f"semantic id {sem.max()} out of range [0, {num_known + num_unknown})"
        )
    present = np.unique(sem)
    known_present = present[present < num_known]
    limit = min(num_unknown, len(known_present))
    n = int(rng.integers(0, limit + 1))
    if n == 0:
        return sem.copy()
    chosen = rng.choice(known_present, size=n, replace=False)
    unknown_ids = num_known + rng.choice(num_unknown, size=n, replace=False)
    out = sem.copy()
    for src, dst in zip(chosen, unknown_ids):
        out[sem == src] = dst
    return out


# ----------------------------------------------------------------------
# conditions
# ----------------------------------------------------------------------

@dataclass
class ConditionSet:
    """Optional user-drawn semantic and sketch maps for one image."""

    semantic: np.ndarray | None = None  # (H, W) int ids in [0, C+U)
    sketch: np.ndarray | None = None  # (H, W) binary

    @property
    def has_semantic(self):
        return self.semantic is not None

    @property
    def has_sketch(self):
        return self.sketch is not None


def semantic_to_planes(sem_map, num_ids):
    """(H, W) ids -> (H, W, num_ids) one-hot planes."""
    sem = np.asarray(sem_map)
    planes = np.zeros(sem.shape + (num_ids,), dtype=T.current_dtype())
    np.put_along_axis(planes, sem[..., None], 1.0, axis=-1)
    return planes


class ConditionEncoders(nn.Module):
    """Feature extractors for condition maps: two plain patch VQ-VAEs."""

    def __init__(self, semantic_vqvae, sketch_vqvae, num_known, num_unknown):
        self.semantic_vqvae = semantic_vqvae
        self.sketch_vqvae = sketch_vqvae
        self.num_known = num_known
        self.num_unknown = num_unknown

    def semantic_features(self, sem_map):
        planes = semantic_to_planes(sem_map, self.num_known + self.num_unknown)[None]
        return T.stop_gradient(self.semantic_vqvae.encode(planes))

    def sketch_features(self, sketch):
        plane = np.asarray(sketch, dtype=T.current_dtype()).reshape(
            1, sketch.shape[0], sketch.shape[1], 1
        )
        return T.stop_gradient(self.sketch_vqvae.encode(plane))


def train_step_transformer(model, vqvae, opt, images, masks, step, total_steps, rng,
                           p_quantize=0.3, conditions=None, encoders=None,
                           p_condition_drop=0.3, lr=None):
    """One transformer step against a frozen VQ-VAE.

    Ground-truth tokens come from the full images under an all-ones
    indicator, so targets always live in the unmasked-table vocabulary.
    Input features are the masked image's, each cell independently
    replaced by its quantized row with probability ``p_quantize``;
    condition features drop to placeholders with ``p_condition_drop``.
    """
    images = np.asarray(images, dtype=T.current_dtype())
    masks = np.asarray(masks, dtype=T.current_dtype())
    masked_imgs = images * masks
    c = vqvae.config
    pyr_mask = np.asarray(
        masks.reshape(masks.shape[0], *masks.shape[1:3], 1), dtype=T.current_dtype()
    )
    from .vqvae import ratio_pyramid

    ratio = ratio_pyramid(pyr_mask, c.levels)[-1]

    feats = T.stop_gradient(vqvae.encode(masked_imgs))
    ones = np.ones_like(ratio)
    targets = vqvae.codebook.quantize(
        T.stop_gradient(vqvae.encode(images)), ones, update_usage=False
    ).tokens
    replacement = vqvae.codebook.quantize(feats, ones, update_usage=False)
    mixed = random_quantize_inputs(feats, replacement.vectors.data, rng, p=p_quantize)

    x = model.embed_input(mixed, ratio)
    if model.config.with_conditions:
        sem_f = str_f = None
        if conditions is not None and encoders is not None:
            sem_rows = [
                encoders.semantic_features(cond.semantic).data[0]
                if cond.has_semantic and rng.random() >= p_condition_drop
                else None
                for cond in conditions
            ]
            str_rows = [
                encoders.sketch_features(cond.sketch).data[0]
                if cond.has_sketch and rng.random() >= p_condition_drop
                else None
                for cond in conditions
            ]
            sem_f = model.mixed_condition_features(sem_rows, model.embeddings.placeholder_sem)
            str_f = model.mixed_condition_features(str_rows, model.embeddings.placeholder_str)
        x = model.concat_conditions(x, sem_f, str_f)
    probs = model.forward(x)

    masked_cells = ratio.reshape(ratio.shape[0], *model.config.grid) < 1.0
    loss, empty = transformer_loss(probs, targets, masked_cells)

    params = model.params()
    model.zero_grad()
    if not empty:
        T.backward(loss, params=list(params.values()))
        lr_val = transformer_lr(step, total_steps) if lr is None else lr
        if lr_val > 0:
            opt.step(params, {k: p.grad for k, p in params.items()}, lr_val)
    else:
        lr_val = 0.0
    return {
        "step": step,
        "loss": loss.item(),
        "masked_cells": int(masked_cells.sum()),
        "empty_mask": empty,
        "lr": lr_val,
    }
