"""Iterative multi-patch inpainting driver.

Each iteration runs the transformer on the current feature grid (with
already-inpainted cells swapped for their codebook rows), picks the most
confident pending cells, and samples their tokens independently from
top-k2-truncated distributions. Finished token grids decode through the
reference-guided decoder, so every sample preserves unmasked pixels
bit-exactly and differs from its siblings only through its random stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .vqvae import (
    MaskedImage,
    PROV_INPAINTED,
    PROV_PENDING,
    PROV_UNMASKED,
)

ALL = None  # sentinel: inpaint every pending cell in one iteration


@dataclass
class SamplerConfig:
    k1: int | None = 20  # cells per iteration; None = all at once
    k2: int = 200  # tokens kept before sampling
    n_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.k1 is not None and self.k1 < 1:
            raise ValueError(f"k1 must be >= 1 or ALL, got {self.k1}")
        if self.k2 < 1:
            raise ValueError(f"k2 must be >= 1, got {self.k2}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")


def one_shot_config(k2=1, n_samples=1, seed=0):
    """Single-iteration preset: every masked patch sampled at once."""
    return SamplerConfig(k1=ALL, k2=k2, n_samples=n_samples, seed=seed)


def iteration_count(n_masked, k1):
    """Iterations needed to fill ``n_masked`` cells at ``k1`` per step."""
    if n_masked == 0:
        return 0
    if k1 is None:
        return 1
    if k1 < 1:
        raise ValueError(f"k1 must be >= 1, got {k1}")
    return math.ceil(n_masked / k1)


def sample_rng(seed, sample_index):
    """Independent stream per (seed, sample); replayable."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, sample_index))))


@dataclass
class SamplingSession:
    """State of one in-progress sample."""

    features: np.ndarray  # (h, w, D) original masked-image features
    patch_ratio: np.ndarray  # (h, w, 1)
    tokens: np.ndarray  # (h, w) global token ids
    provenance: np.ndarray  # (h, w) uint8
    rng: np.random.Generator
    iteration: int = 0
    sem_features: np.ndarray | None = None
    str_features: np.ndarray | None = None
    trace: list = field(default_factory=list)

    @property
    def pending(self):
        return self.provenance == PROV_PENDING

    @property
    def complete(self):
        return not self.pending.any()

    @property
    def masked_total(self):
        return int((self.provenance != PROV_UNMASKED).sum())


def start_session(vqvae, image, mask, rng, sem_features=None, str_features=None):
    """Encode a masked image and set up the token grid with provenance."""
    mi = MaskedImage.create(image, mask, vqvae.config.patch_size)
    feats = vqvae.encode(mi.pixels[None]).data[0]
    ratio = mi.patch_ratio
    q = vqvae.codebook.quantize(feats[None], ratio[None], update_usage=False)
    provenance = np.where(ratio[..., 0] == 1.0, PROV_UNMASKED, PROV_PENDING).astype(np.uint8)
    return SamplingSession(
        features=feats,
        patch_ratio=ratio,
        tokens=q.tokens[0].copy(),
        provenance=provenance,
        rng=rng,
        sem_features=sem_features,
        str_features=str_features,
    )


def replace_features(features, tokens, inpainted, codebook):
    """Swap inpainted cells' features for their retrieved codebook rows.

    ``inpainted`` is a boolean grid; those cells must hold tokens from the
    unmasked table (id < K). Everything else passes through untouched.
    """
    inpainted = np.asarray(inpainted, dtype=bool)
    out = np.array(features, copy=True)
    if not inpainted.any():
        return out
    ids = tokens[inpainted]
    if ids.min() < 0 or ids.max() >= codebook.size:
        raise ValueError(
            f"inpainted cells must hold unmasked-table tokens < {codebook.size}, "
            f"found max {ids.max()}"
        )
    out[inpainted] = codebook.e.data[ids]
    return out


def select_patches(probs, remaining, k1):
    """Top-k1 remaining cells by max token probability, lowest index first on ties."""
    probs = np.asarray(probs)
    remaining = np.asarray(remaining, dtype=bool)
    flat = np.flatnonzero(remaining.reshape(-1))
    if flat.size == 0:
        return []
    conf = probs.reshape(-1, probs.shape[-1]).max(axis=1)[flat]
    order = np.lexsort((flat, -conf))
    count = flat.size if k1 is None else min(k1, flat.size)
    w = probs.shape[1]
    return [(int(f // w), int(f % w)) for f in flat[order[:count]]]


def truncate_and_sample(dist, k2, rng):
    """Keep the k2 most likely tokens, renormalize, draw one.

    k2 == 1 is the deterministic argmax. Ties rank lower indices first.
    """
    dist = np.asarray(dist, dtype=np.float64)
    total = dist.sum()
    if not np.isfinite(total) or abs(total - 1.0) > 1e-5:
        raise ValueError(f"distribution must sum to 1 (got {total:.6f})")
    if k2 < 1:
        raise ValueError(f"k2 must be >= 1, got {k2}")
    k2 = min(k2, dist.size)
    support = np.argsort(-dist, kind="stable")[:k2]
    weights = dist[support]
    norm = weights.sum()
    if norm <= 0:
        raise ValueError("degenerate distribution: no mass on the truncated support")
    if k2 == 1:
        return int(support[0])
    return int(rng.choice(support, p=weights / norm))


def session_probs(session, vqvae, transformer):
    """One transformer forward on the replace-features view of the session."""
    inpainted = session.provenance == PROV_INPAINTED
    feats = replace_features(session.features, session.tokens, inpainted, vqvae.codebook)
    sem = None if session.sem_features is None else Tensor(session.sem_features[None])
    stru = None if session.str_features is None else Tensor(session.str_features[None])
    probs = transformer.predict(
        Tensor(feats[None]), session.patch_ratio[None], sem_features=sem, str_features=stru
    )
    return probs.data[0]


def step(session, vqvae, transformer, k1, k2):
    """One multi-token iteration; returns the list of cells filled."""
    if session.complete:
        raise RuntimeError("session already complete")
    if tuple(transformer.config.grid) != session.tokens.shape:
        raise ShapeError(
            f"model grid {transformer.config.grid} vs session grid {session.tokens.shape}"
        )
    probs = session_probs(session, vqvae, transformer)
    chosen = select_patches(probs, session.pending, k1)
    for i, j in chosen:
        token = truncate_and_sample(probs[i, j], k2, session.rng)
        session.tokens[i, j] = token
        session.provenance[i, j] = PROV_INPAINTED
    session.iteration += 1
    session.trace.append(chosen)
    return chosen


def finish(session, vqvae, image, mask):
    """Decode the completed token grid against the masked input."""
    if not session.complete:
        raise RuntimeError("session incomplete: pending cells remain")
    rows = vqvae.lookup(session.tokens[None])
    masked = np.asarray(image, dtype=T.current_dtype()) * np.asarray(
        mask, dtype=T.current_dtype()
    )
    out = vqvae.decode(rows, np.asarray(mask)[None], masked[None])
    return np.asarray(out.data[0])


@dataclass
class InpaintResult:
    images: list
    token_grids: list
    traces: list
    iterations: int
    masked_cells: int


def check_model_pair(vqvae, transformer):
    """The sampler needs a matched encoder/predictor pair."""
    problems = []
    if tuple(transformer.config.grid) != tuple(vqvae.config.grid):
        problems.append(f"grid {transformer.config.grid} vs {vqvae.config.grid}")
    if transformer.config.vocab != vqvae.codebook.size:
        problems.append(f"vocab {transformer.config.vocab} vs codebook {vqvae.codebook.size}")
    if transformer.config.feature_dim != vqvae.config.feature_dim:
        problems.append(
            f"feature dim {transformer.config.feature_dim} vs {vqvae.config.feature_dim}"
        )
    if problems:
        raise ValueError("inconsistent model pair: " + "; ".join(problems))


def inpaint(vqvae, transformer, image, mask, config: SamplerConfig,
            sem_features=None, str_features=None):
    """Produce ``n_samples`` pluralistic completions of one masked image.

    Samples share the encoded features and differ only via their random
    streams, derived independently from (seed, sample index). The empty
    mask short-circuits: the input comes back unchanged in zero iterations.
    """
    check_model_pair(vqvae, transformer)
    image = np.asarray(image, dtype=T.current_dtype())
    mask = np.asarray(mask, dtype=T.current_dtype())
    if mask.ndim == 2:
        mask = mask[..., None]
    vals = np.unique(mask)
    if not np.all(np.isin(vals, (0.0, 1.0))):
        raise ValueError(f"mask must be binary, found values {vals[:5]}")
    if image.shape[:2] != tuple(vqvae.config.image_size):
        raise ShapeError(f"image size {image.shape[:2]} vs model {vqvae.config.image_size}")
    if (sem_features is not None or str_features is not None) and not transformer.config.with_conditions:
        raise ValueError("conditions passed to a model trained without condition support")

    base = start_session(vqvae, image, mask, sample_rng(config.seed, 0))
    masked_cells = base.masked_total
    expected = iteration_count(masked_cells, config.k1)
    if masked_cells == 0:
        grids = [base.tokens.copy() for _ in range(config.n_samples)]
        return InpaintResult(
            images=[image.copy() for _ in range(config.n_samples)],
            token_grids=grids,
            traces=[[] for _ in range(config.n_samples)],
            iterations=0,
            masked_cells=0,
        )

    images, grids, traces = [], [], []
    for s in range(config.n_samples):
        session = start_session(
            vqvae, image, mask, sample_rng(config.seed, s),
            sem_features=sem_features, str_features=str_features,
        )
        while not session.complete:
            step(session, vqvae, transformer, config.k1, config.k2)
        if session.iteration != expected:
            raise AssertionError(
                f"session ran {session.iteration} iterations, expected {expected}"
            )
        images.append(finish(session, vqvae, image, mask))
        grids.append(session.tokens.copy())
        traces.append(list(session.trace))
    return InpaintResult(
        images=images, token_grids=grids, traces=traces,
        iterations=expected, masked_cells=masked_cells,
    )
