"""Patch-based VQ-VAE with a dual codebook and a reference-guided decoder.

Images are split into non-overlapped r x r patches; each patch is encoded
independently by a shared MLP. Features quantize against one of two latent
tables depending on whether the patch is fully unmasked (ratio exactly 1)
or contains missing pixels. The decoder upsamples quantized vectors back
to pixels while a reference branch injects features of the masked input at
every scale, so unmasked pixels survive decoding bit-exactly (a final
mask composite makes that a hard guarantee).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .optim import gumbel_schedule, vqvae_lr
from .tensor import ShapeError, Tensor

PROV_UNMASKED = 0
PROV_PENDING = 1
PROV_INPAINTED = 2


@dataclass
class PVQVAEConfig:
    patch_size: int = 8
    feature_dim: int = 256
    codebook_size: int = 8192
    codebook_size_masked: int = 1024
    image_size: tuple = (256, 256)
    commitment_beta: float = 0.25
    in_channels: int = 3

    def __post_init__(self):
        h, w = self.image_size
        r = self.patch_size
        if r < 1 or h % r or w % r:
            raise ValueError(f"image size {self.image_size} not divisible by patch size {r}")
        if r & (r - 1):
            raise ValueError(f"patch size must be a power of two, got {r}")
        if min(self.codebook_size, self.codebook_size_masked, self.feature_dim) < 1:
            raise ValueError("codebook sizes and feature dim must be >= 1")

    @property
    def grid(self):
        return (self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size)

    @property
    def levels(self):
        return self.patch_size.bit_length() - 1

    def to_dict(self):
        return {
            "patch_size": self.patch_size,
            "feature_dim": self.feature_dim,
            "codebook_size": self.codebook_size,
            "codebook_size_masked": self.codebook_size_masked,
            "image_size": list(self.image_size),
            "commitment_beta": self.commitment_beta,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


# ----------------------------------------------------------------------
# masks and patches
# ----------------------------------------------------------------------

def ratio_pyramid(mask, levels):
    """Per-level unmasked ratios; level l is the mean over 2^l x 2^l blocks.

    ``mask`` is (N, H, W, 1) with values in {0, 1}. Level 0 is the mask
    itself; every dyadic mean is exact in float32.
    """
    mask = np.asarray(mask, dtype=T.current_dtype())
    out = [mask]
    cur = mask
    for _ in range(levels):
        n, h, w, _ = cur.shape
        cur = cur.reshape(n, h // 2, 2, w // 2, 2, 1).mean(axis=(2, 4))
        out.append(cur)
    return out


@dataclass
class MaskedImage:
    """Image with a keep-mask and its patch-ratio pyramid.

    ``pixels`` stores x * m (missing pixels zeroed). ``ratios[l]`` holds
    the unmasked ratio at scale H/2^l; ``ratios[levels]`` is the per-patch
    indicator used for quantization.
    """

    pixels: np.ndarray
    mask: np.ndarray
    ratios: list = field(repr=False)

    @classmethod
    def create(cls, image, mask, patch_size):
        image = np.asarray(image, dtype=T.current_dtype())
        mask = np.asarray(mask, dtype=T.current_dtype())
        if mask.ndim == 2:
            mask = mask[..., None]
        if image.shape[:2] != mask.shape[:2]:
            raise ShapeError(f"image {image.shape} vs mask {mask.shape}")
        vals = np.unique(mask)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise ValueError(f"mask must be binary, found values {vals[:5]}")
        levels = patch_size.bit_length() - 1
        pyramid = ratio_pyramid(mask[None], levels)
        return cls(pixels=image * mask, mask=mask, ratios=[p[0] for p in pyramid])

    @property
    def patch_ratio(self):
        return self.ratios[-1]


def partition_patches(images, patch_size):
    """(N, H, W, C) -> (N, h*w, r*r*C), row-major patch order, no overlap."""
    images = np.asarray(images)
    n, h, w, c = images.shape
    r = patch_size
    if h % r or w % r:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {r}")
    gh, gw = h // r, w // r
    x = images.reshape(n, gh, r, gw, r, c)
    return np.ascontiguousarray(x.transpose(0, 1, 3, 2, 4, 5)).reshape(n, gh * gw, r * r * c)


def assemble_patches(patches, grid, patch_size, channels):
    """Exact inverse of partition_patches."""
    gh, gw = grid
    r = patch_size
    n = patches.shape[0]
    x = patches.reshape(n, gh, gw, r, r, channels)
    return np.ascontiguousarray(x.transpose(0, 1, 3, 2, 4, 5)).reshape(n, gh * r, gw * r, channels)


# ----------------------------------------------------------------------
# dual codebook
# ----------------------------------------------------------------------

@dataclass
class QuantizeResult:
    tokens: np.ndarray  # (N, h, w) global token ids
    vectors: Tensor  # (N, h, w, D) differentiable rows


class DualCodebook(nn.Module):
    """Two latent tables: rows 0..K-1 for unmasked patches, K..K+K'-1 for masked."""

    def __init__(self, size, size_masked, dim, rng):
        self.e = Tensor(rng.uniform(-1.0 / size, 1.0 / size, size=(size, dim)), requires_grad=True)
        self.e_prime = Tensor(
            rng.uniform(-1.0 / size_masked, 1.0 / size_masked, size=(size_masked, dim)),
            requires_grad=True,
        )
        self.usage = np.zeros(size, dtype=np.int64)
        self.usage_masked = np.zeros(size_masked, dtype=np.int64)

    @property
    def size(self):
        return self.e.shape[0]

    @property
    def size_masked(self):
        return self.e_prime.shape[0]

    @property
    def total(self):
        return self.size + self.size_masked

    def _select(self, flat, table, tau=None, noise_scale=None, rng=None):
        """Nearest-row index per feature; optionally with Gumbel-perturbed distances.

        ``d`` is the Euclidean distance to each row. The relaxed rule ranks
        rows by softmax((noise*g - d) / tau); softmax is monotone, so argmax
        of its argument gives the same index without materializing the
        exponentials. noise_scale == 0 is exactly the hard rule for any
        tau > 0.
        """
        if table.shape[0] == 0:
            raise ValueError("empty codebook")
        d2 = (
            (flat**2).sum(axis=1, keepdims=True)
            - 2.0 * flat @ table.data.T
            + (table.data**2).sum(axis=1)
        )
        d = np.sqrt(np.maximum(d2, 0.0))
        if tau is None or noise_scale is None:
            return np.argmin(d, axis=1)
        if tau <= 0:
            raise ValueError(f"gumbel temperature must be positive, got {tau}")
        u = rng.random(size=d.shape)
        g = -np.log(-np.log(u + 1e-12) + 1e-12)
        score = (noise_scale * g - d) / tau
        return np.argmax(score, axis=1)

    def quantize(self, features, patch_ratio, mode="hard", tau=None, noise_scale=None, rng=None,
                 update_usage=True):
        """Quantize (N, h, w, D) features; cells with ratio 1 use table e, others e'."""
        fvals = features.data if isinstance(features, Tensor) else np.asarray(features)
        n, h, w, dim = fvals.shape
        ratio = np.asarray(patch_ratio).reshape(n, h, w)
        flat = fvals.reshape(-1, dim)
        unmasked = ratio.reshape(-1) == 1.0

        kwargs = {}
        if mode == "gumbel":
            if rng is None:
                raise ValueError("gumbel mode needs an rng")
            kwargs = {"tau": tau, "noise_scale": noise_scale, "rng": rng}
        elif mode != "hard":
            raise ValueError(f"unknown quantize mode '{mode}'")

        tokens = np.zeros(flat.shape[0], dtype=np.int64)
        if unmasked.any():
            tokens[unmasked] = self._select(flat[unmasked], self.e, **kwargs)
        if (~unmasked).any():
            tokens[~unmasked] = self.size + self._select(flat[~unmasked], self.e_prime, **kwargs)

        if update_usage:
            self.usage += np.bincount(tokens[unmasked], minlength=self.size)
            self.usage_masked += np.bincount(
                tokens[~unmasked] - self.size, minlength=self.size_masked
            )

        table = T.concat([self.e, self.e_prime], axis=0)
        vectors = T.reshape(T.embed_lookup(table, tokens), (n, h, w, dim))
        return QuantizeResult(tokens=tokens.reshape(n, h, w), vectors=vectors)

    def lookup(self, tokens):
        """Token ids -> latent rows as a plain array; rejects out-of-range ids."""
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.total):
            raise ValueError(
                f"token out of range [0, {self.total}): min={tokens.min()}, max={tokens.max()}"
            )
        full = np.concatenate([self.e.data, self.e_prime.data], axis=0)
        return full[tokens]


# ----------------------------------------------------------------------
# decoder with reference guidance
# ----------------------------------------------------------------------

def fuse_reference(main, ref, ratio):
    """Per-cell select: reference features where ratio == 1, main elsewhere.

    The indicator truncates the ratio: only a fully unmasked cell (ratio
    exactly 1) takes the reference path. Inputs are NCHW; ``ratio`` is
    (N, 1, H, W) and is treated as a constant.
    """
    main_shape = main.shape if isinstance(main, Tensor) else np.shape(main)
    ref_shape = ref.shape if isinstance(ref, Tensor) else np.shape(ref)
    if tuple(main_shape) != tuple(ref_shape):
        raise ShapeError(f"fuse: main {main_shape} vs reference {ref_shape}")
    ind = (np.asarray(ratio) == 1.0).astype(T.current_dtype())
    if not isinstance(main, Tensor):
        main = Tensor(main)
    if not isinstance(ref, Tensor):
        ref = Tensor(ref)
    return main * Tensor(1.0 - ind) + ref * Tensor(ind)


class GuidedDecoder(nn.Module):
    """Upsampling stack from the token grid back to pixels.

    Main branch: 1x1 conv, then per level [nearest x2, 3x3 conv halving
    channels, 2 ResBlocks], then a 3x3 conv to the output channels behind
    a sigmoid. The optional reference branch mirrors the scales downward
    from the masked input image and is fused in at every level.
    """

    def __init__(self, dim, levels, rng, out_channels=3, with_reference=True):
        if dim % (1 << levels):
            raise ValueError(f"feature dim {dim} must be divisible by 2^{levels}")
        self.levels = levels
        chans = [dim >> (levels - l) for l in range(levels + 1)]  # chans[l] at level l
        self.head = nn.Conv2d(dim, dim, 1, rng, pad=0)
        self.stage_convs = [nn.Conv2d(chans[l], chans[l - 1], 3, rng) for l in range(levels, 0, -1)]
        self.stage_blocks = [
            [nn.ResBlock(chans[l - 1], rng), nn.ResBlock(chans[l - 1], rng)]
            for l in range(levels, 0, -1)
        ]
        self.final = nn.Conv2d(chans[0], out_channels, 3, rng)
        self.with_reference = with_reference
        if with_reference:
            self.ref_in = nn.Conv2d(out_channels, chans[0], 3, rng)
            self.ref_convs = [nn.Conv2d(chans[l - 1], chans[l], 3, rng) for l in range(1, levels + 1)]

    def reference_features(self, ref_img):
        """Multi-scale features of the reference image, level 0 .. levels (NCHW)."""
        feats = [self.ref_in(ref_img)]
        for conv in self.ref_convs:
            feats.append(conv(T.downsample_nearest2x(T.relu(feats[-1]))))
        return feats

    def __call__(self, vectors, ratios=None, ref_img=None):
        """vectors: (N, D, h, w). ratios: per-level (N,1,·,·) arrays, index = level.

        With ``ref_img`` omitted the main branch runs alone (plain
        reconstruction); passing one requires the branch to exist.
        """
        x = self.head(vectors)
        refs = None
        if ref_img is not None:
            if not self.with_reference:
                raise ValueError("decoder was built without a reference branch")
            if ratios is None:
                raise ValueError("reference decoding needs the ratio pyramid")
            refs = self.reference_features(ref_img)
        for i, l in enumerate(range(self.levels, 0, -1)):
            if refs is not None:
                x = fuse_reference(x, refs[l], ratios[l])
            x = self.stage_convs[i](T.upsample_nearest2x(x))
            for block in self.stage_blocks[i]:
                x = block(x)
        if refs is not None:
            x = fuse_reference(x, refs[0], ratios[0])
        return T.sigmoid(self.final(x))


# ----------------------------------------------------------------------
# the model
# ----------------------------------------------------------------------

def _nhwc_to_nchw(x):
    return np.ascontiguousarray(np.transpose(x, (0, 3, 1, 2)))


class PatchVQVAE(nn.Module):
    def __init__(self, config: PVQVAEConfig, rng, with_reference=True):
        c = config
        self.config = c
        r, d = c.patch_size, c.feature_dim
        self.encoder = nn.MLP([r * r * c.in_channels, 2 * d, 2 * d, d], rng)
        # Codebook rows start near zero (uniform +-1/K); features need O(1)
        # spread so the unit-scale selection noise only perturbs near-ties.
        self.encoder.layers[-1].w.data *= 3.0
        self.codebook = DualCodebook(c.codebook_size, c.codebook_size_masked, d, rng)
        self.decoder = GuidedDecoder(
            d, c.levels, rng, out_channels=c.in_channels, with_reference=with_reference
        )

    def encode(self, images):
        """(N, H, W, C) pixels -> (N, h, w, D) per-patch features (no cross-patch mixing)."""
        images = np.asarray(images, dtype=T.current_dtype())
        n = images.shape[0]
        if images.shape[1:3] != tuple(self.config.image_size):
            raise ShapeError(
                f"expected image size {self.config.image_size}, got {images.shape[1:3]}"
            )
        patches = partition_patches(images, self.config.patch_size)
        feats = self.encoder(Tensor(patches))
        gh, gw = self.config.grid
        return T.reshape(feats, (n, gh, gw, self.config.feature_dim))

    def quantize(self, features, patch_ratio, mode="hard", tau=None, noise_scale=None, rng=None):
        return self.codebook.quantize(
            features, patch_ratio, mode=mode, tau=tau, noise_scale=noise_scale, rng=rng
        )

    def decode(self, vectors, mask, reference):
        """Reconstruct pixels from latent vectors, guided by and composited with the reference.

        ``vectors``: (N, h, w, D) Tensor or array. ``mask``: (N, H, W, 1)
        binary keep-mask. ``reference``: (N, H, W, C) masked image. Output
        pixels equal the reference bit-exactly wherever mask == 1.
        """
        if not isinstance(vectors, Tensor):
            vectors = Tensor(vectors)
        mask = np.asarray(mask, dtype=T.current_dtype())
        reference = np.asarray(reference, dtype=T.current_dtype())
        pyr = ratio_pyramid(mask, self.config.levels)
        ratios = [_nhwc_to_nchw(p) for p in pyr]
        out = self.decoder(
            T.transpose(vectors, (0, 3, 1, 2)),
            ratios=ratios,
            ref_img=Tensor(_nhwc_to_nchw(reference)),
        )
        out = T.transpose(out, (0, 2, 3, 1))
        m = Tensor(mask)
        return Tensor(reference) * m + out * Tensor(1.0 - mask)

    def decode_plain(self, vectors):
        """Main branch only; used for plain reconstruction and condition encoders."""
        if not isinstance(vectors, Tensor):
            vectors = Tensor(vectors)
        out = self.decoder(T.transpose(vectors, (0, 3, 1, 2)))
        return T.transpose(out, (0, 2, 3, 1))

    def lookup(self, tokens):
        return self.codebook.lookup(tokens)


def vqvae_loss(target, recon, features, vectors, beta):
    """L1 reconstruction + codebook pull + beta * commitment.

    ``recon`` comes from decoding the straight-through vectors, so its
    gradient reaches the encoder through ``features`` unchanged while the
    codebook rows train only via the middle term.
    """
    target_t = Tensor(np.asarray(target, dtype=T.current_dtype()))
    recon_term = T.reduce_mean(T.absolute(recon - target_t))
    cb_term = T.reduce_mean((T.stop_gradient(features) - vectors) * (T.stop_gradient(features) - vectors))
    commit_term = T.reduce_mean((features - T.stop_gradient(vectors)) * (features - T.stop_gradient(vectors)))
    total = recon_term + cb_term + Tensor(beta) * commit_term
    return total, recon_term, cb_term, commit_term


def train_step_pvqvae(model, opt, images, masks, masks_prime, step, total_steps,
                      relaxation=True, rng=None, lr=None):
    """One optimization step on a batch.

    ``masks`` hides pixels from the encoder; ``masks_prime`` additionally
    erases reference pixels so the decoder cannot copy everything through
    the guidance branch. Quantization follows the relaxation schedule
    unless ``relaxation`` is off.
    """
    c = model.config
    images = np.asarray(images, dtype=T.current_dtype())
    masks = np.asarray(masks, dtype=T.current_dtype())
    masks_prime = np.asarray(masks_prime, dtype=T.current_dtype())
    masked = images * masks

    pyr = ratio_pyramid(masks, c.levels)
    feats = model.encode(masked)

    tau, noise_scale = gumbel_schedule(step)
    if relaxation:
        q = model.quantize(feats, pyr[-1], mode="gumbel", tau=tau, noise_scale=noise_scale, rng=rng)
    else:
        q = model.quantize(feats, pyr[-1], mode="hard")

    st = T.straight_through(feats, q.vectors)
    both = masks * masks_prime
    recon = model.decode(st, both, masked * masks_prime)
    total, rec, cb, commit = vqvae_loss(images, recon, feats, q.vectors, c.commitment_beta)

    params = model.params()
    model.zero_grad()
    T.backward(total, params=list(params.values()))
    lr_val = vqvae_lr(step, total_steps) if lr is None else lr
    if lr_val > 0:
        opt.step(params, {k: p.grad for k, p in params.items()}, lr_val)
    return {
        "step": step,
        "loss": total.item(),
        "recon": rec.item(),
        "codebook": cb.item(),
        "commit": commit.item(),
        "tau": tau,
        "noise_scale": noise_scale,
        "lr": lr_val,
        "codes_used": int((model.codebook.usage > 0).sum()),
    }
