"""Corpus-level training loops with CSV logging; the CLI drives these."""

from __future__ import annotations

import csv
import os

import numpy as np

from . import checkpoint as ckpt
from . import imageio as IO
from . import tensor as T
from .optim import adam_for_vqvae, adamw_for_transformer, lr_schedule
from .transformer import train_step_transformer
from .vqvae import train_step_pvqvae

IMAGE_EXTENSIONS = (".png", ".ppm", ".pnm")


def load_corpus(path):
    """All images in a directory, sorted by name, stacked (N, H, W, 3)."""
    files = sorted(
        f for f in os.listdir(path) if f.lower().endswith(IMAGE_EXTENSIONS)
    )
    if not files:
        raise FileNotFoundError(f"no images ({'/'.join(IMAGE_EXTENSIONS)}) in {path}")
    images = [IO.load_image(os.path.join(path, f)) for f in files]
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise ValueError(f"corpus images disagree in shape: {sorted(shapes)}")
    return np.stack(images), files


class CsvLog:
    def __init__(self, path, fields):
        self.path = path
        self.fields = fields
        self._fh = open(path, "w", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=fields)
        self._writer.writeheader()

    def write(self, record):
        self._writer.writerow({k: record.get(k, "") for k in self.fields})
        self._fh.flush()

    def close(self):
        self._fh.close()


def train_pvqvae(model, images, out_dir, steps, seed, batch_size=8,
                 mask_ratio=(0.2, 0.5), lr_peak=3e-3, warmup=100,
                 relaxation=True, start_step=0, log_every=25, quiet=False):
    """Optimize a patch VQ-VAE on an in-memory corpus; returns the log path.

    Two independent stroke masks are drawn per image per step: one hides
    pixels from the encoder, the other erases reference pixels so the
    decoder cannot shortcut through the guidance branch.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = T.rng(seed)
    opt = adam_for_vqvae()
    h, w = model.config.image_size
    log = CsvLog(
        os.path.join(out_dir, "pvqvae_train.csv"),
        ["step", "loss", "recon", "codebook", "commit", "tau", "noise_scale", "lr", "codes_used"],
    )
    total = start_step + steps
    try:
        for step in range(start_step, total):
            sel = rng.integers(0, len(images), size=min(batch_size, len(images)))
            masks = np.stack([IO.generate_mask(h, w, mask_ratio, rng) for _ in sel])
            masks_p = np.stack([IO.generate_mask(h, w, mask_ratio, rng) for _ in sel])
            lr = lr_schedule(step, warmup, lr_peak, total)
            rec = train_step_pvqvae(
                model, opt, images[sel], masks, masks_p, step, total,
                relaxation=relaxation, rng=rng, lr=max(lr, 1e-8),
            )
            if step % log_every == 0 or step == total - 1 or step == start_step:
                log.write(rec)
                if not quiet:
                    print(
                        f"step {rec['step']}: loss={rec['loss']:.4f} "
                        f"recon={rec['recon']:.4f} codes={rec['codes_used']}"
                    )
    finally:
        log.close()
    path = os.path.join(out_dir, "pvqvae.ckpt")
    ckpt.save_vqvae(path, model)
    _annotate_steps(path, total)
    return path, log.path


def train_transformer(model, vqvae, images, out_dir, steps, seed, batch_size=4,
                      mask_ratio=(0.2, 0.5), lr_peak=None, warmup=None,
                      conditions=None, encoders=None, fixed_masks=None,
                      start_step=0, log_every=25, quiet=False):
    """Optimize the token predictor against a frozen VQ-VAE."""
    os.makedirs(out_dir, exist_ok=True)
    rng = T.rng(seed)
    opt = adamw_for_transformer()
    h, w = vqvae.config.image_size
    log = CsvLog(
        os.path.join(out_dir, "transformer_train.csv"),
        ["step", "loss", "masked_cells", "lr"],
    )
    total = start_step + steps
    try:
        for step in range(start_step, total):
            sel = rng.integers(0, len(images), size=min(batch_size, len(images)))
            if fixed_masks is not None:
                masks = fixed_masks[sel]
            else:
                masks = np.stack([IO.generate_mask(h, w, mask_ratio, rng) for _ in sel])
            lr = None
            if lr_peak is not None:
                lr = max(lr_schedule(step, warmup or 100, lr_peak, total), 1e-8)
            conds = None if conditions is None else [conditions[i] for i in sel]
            rec = train_step_transformer(
                model, vqvae, opt, images[sel], masks, step, total, rng,
                conditions=conds, encoders=encoders, lr=lr,
            )
            if step % log_every == 0 or step == total - 1 or step == start_step:
                log.write(rec)
                if not quiet:
                    print(f"step {rec['step']}: loss={rec['loss']:.4f}")
    finally:
        log.close()
    path = os.path.join(out_dir, "transformer.ckpt")
    ckpt.save_transformer(path, model)
    _annotate_steps(path, total)
    return path, log.path


def _annotate_steps(path, trained_steps):
    tensors, cfg = ckpt.load_checkpoint(path)
    cfg["trained_steps"] = trained_steps
    ckpt.save_checkpoint(path, tensors, cfg)


def trained_steps(path):
    _, cfg = ckpt.load_checkpoint(path)
    return int(cfg.get("trained_steps", 0))
