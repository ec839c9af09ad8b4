"""Adam/AdamW optimizers and the learning-rate / relaxation schedules."""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError


class OptimizerState:
    """Adam or AdamW with bias correction.

    ``adam`` folds weight decay into the gradient (classic L2), ``adamw``
    applies it decoupled from the moment estimates. Moments are float32
    arrays matching each parameter; the step counter advances once per
    ``step`` call.
    """

    def __init__(self, kind, beta1, beta2, eps=1e-8, weight_decay=0.0):
        if kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer kind '{kind}'")
        self.kind = kind
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = {}
        self._v = {}

    def step(self, params, grads, lr):
        """One update over ``params`` (dict name -> Tensor) using ``grads`` (name -> array)."""
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.data.shape:
                raise ShapeError(f"grad shape {g.shape} vs param '{name}' {p.data.shape}")
            if self.kind == "adam" and self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self._m[name] = m
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.kind == "adamw" and self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update


def adam_for_vqvae(weight_decay=0.0):
    """Adam with running-average coefficients 0 and 0.9."""
    return OptimizerState("adam", beta1=0.0, beta2=0.9, weight_decay=weight_decay)


def adamw_for_transformer(weight_decay=0.0):
    """AdamW with running-average coefficients 0.9 and 0.95."""
    return OptimizerState("adamw", beta1=0.9, beta2=0.95, weight_decay=weight_decay)


def lr_schedule(step, warmup_steps, peak_lr, total_steps, start_lr=0.0):
    """Linear ramp start_lr -> peak_lr over warmup, cosine decay to 0 at total_steps."""
    if warmup_steps < 1:
        raise ValueError("warmup_steps must be >= 1")
    if step < 0:
        raise ValueError("step must be >= 0")
    if step >= total_steps:
        return 0.0
    if step < warmup_steps:
        return start_lr + (peak_lr - start_lr) * step / warmup_steps
    frac = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def vqvae_lr(step, total_steps):
    """Warm up to 2e-4 over the first 5000 steps, then cosine decay."""
    return lr_schedule(step, 5000, 2e-4, total_steps)


def transformer_lr(step, total_steps):
    """Ramp 1e-5 -> 1.5e-3 over the first 20000 steps, then cosine decay."""
    return lr_schedule(step, 20000, 1.5e-3, total_steps, start_lr=1e-5)


GUMBEL_ANNEAL_STEPS = 5000
GUMBEL_TAU_START = 20.0
GUMBEL_TAU_END = 1e-6


def gumbel_schedule(step):
    """Relaxation temperature and noise scale for a training step.

    Temperature cosine-anneals 20 -> 1e-6 over the first 5000 steps and
    stays at the floor; the noise scale drops from 1 to 0.1 after step 5000.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    s = min(step, GUMBEL_ANNEAL_STEPS)
    frac = s / GUMBEL_ANNEAL_STEPS
    tau = GUMBEL_TAU_END + (GUMBEL_TAU_START - GUMBEL_TAU_END) * 0.5 * (
        1.0 + math.cos(math.pi * frac)
    )
    noise_scale = 1.0 if step <= GUMBEL_ANNEAL_STEPS else 0.1
    return tau, noise_scale
