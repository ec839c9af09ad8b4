"""Layers and the parameter-tree Module base used by all models."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Container whose Tensor attributes (recursively) are the parameters."""

    def params(self, prefix=""):
        """Flat name -> Tensor map over this module and its children."""
        out = {}
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.params(prefix=f"{key}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.params(prefix=f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{key}.{i}"] = item
        return out

    def zero_grad(self):
        for p in self.params().values():
            p.grad = None

    def state(self):
        return {name: np.array(p.data) for name, p in self.params().items()}

    def load_state(self, state):
        params = self.params()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise T.ShapeError(
                    f"param '{name}' shape {arr.shape} vs expected {p.data.shape}"
                )
            p.data = arr

    def param_hash(self):
        """Order-stable digest of all parameter bytes; used by freeze checks."""
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params()):
            h.update(name.encode())
            h.update(self.params()[name].data.tobytes())
        return h.hexdigest()


def _param(arr):
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, std=0.02):
        self.w = _param(rng.normal(0.0, std, size=(d_in, d_out)))
        self.b = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return T.linear(x, self.w, self.b)


class LinearHe(Linear):
    """Linear with fan-in scaled init for non-residual MLP stacks."""

    def __init__(self, d_in, d_out, rng, bias=True):
        super().__init__(d_in, d_out, rng, bias=bias, std=float(np.sqrt(2.0 / d_in)))


class LayerNorm(Module):
    def __init__(self, dim):
        self.gamma = _param(np.ones(dim))
        self.beta = _param(np.zeros(dim))

    def __call__(self, x):
        return T.layernorm(x, self.gamma, self.beta)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, pad=None, bias=True):
        fan_in = c_in * k * k
        std = np.sqrt(2.0 / fan_in)
        self.w = _param(rng.normal(0.0, std, size=(c_out, c_in, k, k)))
        self.b = _param(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.pad = (k // 2) if pad is None else pad

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class ResBlock(Module):
    """Two 3x3 convs with ReLU, additive skip."""

    def __init__(self, channels, rng):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng)

    def __call__(self, x):
        h = self.conv1(T.relu(x))
        h = self.conv2(T.relu(h))
        return x + h


class MLP(Module):
    """Linear stack with GELU between layers."""

    def __init__(self, dims, rng):
        self.layers = [LinearHe(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return x
