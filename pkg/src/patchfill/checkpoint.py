"""Binary checkpoint container: magic, JSON manifest, raw little-endian payload.

Layout:

    bytes 0..7   magic  b"PUTCKPT\\x01"
    bytes 8..15  u64 LE manifest length M
    bytes 16..16+M  UTF-8 JSON manifest (canonical: sorted keys, no spaces)
    remainder    tensor payload; each entry owns [offset, offset+nbytes)

The manifest holds a format version, an arbitrary config block, and one
entry per tensor (name, dtype, shape, offset, nbytes). Offsets are
relative to the payload start, assigned densely in manifest order, which
makes save -> load -> save byte-identical.
"""

from __future__ import annotations

import json
import math

import numpy as np

MAGIC = b"PUTCKPT\x01"
VERSION = 1

_ALLOWED_DTYPES = {"float32", "float64", "int64", "uint8"}


class CheckpointError(ValueError):
    """Corrupt, truncated, or incompatible checkpoint file."""


def save_checkpoint(path, tensors, config):
    """Write named arrays plus a config block; round-trips bitwise."""
    entries = []
    blobs = []
    offset = 0
    for name in tensors:
        arr = np.asarray(tensors[name])
        dtype = str(arr.dtype)
        if dtype not in _ALLOWED_DTYPES:
            raise CheckpointError(f"tensor '{name}' has unsupported dtype {dtype}")
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps(
        {"version": VERSION, "config": config, "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(manifest).to_bytes(8, "little"))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors dict, config dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    mlen = int.from_bytes(raw[len(MAGIC) : len(MAGIC) + 8], "little")
    header_end = len(MAGIC) + 8 + mlen
    if header_end > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[len(MAGIC) + 8 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest: {exc}") from exc
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: version {manifest.get('version')} != {VERSION}")

    payload = raw[header_end:]
    tensors = {}
    spans = []
    for entry in manifest["tensors"]:
        name, dtype = entry["name"], entry["dtype"]
        shape = tuple(entry["shape"])
        off, nbytes = entry["offset"], entry["nbytes"]
        if dtype not in _ALLOWED_DTYPES:
            raise CheckpointError(f"{path}: tensor '{name}' has unsupported dtype {dtype}")
        want = math.prod(shape) * np.dtype(dtype).itemsize
        if want != nbytes:
            raise CheckpointError(
                f"{path}: tensor '{name}' nbytes {nbytes} != shape/dtype size {want}"
            )
        if off < 0 or off + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor '{name}' span out of bounds")
        spans.append((off, off + nbytes, name))
        arr = np.frombuffer(payload[off : off + nbytes], dtype=np.dtype(dtype).newbyteorder("<"))
        tensors[name] = arr.astype(dtype).reshape(shape)
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointError(f"{path}: tensors '{n0}' and '{n1}' overlap")
    return tensors, manifest["config"]


# ----------------------------------------------------------------------
# model-level wrappers
# ----------------------------------------------------------------------

def save_vqvae(path, model):
    cfg = {
        "kind": "pvqvae",
        "model": model.config.to_dict(),
        "with_reference": model.decoder.with_reference,
    }
    state = dict(model.state())
    state["usage/e"] = model.codebook.usage
    state["usage/e_prime"] = model.codebook.usage_masked
    save_checkpoint(path, state, cfg)


def load_vqvae(path, expect=None):
    from . import tensor as T
    from .vqvae import PatchVQVAE, PVQVAEConfig

    state, cfg = load_checkpoint(path)
    if cfg.get("kind") != "pvqvae":
        raise CheckpointError(f"{path}: checkpoint kind {cfg.get('kind')!r}, wanted 'pvqvae'")
    config = PVQVAEConfig.from_dict(cfg["model"])
    _check_expectations(path, cfg["model"], expect)
    model = PatchVQVAE(config, T.rng(0), with_reference=cfg.get("with_reference", True))
    usage = state.pop("usage/e")
    usage_masked = state.pop("usage/e_prime")
    model.load_state(state)
    model.codebook.usage = np.array(usage, dtype=np.int64)
    model.codebook.usage_masked = np.array(usage_masked, dtype=np.int64)
    return model


def save_transformer(path, model):
    cfg = {"kind": "transformer", "model": model.config.to_dict()}
    save_checkpoint(path, model.state(), cfg)


def load_transformer(path, expect=None):
    from . import tensor as T
    from .transformer import TokenTransformer, TransformerConfig

    state, cfg = load_checkpoint(path)
    if cfg.get("kind") != "transformer":
        raise CheckpointError(f"{path}: checkpoint kind {cfg.get('kind')!r}, wanted 'transformer'")
    _check_expectations(path, cfg["model"], expect)
    model = TokenTransformer(TransformerConfig.from_dict(cfg["model"]), T.rng(0))
    model.load_state(state)
    return model


def _check_expectations(path, found, expect):
    if not expect:
        return
    for key, want in expect.items():
        got = found.get(key)
        if got != want:
            raise CheckpointError(f"{path}: config field '{key}' is {got!r}, expected {want!r}")
