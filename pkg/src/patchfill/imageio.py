"""Image, mask, and condition-map file handling plus mask synthesis."""

from __future__ import annotations

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import tensor as T


class FormatError(ValueError):
    """Unreadable or unsupported image file."""


def load_image(path):
    """Read an 8-bit RGB image (PNG or binary PPM) as (H, W, 3) floats in [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise FormatError(f"unsupported format {im.format!r} for {path}")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    return (arr.astype(T.current_dtype()) / 255.0).astype(T.current_dtype())


def save_image(image, path):
    """Write (H, W, 3) floats in [0, 1] as 8-bit PNG or PPM (by extension)."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    im = Image.fromarray(data, mode="RGB")
    path = str(path)
    if path.endswith((".ppm", ".pnm")):
        im.save(path, format="PPM")
    else:
        im.save(path, format="PNG")


def image_to_png_bytes(image):
    import io as _io

    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    buf = _io.BytesIO()
    Image.fromarray(data, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_array(blob):
    """Decode PNG bytes to uint8 array; (H, W) for grayscale, (H, W, 3) for color."""
    import io as _io

    try:
        with Image.open(_io.BytesIO(blob)) as im:
            if im.mode in ("L", "P", "1", "I", "I;16"):
                return np.asarray(im.convert("L"), dtype=np.uint8)
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"cannot decode PNG payload: {exc}") from exc


def load_mask(path):
    """Read a mask PNG: any nonzero pixel counts as keep (1), zero as missing."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"cannot read mask {path}: {exc}") from exc
    return (arr > 0).astype(T.current_dtype())[..., None]


def save_mask(mask, path):
    arr = (np.asarray(mask).reshape(mask.shape[0], mask.shape[1]) > 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(str(path), format="PNG")


def load_semantic_map(path, num_ids):
    """Single-channel PNG whose pixel values are category ids < num_ids."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"cannot read semantic map {path}: {exc}") from exc
    if arr.max(initial=0) >= num_ids:
        raise ValueError(f"semantic map holds id {arr.max()} >= limit {num_ids}")
    return arr.astype(np.int64)


def save_semantic_map(sem, path):
    arr = np.asarray(sem)
    if arr.max(initial=0) > 255:
        raise ValueError("semantic ids beyond 255 cannot be stored in an 8-bit PNG")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(str(path), format="PNG")


# ----------------------------------------------------------------------
# stroke mask generator
# ----------------------------------------------------------------------

def _paint_stroke(hole, rng, width_range):
    """Random thick walk drawn into ``hole`` (True = missing pixel)."""
    h, w = hole.shape
    ys, xs = np.mgrid[0:h, 0:w]
    x = rng.uniform(0, w)
    y = rng.uniform(0, h)
    angle = rng.uniform(0, 2 * np.pi)
    width = rng.integers(width_range[0], width_range[1] + 1)
    n_seg = int(rng.integers(3, 8))
    for _ in range(n_seg):
        angle += rng.uniform(-1.0, 1.0)
        length = rng.uniform(0.1, 0.3) * max(h, w)
        x2 = np.clip(x + length * np.cos(angle), 0, w - 1)
        y2 = np.clip(y + length * np.sin(angle), 0, h - 1)
        steps = max(2, int(max(abs(x2 - x), abs(y2 - y))))
        for t in np.linspace(0.0, 1.0, steps):
            cx = x + (x2 - x) * t
            cy = y + (y2 - y) * t
            hole |= (xs - cx) ** 2 + (ys - cy) ** 2 <= (width / 2) ** 2
        x, y = x2, y2


def generate_mask(height, width, ratio_range, rng, max_tries=60):
    """Irregular stroke mask; the missing fraction lands inside ratio_range.

    Returns (H, W, 1) floats in {0, 1} with 1 = keep. Strokes are thick
    random walks; strokes accumulate until the hole fraction reaches the
    lower bound, restarting when it overshoots the upper bound.
    """
    lo, hi = ratio_range
    if not (0 < lo <= hi < 1):
        raise ValueError(f"ratio range must satisfy 0 < lo <= hi < 1, got {ratio_range}")
    width_hi = max(5, min(30, min(height, width) // 4))
    width_lo = min(5, width_hi)
    for _ in range(max_tries):
        hole = np.zeros((height, width), dtype=bool)
        for _ in range(200):
            _paint_stroke(hole, rng, (width_lo, width_hi))
            frac = hole.mean()
            if frac >= lo:
                break
        if lo <= hole.mean() <= hi:
            mask = (~hole).astype(T.current_dtype())
            return mask[..., None]
    raise RuntimeError(f"could not hit mask ratio {ratio_range} after {max_tries} tries")


def mask_ratio(mask):
    """Missing-pixel fraction of a keep-mask."""
    return float(1.0 - np.asarray(mask).mean())
