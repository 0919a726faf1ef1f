"""PNG read/write for float RGB images in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from holosplat.io import DataError


def read_image(path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Load as (H, W, 3) float32; ``size`` = (width, height) resizes with a box filter."""
    p = Path(path)
    try:
        with Image.open(p) as im:
            im = im.convert("RGB")
            if size is not None and im.size != tuple(size):
                im = im.resize(tuple(size), Image.BOX)
            arr = np.asarray(im, dtype=np.float32)
    except (OSError, ValueError) as e:
        raise DataError(f"{p}: cannot read image ({e})") from None
    return arr / 255.0


def to_uint8(img) -> np.ndarray:
    return (np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)


def write_image(path, img) -> None:
    Image.fromarray(to_uint8(img), "RGB").save(Path(path))


def write_depth(path, depth, alpha=None) -> None:
    """Depth as 16-bit grey PNG, normalised to the rendered range (0 = no coverage)."""
    d = np.asarray(depth, dtype=np.float64)
    if alpha is not None:
        with np.errstate(invalid="ignore", divide="ignore"):
            d = np.where(alpha > 1e-6, d / np.maximum(alpha, 1e-12), 0.0)
    hi = d.max() if d.size and d.max() > 0 else 1.0
    Image.fromarray((d / hi * 65535 + 0.5).astype(np.uint16)).save(Path(path))
