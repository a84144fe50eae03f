"""PNG read/write, contact-sheet grids and atomic file writes."""
from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

GRID_SEPARATOR = 2


def atomic_write_bytes(path, data: bytes):
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def atomic_write_json(path, obj):
    atomic_write_bytes(path, dumps_json(obj).encode("utf-8"))


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray):
    """Store an (H, W, 3) float image in [0, 1] as lossless 8-bit PNG."""
    buf = io.BytesIO()
    PILImage.fromarray(quantize(img)).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_image(path, dtype=np.float32) -> np.ndarray:
    """Read any PIL-readable image as (H, W, 3) floats in [0, 1]."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return arr.astype(dtype) / 255.0


def make_grid(rows: Sequence[Sequence[np.ndarray]], sep: int = GRID_SEPARATOR,
              fill: float = 1.0) -> np.ndarray:
    """Tile images into a mosaic with ``sep``-pixel separators.

    Cells in a column/row may differ in size; each cell is top-left aligned
    inside its slot.
    """
    n_rows = len(rows)
    n_cols = max(len(r) for r in rows)
    heights = [max(im.shape[0] for im in r) for r in rows]
    widths = [max((r[c].shape[1] for r in rows if c < len(r)), default=0)
              for c in range(n_cols)]
    H = sum(heights) + sep * (n_rows - 1)
    W = sum(widths) + sep * (n_cols - 1)
    grid = np.full((H, W, 3), fill, dtype=np.float64)
    y = 0
    for r, row in enumerate(rows):
        x = 0
        for c, im in enumerate(row):
            grid[y:y + im.shape[0], x:x + im.shape[1]] = im
            x += widths[c] + sep
        y += heights[r] + sep
    return grid
