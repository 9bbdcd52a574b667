"""Grayscale heatmaps of correlation maps (binary PGM, optional PNG)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .core import CorrelationMap


def _values(m) -> np.ndarray:
    return m.values if isinstance(m, CorrelationMap) else np.asarray(m, dtype=np.float64)


def shared_max(maps: Sequence) -> float:
    return max(float(np.max(_values(m))) for m in maps)


def to_gray(values: np.ndarray, vmax: float) -> np.ndarray:
    """Linear map of ``[0, vmax]`` onto 0..255; negatives clip to black."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("map contains non-finite values")
    if vmax <= 0:
        return np.zeros(values.shape, np.uint8)
    return np.rint(np.clip(values / vmax, 0.0, 1.0) * 255).astype(np.uint8)


def write_pgm(gray: np.ndarray, path) -> Path:
    path = Path(path)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], np.uint8).reshape(h, w)


def render_heatmap(cmap, path, shared_with: Sequence | None = None, png: bool = False) -> Path:
    """Render ``cmap`` to ``path``.

    With ``shared_with`` the brightness ceiling is the maximum over those maps
    (so main and control renders are comparable); otherwise it is the map's
    own maximum.
    """
    values = _values(cmap)
    vmax = shared_max(shared_with) if shared_with else float(np.max(values))
    gray = to_gray(values, vmax)
    out = write_pgm(gray, path)
    if png:
        from PIL import Image

        Image.fromarray(gray, mode="L").save(Path(path).with_suffix(".png"))
    return out
