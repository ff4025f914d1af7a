"""Filter visualization as binary PGM grids.

Each figure is one row of K x K tiles, one column per output channel
(channel-averaged), min-max normalized per figure with exact zero entries
forced to black and 1-pixel white separators between tiles.
"""

from __future__ import annotations

import csv
import io

import numpy as np


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=h * w).reshape(h, w)


def render_filter_grid(weight: np.ndarray) -> np.ndarray:
    """Render an (N, C, k, k) filter bank as one grayscale tile row.

    Output is (k, N*k + N - 1) uint8: channel-mean tiles normalized over
    the whole figure, exact zeros black, separators white.
    """
    n, _, kh, kw = weight.shape
    tiles = weight.mean(axis=1)  # (n, kh, kw)
    vmin, vmax = tiles.min(), tiles.max()
    if vmax > vmin:
        levels = np.rint((tiles - vmin) / (vmax - vmin) * 255.0).astype(np.uint8)
    else:
        levels = np.full(tiles.shape, 128, dtype=np.uint8)
    levels[tiles == 0.0] = 0
    img = np.full((kh, n * kw + n - 1), 255, dtype=np.uint8)
    for i in range(n):
        img[:, i * (kw + 1):i * (kw + 1) + kw] = levels[i]
    return img


def tile_bytes(img: np.ndarray, index: int, k: int) -> bytes:
    """Raw bytes of the tile at the given output-channel column."""
    return img[:, index * (k + 1):index * (k + 1) + k].tobytes()


def filters_csv(weight: np.ndarray) -> str:
    """Raw channel-mean tile values, one row per (filter, kernel row)."""
    tiles = weight.mean(axis=1)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["filter", "row"] + [f"col{j}" for j in range(tiles.shape[2])])
    for n in range(tiles.shape[0]):
        for i in range(tiles.shape[1]):
            w.writerow([n, i] + [repr(float(v)) for v in tiles[n, i]])
    return buf.getvalue()
