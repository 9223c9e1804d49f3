"""Image grids for visual inspection of occlusions and generated samples."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .data import write_image


def image_grid(rows: Sequence[Sequence[np.ndarray]], pad: int = 2, background: float = 255.0) -> np.ndarray:
    """Tile equally sized ``(3, H, W)`` images into a ``(3, H', W')`` grid, row-major."""
    n_rows = len(rows)
    n_cols = max(len(r) for r in rows)
    _, h, w = rows[0][0].shape
    grid = np.full((3, n_rows * (h + pad) + pad, n_cols * (w + pad) + pad), background, dtype=np.float32)
    for r, row in enumerate(rows):
        for c, img in enumerate(row):
            y, x = pad + r * (h + pad), pad + c * (w + pad)
            grid[:, y:y + h, x:x + w] = img
    return grid


def save_column_grids(out_dir: str | Path, columns: Sequence[Sequence[np.ndarray]], per_grid: int = 8,
                      prefix: str = "grid") -> list[Path]:
    """Each column is a tuple of images stacked vertically; ``per_grid`` columns per PNG."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, start in enumerate(range(0, len(columns), per_grid)):
        chunk = columns[start:start + per_grid]
        rows = [[col[r] for col in chunk] for r in range(len(chunk[0]))]
        path = out_dir / f"{prefix}_{k:03d}.png"
        write_image(path, image_grid(rows))
        paths.append(path)
    return paths
