"""Image-quality metrics used by the experiment runners."""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from ..errors import ConfigurationError, DimensionError
from ..seam import seam_mask
from ..uncertainty import perceptual_distance
from ..wang import TileSet, TilingMap

PSNR_CAP = 99.0


def compute_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1], capped at 99 dB."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _fill(img: np.ndarray, hole: np.ndarray) -> np.ndarray:
    """Replace ``hole`` pixels by repeated 3x3 normalised averaging of known neighbours."""
    out = img.copy()
    known = ~hole
    kernel = np.ones((3, 3))
    while not known.all():
        weight = ndimage.convolve(known.astype(float), kernel, mode="nearest")
        grow = (~known) & (weight > 0)
        if not grow.any():
            break
        for c in range(out.shape[2]):
            acc = ndimage.convolve(np.where(known, out[..., c], 0.0), kernel, mode="nearest")
            out[..., c] = np.where(grow, acc / np.maximum(weight, 1e-12), out[..., c])
        known = known | grow
    return out


def tiling_mosaic(tiling: TilingMap, tile_set: TileSet) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    """Composite previews of a realised tiling, its seam mask and the grid origin."""
    idx = {t.tile_id: t for t in tile_set.tiles}
    rows = sorted({i for i, _ in tiling.cells})
    cols = sorted({j for _, j in tiling.cells})
    T = tile_set.params.tile_px
    image = np.zeros((len(rows) * T, len(cols) * T, 3))
    seams = np.zeros(image.shape[:2], dtype=bool)
    for (i, j), tid in tiling.cells.items():
        r, c = (i - rows[0]) * T, (j - cols[0]) * T
        tile = idx[tid]
        image[r : r + T, c : c + T] = tile.composite_preview
        if tile.assignment is not None:
            seams[r : r + T, c : c + T] = seam_mask(tile.assignment)
    return image, seams, (rows[0], cols[0])


def seam_score(tiling: TilingMap, tile_set: TileSet, crop_size: int = 64, include_cuts: bool = False) -> float:
    """Mean perceptual distance between boundary-crossing crops and their seam-filled copies.

    One ``crop_size`` square is centred on every shared edge of the realised
    tiling.  The two pixel lines either side of the tile boundary and every
    graph-cut seam pixel inside the crop are replaced by values interpolated
    from their neighbours; the smaller the change, the less visible the seam.
    """
    cells = set(tiling.cells)
    T = tile_set.params.tile_px
    if crop_size < 4 or crop_size > T:
        raise ConfigurationError("crop size must lie in [4, tile_px]")
    rows = {i for i, _ in cells}
    cols = {j for _, j in cells}
    if len(rows) < 2 or len(cols) < 2:
        raise ConfigurationError("seam score needs a tiling of at least 2x2 cells")
    image, seams, (i0, j0) = tiling_mosaic(tiling, tile_set)
    half = crop_size // 2
    scores = []
    for i, j in sorted(cells):
        r, c = (i - i0) * T, (j - j0) * T
        if (i, j + 1) in cells:
            edge = c + T  # vertical boundary at this column
            window = (slice(r + T // 2 - half, r + T // 2 - half + crop_size), slice(edge - half, edge - half + crop_size))
            line = np.zeros((crop_size, crop_size), dtype=bool)
            line[:, half - 1 : half + 1] = True
            scores.append(_crop_score(image, seams if include_cuts else None, window, line))
        if (i + 1, j) in cells:
            edge = r + T
            window = (slice(edge - half, edge - half + crop_size), slice(c + T // 2 - half, c + T // 2 - half + crop_size))
            line = np.zeros((crop_size, crop_size), dtype=bool)
            line[half - 1 : half + 1, :] = True
            scores.append(_crop_score(image, seams if include_cuts else None, window, line))
    return float(np.mean(scores))


def _crop_score(image: np.ndarray, seams: np.ndarray | None, window: tuple[slice, slice], line: np.ndarray) -> float:
    crop = image[window]
    filled = _fill(crop, line if seams is None else line | seams[window])
    return perceptual_distance(crop, filled)
