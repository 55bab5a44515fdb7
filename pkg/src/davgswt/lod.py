"""Level-of-detail hierarchies, distance blending and pre-sorted tile caches."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import raster
from .camera import Intrinsics, PerspectiveView, Pose
from .errors import ConfigurationError, DimensionError
from .gsfield import GaussianField, render
from .wang import TileSet, TilingMap, WangTile

MORTON_BITS = 10


@dataclass(frozen=True)
class LodParams:
    levels: int = 6
    reduction_ratio: int = 4
    base_distance: float = 2.0  # D_0
    distance_growth: float = 1.6
    delta_fraction: float = 0.25  # blend half-width as a fraction of the smallest gap

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigurationError("need at least one LOD level")
        if self.reduction_ratio < 2:
            raise ConfigurationError("reduction ratio must be >= 2")
        if self.base_distance <= 0 or self.distance_growth <= 1:
            raise ConfigurationError("thresholds must be positive and strictly increasing")
        if not 0 < self.delta_fraction < 0.5:
            raise ConfigurationError("delta_fraction must lie in (0, 0.5)")

    def thresholds(self) -> np.ndarray:
        return self.base_distance * self.distance_growth ** np.arange(self.levels)

    def delta(self) -> float:
        t = self.thresholds()
        gap = float(np.diff(t).min()) if len(t) > 1 else self.base_distance
        return self.delta_fraction * gap


@dataclass
class LodHierarchy:
    levels: list[GaussianField]
    thresholds: np.ndarray
    delta: float
    scale_factors: np.ndarray  # mean splat scale per level

    @property
    def counts(self) -> list[int]:
        return [len(f) for f in self.levels]


def level_count(n: int, ratio: int) -> int:
    """Splats kept at the next level: ``n // ratio``, or ``ceil(n / (ratio + 1))``
    when flooring would shrink the level by more than ``ratio + 1``."""
    m = n // ratio
    if m == 0 or n / m > ratio + 1:
        m = max(1, math.ceil(n / (ratio + 1)))
    return m


def _morton(pos: np.ndarray) -> np.ndarray:
    lo = pos.min(axis=0)
    span = np.maximum(pos.max(axis=0) - lo, 1e-12)
    q = np.minimum(((pos - lo) / span * (1 << MORTON_BITS)).astype(np.uint64), (1 << MORTON_BITS) - 1)
    code = np.zeros(len(pos), dtype=np.uint64)
    for b in range(MORTON_BITS):
        for axis in range(3):
            code |= ((q[:, axis] >> np.uint64(b)) & np.uint64(1)) << np.uint64(3 * b + axis)
    return code


def merge_level(fld: GaussianField, target: int) -> GaussianField:
    """Merge runs of Morton-ordered splats into ``target`` moment-matched splats."""
    n = len(fld)
    order = np.argsort(_morton(fld.positions), kind="stable")
    sizes = np.full(target, n // target)
    sizes[: n % target] += 1
    group = np.empty(n, dtype=np.int64)
    group[order] = np.repeat(np.arange(target), sizes)

    w = fld.opacities
    wsum = np.bincount(group, weights=w, minlength=target)
    wsum = np.maximum(wsum, 1e-12)
    mean = np.stack([np.bincount(group, weights=w * fld.positions[:, a], minlength=target) for a in range(3)], axis=1) / wsum[:, None]
    color = np.stack([np.bincount(group, weights=w * fld.colors[:, a], minlength=target) for a in range(3)], axis=1) / wsum[:, None]
    cov, _ = raster.covariance3d(fld.scales, fld.rotations)
    d = fld.positions - mean[group]
    spread = cov + d[:, :, None] * d[:, None, :]
    merged = np.zeros((target, 3, 3))
    np.add.at(merged, group, w[:, None, None] * spread)
    merged /= wsum[:, None, None]
    evals, evecs = np.linalg.eigh(merged)
    flip = np.linalg.det(evecs) < 0
    evecs[flip, :, 0] *= -1.0
    scales = np.sqrt(np.maximum(evals, 1e-12))
    quats = raster.rotmat_to_quat(evecs)
    opac = np.zeros(target)
    np.maximum.at(opac, group, fld.opacities)
    return GaussianField(mean, scales, quats, opac, np.clip(color, 0.0, 1.0), fld.bounds, fld.revision)


def build_lod_hierarchy(splats: GaussianField, levels: int = 6, reduction_ratio: int = 4, params: LodParams | None = None) -> LodHierarchy:
    """Level 0 is the input; each coarser level merges the previous one."""
    if len(splats) == 0:
        raise DimensionError("cannot build a hierarchy from zero splats")
    params = params or LodParams(levels=levels, reduction_ratio=reduction_ratio)
    out = [splats]
    for _ in range(1, levels):
        prev = out[-1]
        out.append(merge_level(prev, level_count(len(prev), reduction_ratio)) if len(prev) > 1 else prev)
    factors = np.array([float(f.scales.mean()) for f in out])
    return LodHierarchy(out, params.thresholds()[:levels], params.delta(), factors)


def lod_blend_weight(d: float | np.ndarray, hierarchy: LodHierarchy, level: int) -> float | np.ndarray:
    """Opacity weight of ``level`` against ``level + 1`` at camera distance ``d``.

    ``max(0, min(1, 0.5 - (d - D_i) / (2 delta)))``: 0.5 at the threshold,
    linear across the band, saturated outside it.
    """
    if not 0 <= level < len(hierarchy.levels):
        raise ConfigurationError(f"level {level} outside the hierarchy")
    D = hierarchy.thresholds[level]
    w = np.clip(0.5 - (np.asarray(d, dtype=float) - D) / (2.0 * hierarchy.delta), 0.0, 1.0)
    return float(w) if np.ndim(w) == 0 else w


def active_levels(d: float, hierarchy: LodHierarchy) -> list[tuple[int, float]]:
    """Levels to draw at distance ``d`` with their opacity multipliers."""
    last = len(hierarchy.levels) - 1
    for i in range(last):
        a = lod_blend_weight(d, hierarchy, i)
        if a >= 1.0:
            return [(i, 1.0)]
        if a > 0.0:
            return [(i, a), (i + 1, 1.0 - a)]
    return [(last, 1.0)]


# --------------------------------------------------------------------------
# caches


@dataclass(frozen=True)
class CachePolicy:
    tau: float = 0.6
    base_bins: int = 8
    hot_bins: int = 16
    cold_prefetch: int = 3
    hot_prefetch: int = 6
    elevation: float = 1.0  # camera elevation the bin directions assume

    def __post_init__(self):
        if self.base_bins not in (8, 16) or self.hot_bins not in (8, 16):
            raise ConfigurationError("bin counts must be 8 or 16")
        if self.cold_prefetch < 1 or self.hot_prefetch < self.cold_prefetch:
            raise ConfigurationError("prefetch depths must satisfy 1 <= cold <= hot")


def bin_directions(n: int, elevation: float) -> np.ndarray:
    phi = 2.0 * np.pi * np.arange(n) / n
    ce = math.cos(elevation)
    return np.stack([ce * np.cos(phi), ce * np.sin(phi), np.full(n, math.sin(elevation))], axis=1)


def sort_for_direction(positions: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Front-to-back order for a camera far along ``direction``."""
    return np.argsort(-(positions @ direction), kind="stable").astype(np.int64)


@dataclass
class TileCache:
    orderings: dict[int, dict[int, np.ndarray]]  # bin -> level -> permutation
    bin_count: int
    prefetch_depth: int
    directions: np.ndarray

    @property
    def nbytes(self) -> int:
        return sum(o.nbytes for per_bin in self.orderings.values() for o in per_bin.values())

    def nearest_bin(self, view_dir: np.ndarray) -> int:
        return int(np.argmax(self.directions @ view_dir))


def build_sorted_caches(tile: WangTile, hierarchy: LodHierarchy, policy: CachePolicy | None = None) -> TileCache:
    """Per direction bin, front-to-back orderings of the prefetched levels."""
    policy = policy or CachePolicy()
    hot = tile.u_bar > policy.tau
    bins = policy.hot_bins if hot else policy.base_bins
    depth = min(policy.hot_prefetch if hot else policy.cold_prefetch, len(hierarchy.levels))
    dirs = bin_directions(bins, policy.elevation)
    orderings = {b: {lvl: sort_for_direction(hierarchy.levels[lvl].positions, dirs[b]) for lvl in range(depth)} for b in range(bins)}
    return TileCache(orderings, bins, depth, dirs)


@dataclass
class FrameTiming:
    sort_ms: float
    render_ms: float
    update_ms: float
    fallback: bool = False


@dataclass
class _Pending:
    cache: TileCache
    bin: int
    level: int
    order: np.ndarray


def _gather(entries, view_dir):
    """Ordered splat arrays for (offset, hierarchy, cache, weights) entries."""
    parts, pending = [], []
    fallback = False
    for offset, hier, cache, weights in entries:
        b = cache.nearest_bin(view_dir)
        for lvl, wgt in weights:
            fld = hier.levels[lvl]
            order = cache.orderings.get(b, {}).get(lvl)
            if order is None:
                order = sort_for_direction(fld.positions, cache.directions[b])
                pending.append(_Pending(cache, b, lvl, order))
                fallback = True
            parts.append((offset, fld, order, wgt))
    return parts, pending, fallback


def _assemble(parts) -> tuple[GaussianField, np.ndarray, np.ndarray]:
    pos, sc, rot, op, col, scale = [], [], [], [], [], []
    for offset, fld, order, wgt in parts:
        pos.append(fld.positions[order] + offset)
        sc.append(fld.scales[order])
        rot.append(fld.rotations[order])
        op.append(fld.opacities[order])
        col.append(fld.colors[order])
        scale.append(np.full(len(order), wgt))
    p = np.concatenate(pos) if pos else np.zeros((0, 3))
    bounds = (p.min(axis=0), p.max(axis=0)) if len(p) else (np.zeros(3), np.zeros(3))
    fld = GaussianField(p, np.concatenate(sc), np.concatenate(rot), np.concatenate(op), np.concatenate(col), bounds, 0)
    return fld, np.arange(len(p), dtype=np.int64), np.concatenate(scale)


def _apply_updates(pending: list[_Pending]) -> None:
    # single writer, between frames
    for p in pending:
        p.cache.orderings.setdefault(p.bin, {})[p.level] = p.order


def select_ordering_and_render(tile: WangTile, cache: TileCache, hierarchy: LodHierarchy, pose: Pose, resolution: tuple[int, int] = (128, 128), fov_deg: float = 40.0) -> tuple[np.ndarray, FrameTiming]:
    """Render one tile centred on the origin using its cached orderings."""
    S = float(tile.field.bounds[1][0] - tile.field.bounds[0][0]) or 1.0
    offset = -np.array([S / 2, S / 2, 0.0])
    return _render_entries([(offset, hierarchy, cache)], pose, resolution, fov_deg)


def _render_entries(entries, pose: Pose, resolution, fov_deg, exact: bool = False):
    h, w = resolution
    t0 = time.perf_counter()
    view_dir = pose.position / np.linalg.norm(pose.position)
    cam = pose.position
    weighted = []
    for offset, hier, cache in entries:
        centre = offset + 0.5 * (hier.levels[0].bounds[0] + hier.levels[0].bounds[1]) * np.array([1, 1, 0])
        d = float(np.linalg.norm(cam - centre))
        weighted.append((offset, hier, cache, active_levels(d, hier), d))
    weighted.sort(key=lambda e: e[4])
    parts, pending, fallback = _gather([e[:4] for e in weighted], view_dir)
    fld, order, opacity_scale = _assemble(parts)
    t1 = time.perf_counter()
    view = PerspectiveView.from_pose(pose, Intrinsics.from_fov(w, h, fov_deg))
    # the exact path keeps the same splats and weights but sorts by true depth
    image, _ = render(fld, view, None if exact else order, opacity_scale)
    t2 = time.perf_counter()
    _apply_updates(pending)
    t3 = time.perf_counter()
    return image, FrameTiming(1e3 * (t1 - t0), 1e3 * (t2 - t1), 1e3 * (t3 - t2), fallback)


def render_exact(fld: GaussianField, pose: Pose, resolution: tuple[int, int] = (128, 128), fov_deg: float = 40.0, offset: np.ndarray | None = None) -> np.ndarray:
    """Reference frame with a fresh per-frame depth sort."""
    if offset is not None:
        fld = fld.evolve(positions=fld.positions + offset)
    h, w = resolution
    image, _ = render(fld, PerspectiveView.from_pose(pose, Intrinsics.from_fov(w, h, fov_deg)))
    return image


# --------------------------------------------------------------------------
# tiled world rendering


@dataclass
class TiledWorld:
    """A realised tiling with per-tile hierarchies and caches, centred on the origin."""

    tile_set: TileSet
    tiling: TilingMap
    hierarchies: dict[int, LodHierarchy]
    caches: dict[int, TileCache]
    offsets: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    @classmethod
    def build(cls, tile_set: TileSet, tiling: TilingMap, lod: LodParams | None = None, policy: CachePolicy | None = None) -> "TiledWorld":
        lod = lod or LodParams()
        used = sorted(set(tiling.cells.values()))
        hier = {tid: build_lod_hierarchy(tile_set.by_id(tid).field, lod.levels, lod.reduction_ratio, lod) for tid in used}
        caches = {tid: build_sorted_caches(tile_set.by_id(tid), hier[tid], policy) for tid in used}
        S = tile_set.params.tile_world
        rows = [i for i, _ in tiling.cells]
        cols = [j for _, j in tiling.cells]
        cy = 0.5 * (min(rows) + max(rows) + 1) * S
        cx = 0.5 * (min(cols) + max(cols) + 1) * S
        offsets = {(i, j): np.array([j * S - cx, i * S - cy, 0.0]) for i, j in tiling.cells}
        return cls(tile_set, tiling, hier, caches, offsets)

    def render_frame(self, pose: Pose, resolution: tuple[int, int] = (128, 128), fov_deg: float = 40.0, exact: bool = False) -> tuple[np.ndarray, FrameTiming]:
        """Render with cached orderings, or with ``exact`` a fresh per-frame depth sort."""
        entries = [(self.offsets[c], self.hierarchies[tid], self.caches[tid]) for c, tid in sorted(self.tiling.cells.items())]
        return _render_entries(entries, pose, resolution, fov_deg, exact)


def circle_path(frames: int, radius: float = 3.0, elevation: float = 1.0) -> list[Pose]:
    """Constant-height orbit around the origin."""
    return [Pose(elevation, 2.0 * math.pi * f / frames, radius) for f in range(frames)]


def write_timing_csv(path: str | Path, timings: Sequence[FrameTiming]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["frame", "sort_ms", "render_ms", "update_ms", "fallback"])
        for i, t in enumerate(timings):
            out.writerow([i, f"{t.sort_ms:.4f}", f"{t.render_ms:.4f}", f"{t.update_ms:.4f}", int(t.fallback)])


def timing_summary(timings: Sequence[FrameTiming]) -> dict[str, tuple[float, float]]:
    """Mean and standard deviation of each phase, in milliseconds."""
    arr = {k: np.array([getattr(t, k) for t in timings]) for k in ("render_ms", "sort_ms", "update_ms")}
    return {k: (float(v.mean()), float(v.std())) for k, v in arr.items()}
