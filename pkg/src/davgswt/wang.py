"""Wang-tile construction from a reconstructed field and stochastic tiling.

Every edge code owns one strip of the field, twice the overlap band wide and
one tile long, straddling the edge.  A tile with north code ``c`` takes the
lower half of horizontal strip ``c`` as its top band; a tile with south code
``c`` takes the upper half as its bottom band, so two tiles meeting on that
edge reproduce the strip exactly.  Vertical codes work the same way.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .camera import Intrinsics, OrthoView, PerspectiveView, Pose
from .errors import ConfigurationError, TilingError
from .gsfield import GaussianField, load_field, render, save_field
from .seam import SIDES, Source, build_tile_patch, segment_labels
from .uncertainty import UncertaintyReport

MASK64 = (1 << 64) - 1
GAMMA_MODES = {"adaptive": None, "unweighted": 0.5, "colour": 1.0}


@dataclass(frozen=True)
class TileParams:
    tile_px: int = 128
    overlap_px: int = 16
    tile_world: float = 0.8
    # segmentation stand-in: coarse colour classes after smoothing
    quantization: int = 2
    smooth: float = 1.5
    min_region: int = 32
    # minimum rendered coverage of a sampled region
    coverage_min: float = 0.9
    seed: int = 0
    # "adaptive" derives the weight from tile uncertainty, "unweighted" drops it
    # (equal colour and semantic terms), "colour" keeps the colour terms only
    gamma_mode: str = "adaptive"
    max_sweeps: int = 4
    attempts: int = 400

    def __post_init__(self):
        if self.tile_px < 8:
            raise ConfigurationError("tiles must be at least 8 px")
        if self.overlap_px < 2 or 2 * self.overlap_px > self.tile_px:
            raise ConfigurationError("overlap must lie in [2, tile_px / 2]")
        if self.tile_world <= 0:
            raise ConfigurationError("tile world size must be positive")
        if self.gamma_mode not in GAMMA_MODES:
            raise ConfigurationError(f"unknown gamma mode {self.gamma_mode!r}")

    @property
    def pixel_size(self) -> float:
        return self.tile_world / self.tile_px


@dataclass
class WangTile:
    tile_id: int
    edge_codes: tuple[int, int, int, int]  # north, east, south, west
    field: GaussianField  # tile-local coordinates, x and y in [0, tile_world)
    composite_preview: np.ndarray
    u_bar: float
    u_raw: float = 0.0
    assignment: np.ndarray | None = None
    seam_energy: float = 0.0
    label_crossings: int = 0


@dataclass
class TileSet:
    tiles: list[WangTile]
    K: int
    params: TileParams = field(default_factory=TileParams)

    @property
    def complete(self) -> bool:
        return len(self.tiles) == self.K**4 and len({t.edge_codes for t in self.tiles}) == self.K**4

    def matching(self, west: int | None = None, north: int | None = None) -> list[WangTile]:
        """Tiles compatible with the given neighbour codes, in tile-id order."""
        return [t for t in self.tiles if (west is None or t.edge_codes[3] == west) and (north is None or t.edge_codes[0] == north)]

    def by_id(self, tile_id: int) -> WangTile:
        return self._index()[tile_id]

    def _index(self) -> dict[int, WangTile]:
        return {t.tile_id: t for t in self.tiles}

    def save(self, directory: str | Path) -> None:
        """Per-tile splat files and seam maps plus a JSON manifest."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        manifest = {"K": self.K, "params": asdict(self.params), "tiles": []}
        for t in self.tiles:
            stem = f"tile_{t.tile_id:03d}"
            save_field(t.field, out / f"{stem}.bin")
            assignment = t.assignment if t.assignment is not None else np.zeros(t.composite_preview.shape[:2], dtype=np.int64)
            np.savez(out / f"{stem}.npz", preview=t.composite_preview, assignment=assignment)
            manifest["tiles"].append({
                "tile_id": t.tile_id,
                "edge_codes": list(t.edge_codes),
                "u_bar": t.u_bar,
                "u_raw": t.u_raw,
                "splats": len(t.field),
                "seam_energy": t.seam_energy,
                "label_crossings": t.label_crossings,
                "stem": stem,
            })
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path) -> "TileSet":
        src = Path(directory)
        manifest = json.loads((src / "manifest.json").read_text())
        params = TileParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in manifest["params"].items()})
        tiles = []
        for e in manifest["tiles"]:
            arrays = np.load(src / f"{e['stem']}.npz")
            tiles.append(WangTile(e["tile_id"], tuple(e["edge_codes"]), load_field(src / f"{e['stem']}.bin"), arrays["preview"], e["u_bar"], e["u_raw"], arrays["assignment"], e["seam_energy"], e["label_crossings"]))
        return cls(tiles, manifest["K"], params)


def tile_uncertainty(tile: WangTile) -> float:
    return tile.u_bar


# --------------------------------------------------------------------------
# uncertainty on the ground plane


@dataclass
class GroundMap:
    """Scalar field on a regular ground grid covering ``lo``..``hi`` (x, y)."""

    values: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def zeros(cls, bounds, grid: tuple[int, int] = (64, 64)) -> "GroundMap":
        lo, hi = bounds
        return cls(np.zeros(grid), np.asarray(lo[:2], float), np.asarray(hi[:2], float))

    def save(self, path: str | Path) -> None:
        np.savez(path, values=self.values, lo=self.lo, hi=self.hi)

    @classmethod
    def load(cls, path: str | Path) -> "GroundMap":
        a = np.load(path)
        return cls(a["values"], a["lo"], a["hi"])

    def footprint_mean(self, x0: float, y0: float, x1: float, y1: float) -> float:
        """Mean over texels whose centres fall inside the rectangle."""
        gh, gw = self.values.shape
        xs = self.lo[0] + (np.arange(gw) + 0.5) * (self.hi[0] - self.lo[0]) / gw
        ys = self.lo[1] + (np.arange(gh) + 0.5) * (self.hi[1] - self.lo[1]) / gh
        cx = (xs >= x0) & (xs < x1)
        cy = (ys >= y0) & (ys < y1)
        if not cx.any() or not cy.any():
            c = int(np.clip(np.searchsorted(xs, 0.5 * (x0 + x1)), 0, gw - 1))
            r = int(np.clip(np.searchsorted(ys, 0.5 * (y0 + y1)), 0, gh - 1))
            return float(self.values[r, c])
        return float(self.values[np.ix_(cy, cx)].mean())


def ground_uncertainty(reports: Sequence[UncertaintyReport], poses: Sequence[Pose], bounds, grid: tuple[int, int] = (64, 64), fov_deg: float = 40.0) -> GroundMap:
    """Project per-view uncertainty maps onto the mid-height ground plane.

    Each texel takes the mean of the latent pixels that land on it; the
    result is scaled so its maximum is 1.
    """
    gmap = GroundMap.zeros(bounds, grid)
    lo, hi = bounds
    plane_z = 0.5 * (lo[2] + hi[2])
    gh, gw = grid
    total = np.zeros(grid)
    count = np.zeros(grid)
    for rep in reports:
        pose = poses[rep.pose_index]
        hz, wz = rep.spatial_map.shape
        view = PerspectiveView.from_pose(pose, Intrinsics.from_fov(wz, hz, fov_deg))
        rays = view.pixel_rays()
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (plane_z - view.position[2]) / rays[..., 2]
        ok = np.isfinite(t) & (t > 0)
        xy = view.position[:2] + np.where(ok, t, 0.0)[..., None] * rays[..., :2]
        u = (xy[..., 0] - gmap.lo[0]) / (gmap.hi[0] - gmap.lo[0])
        v = (xy[..., 1] - gmap.lo[1]) / (gmap.hi[1] - gmap.lo[1])
        ok &= (u >= 0) & (u < 1) & (v >= 0) & (v < 1)
        col = np.clip((u * gw).astype(np.int64), 0, gw - 1)[ok]
        row = np.clip((v * gh).astype(np.int64), 0, gh - 1)[ok]
        np.add.at(total, (row, col), rep.spatial_map[ok])
        np.add.at(count, (row, col), 1.0)
    vals = np.divide(total, count, out=np.zeros(grid), where=count > 0)
    peak = vals.max()
    gmap.values = vals / peak if peak > 0 else vals
    return gmap


# --------------------------------------------------------------------------
# tile set construction


@dataclass(frozen=True)
class _Region:
    row: int
    col: int
    height: int
    width: int

    def overlaps(self, other: "_Region") -> bool:
        return not (self.row + self.height <= other.row or other.row + other.height <= self.row or self.col + self.width <= other.col or other.col + other.width <= self.col)


class _Atlas:
    """Top-down render of the whole field, the canvas every source is cut from."""

    def __init__(self, fld: GaussianField, params: TileParams):
        lo, hi = fld.bounds
        ps = params.pixel_size
        self.origin = np.array([lo[0], lo[1]])
        self.ps = ps
        self.height = int(math.ceil((hi[1] - lo[1]) / ps))
        self.width = int(math.ceil((hi[0] - lo[0]) / ps))
        view = OrthoView((float(lo[0]), float(lo[1])), ps, self.height, self.width, top=float(hi[2]) + 1.0)
        self.image, self.alpha = render(fld, view)
        self.fld = fld

    def coverage(self, reg: _Region) -> float:
        return float((self.alpha[reg.row : reg.row + reg.height, reg.col : reg.col + reg.width] >= 0.5).mean())

    def crop(self, reg: _Region) -> np.ndarray:
        return self.image[reg.row : reg.row + reg.height, reg.col : reg.col + reg.width]

    def world_rect(self, reg: _Region) -> tuple[float, float, float, float]:
        x0 = self.origin[0] + reg.col * self.ps
        y0 = self.origin[1] + reg.row * self.ps
        return x0, y0, x0 + reg.width * self.ps, y0 + reg.height * self.ps

    def place(self, height: int, width: int, rng: np.random.Generator, params: TileParams, avoid: Sequence[_Region] = ()) -> _Region | None:
        if height > self.height or width > self.width:
            return None
        for _ in range(params.attempts):
            reg = _Region(int(rng.integers(0, self.height - height + 1)), int(rng.integers(0, self.width - width + 1)), height, width)
            if any(reg.overlaps(a) for a in avoid):
                continue
            if self.coverage(reg) >= params.coverage_min:
                return reg
        return None


def _source(img: np.ndarray, params: TileParams) -> Source:
    return Source(img, segment_labels(img, params.quantization, params.smooth, params.min_region))


def build_tile_set(fld: GaussianField, uncertainty_ground_map: GroundMap | None, K: int = 2, tile_params: TileParams | None = None) -> TileSet:
    """Assemble the complete K^4 Wang tile set from ``fld``."""
    params = tile_params or TileParams()
    if K < 2:
        raise ConfigurationError("K must be >= 2")
    if len(fld) == 0:
        raise ConfigurationError("cannot tile an empty field")
    atlas = _Atlas(fld, params)
    T, ow = params.tile_px, params.overlap_px

    strips: dict[tuple[str, int], _Region] = {}
    placed: list[_Region] = []
    for axis in ("h", "v"):
        for code in range(K):
            rng = np.random.default_rng(np.random.SeedSequence([params.seed, 1 if axis == "h" else 2, code]))
            shape = (2 * ow, T) if axis == "h" else (T, 2 * ow)
            reg = atlas.place(*shape, rng, params, placed)
            if reg is None:
                raise ConfigurationError(f"field too small to sample {2 * K} distinct, fully covered strips")
            strips[axis, code] = reg
            placed.append(reg)

    codes = list(itertools.product(range(K), repeat=4))
    centers = []
    for tid in range(len(codes)):
        rng = np.random.default_rng(np.random.SeedSequence([params.seed, 3, tid]))
        reg = atlas.place(T, T, rng, params)
        if reg is None:
            raise ConfigurationError("field too small to sample a fully covered tile center")
        centers.append(reg)

    gmap = uncertainty_ground_map
    u_raw = np.array([gmap.footprint_mean(*atlas.world_rect(r)) if gmap is not None else 0.0 for r in centers])
    u_norm = _minmax(u_raw)

    tiles = []
    for tid, ((n, e, s, w), creg) in enumerate(zip(codes, centers)):
        band_regs = {
            "N": _Region(strips["h", n].row + ow, strips["h", n].col, ow, T),
            "S": _Region(strips["h", s].row, strips["h", s].col, ow, T),
            "W": _Region(strips["v", w].row, strips["v", w].col + ow, T, ow),
            "E": _Region(strips["v", e].row, strips["v", e].col, T, ow),
        }
        center = _source(atlas.crop(creg), params)
        bands = {side: _source(atlas.crop(band_regs[side]), params) for side in SIDES}
        gamma = GAMMA_MODES[params.gamma_mode]
        res, composite = build_tile_patch(center, bands, ow, float(u_norm[tid]), gamma, params.max_sweeps)
        local = _assign_splats(atlas, creg, band_regs, res.assignment, params)
        tiles.append(WangTile(tid, (n, e, s, w), local, composite, float(u_norm[tid]), float(u_raw[tid]), res.assignment, res.energy, res.diagnostics["label_crossings"]))
    return TileSet(tiles, K, params)


def _minmax(u: np.ndarray) -> np.ndarray:
    lo, hi = float(u.min()), float(u.max())
    if hi - lo <= 1e-12:
        return np.clip(u, 0.0, 1.0)
    return (u - lo) / (hi - lo)


def _assign_splats(atlas: _Atlas, creg: _Region, band_regs: dict[str, _Region], assignment: np.ndarray, params: TileParams) -> GaussianField:
    """Keep each source's splats whose projected centre the seam gave to that source."""
    fld = atlas.fld
    T, ow = params.tile_px, params.overlap_px
    offsets = {"C": (0, 0), "N": (0, 0), "S": (T - ow, 0), "W": (0, 0), "E": (0, T - ow)}
    labels = {"C": 0, "N": 1, "E": 2, "S": 3, "W": 4}
    regs = {"C": creg, **band_regs}
    keep_idx, local_xy = [], []
    px = (fld.positions[:, 0] - atlas.origin[0]) / atlas.ps
    py = (fld.positions[:, 1] - atlas.origin[1]) / atlas.ps
    for name, reg in regs.items():
        r = np.floor(py - reg.row).astype(np.int64)
        c = np.floor(px - reg.col).astype(np.int64)
        inside = (r >= 0) & (r < reg.height) & (c >= 0) & (c < reg.width)
        idx = np.flatnonzero(inside)
        tr = r[idx] + offsets[name][0]
        tc = c[idx] + offsets[name][1]
        mine = assignment[tr, tc] == labels[name]
        idx = idx[mine]
        keep_idx.append(idx)
        lx = (px[idx] - reg.col + offsets[name][1]) * atlas.ps
        ly = (py[idx] - reg.row + offsets[name][0]) * atlas.ps
        local_xy.append(np.stack([lx, ly], axis=1))
    idx = np.concatenate(keep_idx)
    xy = np.concatenate(local_xy).reshape(-1, 2)
    pos = fld.positions[idx].copy()
    pos[:, :2] = np.clip(xy, 0.0, np.nextafter(params.tile_world, 0.0))
    lo = np.array([0.0, 0.0, fld.bounds[0][2]])
    hi = np.array([params.tile_world, params.tile_world, fld.bounds[1][2]])
    return GaussianField(pos, fld.scales[idx].copy(), fld.rotations[idx].copy(), fld.opacities[idx].copy(), fld.colors[idx].copy(), (lo, hi), 0)


# --------------------------------------------------------------------------
# stochastic tiling


def _cell_uniform(seed: int, i: int, j: int) -> float:
    state = np.random.SeedSequence([seed & MASK64, i & MASK64, j & MASK64]).generate_state(2, dtype=np.uint32)
    return ((int(state[0]) << 21) ^ (int(state[1]) >> 11)) / float(1 << 53)


def _free_codes(seed: int, i: int, j: int, K: int) -> tuple[int, int]:
    """(east, south) codes a complete set would give cell (i, j)."""
    return divmod(int(_cell_uniform(seed, i, j) * K * K), K)


@dataclass
class TilingMap:
    cells: dict[tuple[int, int], int]
    seed: int

    def violations(self, tile_set: TileSet) -> int:
        idx = tile_set._index()
        bad = 0
        for (i, j), tid in self.cells.items():
            n, e, s, w = idx[tid].edge_codes
            right = self.cells.get((i, j + 1))
            below = self.cells.get((i + 1, j))
            bad += right is not None and idx[right].edge_codes[3] != e
            bad += below is not None and idx[below].edge_codes[0] != s
        return int(bad)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["i", "j", "tile_id"])
            for (i, j), tid in sorted(self.cells.items()):
                out.writerow([i, j, tid])


def stochastic_tiling(tile_set: TileSet, region: tuple[int, int, int, int], seed: int) -> TilingMap:
    """Scanline tiling of ``region = (i0, j0, rows, cols)``.

    Each cell draws uniformly among tiles matching its west and north
    neighbours using a generator derived from ``(seed, i, j)``.  Neighbours
    outside the region are evaluated lazily from their own draws, so any two
    regions of the same seed agree wherever they overlap.
    """
    i0, j0, rows, cols = region
    K = tile_set.K
    idx = tile_set._index()
    cells: dict[tuple[int, int], int] = {}
    for i in range(i0, i0 + rows):
        for j in range(j0, j0 + cols):
            west = idx[cells[i, j - 1]].edge_codes[1] if (i, j - 1) in cells else _free_codes(seed, i, j - 1, K)[0]
            north = idx[cells[i - 1, j]].edge_codes[2] if (i - 1, j) in cells else _free_codes(seed, i - 1, j, K)[1]
            cands = tile_set.matching(west, north)
            if not cands:
                raise TilingError(f"no tile matches west={west} north={north} at cell ({i}, {j})", (i, j))
            pick = cands[int(_cell_uniform(seed, i, j) * len(cands))]
            cells[i, j] = pick.tile_id
    return TilingMap(cells, seed)


def layout_field(tile_set: TileSet, tiling: TilingMap, hierarchy_level: int | None = None) -> GaussianField:
    """All splats of a realised tiling in world coordinates (cell (i, j) at x = j, y = i)."""
    S = tile_set.params.tile_world
    idx = tile_set._index()
    parts = []
    for (i, j), tid in sorted(tiling.cells.items()):
        f = idx[tid].field
        pos = f.positions.copy()
        pos[:, 0] += j * S
        pos[:, 1] += i * S
        parts.append((pos, f))
    pos = np.concatenate([p for p, _ in parts])
    cat = lambda name: np.concatenate([getattr(f, name) for _, f in parts])
    lo = pos.min(axis=0) if len(pos) else np.zeros(3)
    hi = pos.max(axis=0) if len(pos) else np.zeros(3)
    return GaussianField(pos, cat("scales"), cat("rotations"), cat("opacities"), cat("colors"), (lo, hi), 0)
