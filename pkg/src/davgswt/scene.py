"""Synthetic ground-truth world.

A seeded value-noise height field with a banded albedo palette stands in for
the exemplar scene; :func:`capture` ray-marches it to produce ground-truth
RGB + depth at any pose, and :func:`sample_candidate_poses` lays out the
hemispherical candidate set.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .camera import TWO_PI, Intrinsics, PerspectiveView, Pose
from .errors import ConfigurationError, DimensionError, PoseError

MIN_SCENE_SIZE = 16
SCENE_MAGIC = b"DAVS"
SCENE_VERSION = 1

# sand, grass, rock, snow
PALETTE = np.array(
    [
        [0.78, 0.70, 0.48],
        [0.30, 0.52, 0.22],
        [0.46, 0.40, 0.36],
        [0.90, 0.91, 0.94],
    ]
)
LIGHT_DIR = np.array([0.35, 0.25, 1.0]) / np.linalg.norm([0.35, 0.25, 1.0])
AMBIENT = 0.35


@dataclass(frozen=True)
class TerrainParams:
    extent: float = 6.0
    h_min: float = 0.0
    amplitude: float = 0.5
    base_frequency: int = 4
    octaves: int = 4
    persistence: float = 0.5
    lacunarity: float = 2.0
    albedo_noise: float = 0.06
    albedo_frequency: int = 32
    band_quantiles: tuple[float, ...] = (0.3, 0.55, 0.8)

    @property
    def h_max(self) -> float:
        return self.h_min + self.amplitude


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    height_field: np.ndarray
    albedo_field: np.ndarray
    semantic_field: np.ndarray
    rng_seed: int
    params: TerrainParams = field(default_factory=TerrainParams)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height_field.shape

    @property
    def extent(self) -> float:
        return self.params.extent

    def texel_of(self, xy: np.ndarray, grid: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Map world xy points onto a ``grid``-sized parameterisation of the scene.

        Returns (row, col, inside) integer arrays.
        """
        half = self.extent / 2.0
        gy, gx = grid
        col = np.floor((xy[..., 0] + half) / self.extent * gx).astype(np.int64)
        row = np.floor((xy[..., 1] + half) / self.extent * gy).astype(np.int64)
        inside = (col >= 0) & (col < gx) & (row >= 0) & (row < gy)
        return np.clip(row, 0, gy - 1), np.clip(col, 0, gx - 1), inside

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        half = self.extent / 2.0
        lo = np.array([-half, -half, self.params.h_min])
        hi = np.array([half, half, max(self.params.h_max, float(self.height_field.max()))])
        return lo, hi


@dataclass(frozen=True, eq=False)
class Capture:
    image: np.ndarray
    depth: np.ndarray
    pose: Pose

    def __post_init__(self):
        if self.image.shape[:2] != self.depth.shape:
            raise DimensionError("capture image and depth dimensions differ")
        if np.any(self.depth < 0):
            raise DimensionError("capture depth must be nonnegative")


# --------------------------------------------------------------------------
# terrain generation


def _value_noise(rng: np.random.Generator, shape: tuple[int, int], frequency: int) -> np.ndarray:
    """Smoothstep-interpolated lattice noise in [0, 1] on a ``shape`` grid."""
    lattice = rng.random((frequency + 1, frequency + 1))
    h, w = shape
    y = np.linspace(0.0, frequency, h, endpoint=True)
    x = np.linspace(0.0, frequency, w, endpoint=True)
    y0 = np.minimum(np.floor(y).astype(int), frequency - 1)
    x0 = np.minimum(np.floor(x).astype(int), frequency - 1)
    ty = y - y0
    tx = x - x0
    sy = (ty * ty * (3.0 - 2.0 * ty))[:, None]
    sx = (tx * tx * (3.0 - 2.0 * tx))[None, :]
    v00 = lattice[np.ix_(y0, x0)]
    v01 = lattice[np.ix_(y0, x0 + 1)]
    v10 = lattice[np.ix_(y0 + 1, x0)]
    v11 = lattice[np.ix_(y0 + 1, x0 + 1)]
    top = v00 + (v01 - v00) * sx
    bottom = v10 + (v11 - v10) * sx
    return top + (bottom - top) * sy


def generate_scene(seed: int, size: tuple[int, int] = (256, 256), terrain_params: TerrainParams | None = None) -> SyntheticScene:
    params = terrain_params or TerrainParams()
    h, w = size
    if h < MIN_SCENE_SIZE or w < MIN_SCENE_SIZE:
        raise ConfigurationError(f"scene size {size} below minimum {MIN_SCENE_SIZE}x{MIN_SCENE_SIZE}")
    if params.amplitude < 0:
        raise ConfigurationError("terrain amplitude must be nonnegative")
    if params.extent <= 0:
        raise ConfigurationError("terrain extent must be positive")
    rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))

    total = np.zeros((h, w))
    amp, freq, norm = 1.0, params.base_frequency, 0.0
    for _ in range(params.octaves):
        total += amp * _value_noise(rng, (h, w), max(1, int(round(freq))))
        norm += amp
        amp *= params.persistence
        freq *= params.lacunarity
    total /= norm
    lo, hi = total.min(), total.max()
    unit = (total - lo) / (hi - lo) if hi > lo else np.zeros_like(total)
    heights = params.h_min + params.amplitude * unit

    if params.amplitude > 0:
        cuts = np.quantile(unit, params.band_quantiles)
        bands = np.searchsorted(cuts, unit, side="right")
    else:
        bands = np.zeros((h, w), dtype=np.int64)
    bands = np.minimum(bands, len(PALETTE) - 1).astype(np.int32)

    grain = _value_noise(rng, (h, w), params.albedo_frequency) - 0.5
    albedo = np.clip(PALETTE[bands] * (1.0 + 2.0 * params.albedo_noise * grain[..., None]), 0.0, 1.0)
    return SyntheticScene(heights, albedo, bands, int(seed), params)


def flat_scene(height: float, size: tuple[int, int] = (64, 64), albedo: float | np.ndarray = 0.0, extent: float = 2.0, seed: int = 0) -> SyntheticScene:
    """A flat plateau at ``height`` with constant albedo; handy for closed-form checks."""
    params = TerrainParams(extent=extent, h_min=height, amplitude=0.0)
    hf = np.full(size, float(height))
    alb = np.empty(size + (3,))
    alb[...] = albedo
    return SyntheticScene(hf, alb, np.zeros(size, dtype=np.int32), seed, params)


# --------------------------------------------------------------------------
# capture


@numba.njit(cache=True)
def _bilinear(grid, x, y, half, extent):
    h, w = grid.shape[0], grid.shape[1]
    gx = (x + half) / extent * (w - 1)
    gy = (y + half) / extent * (h - 1)
    if gx < 0.0:
        gx = 0.0
    if gy < 0.0:
        gy = 0.0
    if gx > w - 1:
        gx = w - 1.0
    if gy > h - 1:
        gy = h - 1.0
    x0 = min(int(gx), w - 2)
    y0 = min(int(gy), h - 2)
    tx = gx - x0
    ty = gy - y0
    a = grid[y0, x0] + (grid[y0, x0 + 1] - grid[y0, x0]) * tx
    b = grid[y0 + 1, x0] + (grid[y0 + 1, x0 + 1] - grid[y0 + 1, x0]) * tx
    return a + (b - a) * ty


@numba.njit(cache=True)
def _raymarch(heights, origin, dirs, half, extent, zlo, zhi, step, out_t):
    n = dirs.shape[0]
    for r in range(n):
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        t0, t1 = 0.0, 1e30
        lo = (-half, -half, zlo)
        hi = (half, half, zhi)
        d = (dx, dy, dz)
        hit = True
        for a in range(3):
            o = origin[a]
            if abs(d[a]) < 1e-15:
                if o < lo[a] or o > hi[a]:
                    hit = False
            else:
                ta = (lo[a] - o) / d[a]
                tb = (hi[a] - o) / d[a]
                if ta > tb:
                    ta, tb = tb, ta
                t0 = max(t0, ta)
                t1 = min(t1, tb)
        if not hit or t0 > t1:
            out_t[r] = 0.0
            continue
        t_prev = t0
        px = origin[0] + t0 * dx
        py = origin[1] + t0 * dy
        pz = origin[2] + t0 * dz
        f_prev = pz - _bilinear(heights, px, py, half, extent)
        found = -1.0
        if f_prev <= 0.0:
            found = t0
        t = t0
        while found < 0.0 and t < t1:
            t = min(t + step, t1)
            px = origin[0] + t * dx
            py = origin[1] + t * dy
            pz = origin[2] + t * dz
            f = pz - _bilinear(heights, px, py, half, extent)
            if f <= 0.0:
                a_t, b_t = t_prev, t
                for _ in range(40):
                    m = 0.5 * (a_t + b_t)
                    fm = origin[2] + m * dz - _bilinear(heights, origin[0] + m * dx, origin[1] + m * dy, half, extent)
                    if fm > 0.0:
                        a_t = m
                    else:
                        b_t = m
                found = 0.5 * (a_t + b_t)
            t_prev = t
        out_t[r] = found if found > 0.0 else 0.0


def _surface_normals(scene: SyntheticScene, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    half = scene.extent / 2.0
    h, w = scene.shape
    cell = scene.extent / (w - 1)
    dz_dx = np.gradient(scene.height_field, cell, axis=1)
    dz_dy = np.gradient(scene.height_field, scene.extent / (h - 1), axis=0)
    gx = _sample_grid(dz_dx, x, y, half, scene.extent)
    gy = _sample_grid(dz_dy, x, y, half, scene.extent)
    n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _sample_grid(grid: np.ndarray, x: np.ndarray, y: np.ndarray, half: float, extent: float) -> np.ndarray:
    """Vectorised bilinear sample of a (H, W) or (H, W, C) node grid."""
    h, w = grid.shape[:2]
    gx = np.clip((x + half) / extent * (w - 1), 0, w - 1)
    gy = np.clip((y + half) / extent * (h - 1), 0, h - 1)
    x0 = np.minimum(gx.astype(np.int64), w - 2)
    y0 = np.minimum(gy.astype(np.int64), h - 2)
    tx = gx - x0
    ty = gy - y0
    if grid.ndim == 3:
        tx = tx[..., None]
        ty = ty[..., None]
    a = grid[y0, x0] + (grid[y0, x0 + 1] - grid[y0, x0]) * tx
    b = grid[y0 + 1, x0] + (grid[y0 + 1, x0 + 1] - grid[y0 + 1, x0]) * tx
    return a + (b - a) * ty


def camera_inside_scene(scene: SyntheticScene, pose: Pose) -> bool:
    lo, hi = scene.bounds()
    p = pose.position
    return bool(np.all(p >= lo) and np.all(p <= hi))


def capture(scene: SyntheticScene, pose: Pose, resolution: tuple[int, int] = (128, 128), fov_deg: float = 40.0, intrinsics: Intrinsics | None = None) -> Capture:
    """Ray-march the height field from ``pose``; depth is distance along the ray."""
    if camera_inside_scene(scene, pose):
        raise PoseError(f"camera at {pose.position} lies inside the terrain bounding box")
    h, w = resolution
    k = intrinsics or Intrinsics.from_fov(w, h, fov_deg)
    view = PerspectiveView.from_pose(pose, k)
    dirs = view.pixel_rays().reshape(-1, 3)
    origin = np.ascontiguousarray(view.position, dtype=np.float64)
    lo, hi = scene.bounds()
    half = scene.extent / 2.0
    step = 0.5 * scene.extent / (max(scene.shape) - 1)
    t = np.zeros(dirs.shape[0])
    _raymarch(np.ascontiguousarray(scene.height_field, dtype=np.float64), origin, np.ascontiguousarray(dirs), half, scene.extent, lo[2] - 1e-9, hi[2] + 1e-9, step, t)

    image = np.zeros((dirs.shape[0], 3))
    hit = t > 0
    if np.any(hit):
        pts = origin + t[hit, None] * dirs[hit]
        albedo = _sample_grid(scene.albedo_field, pts[:, 0], pts[:, 1], half, scene.extent)
        normals = _surface_normals(scene, pts[:, 0], pts[:, 1])
        shade = AMBIENT + (1.0 - AMBIENT) * np.clip(normals @ LIGHT_DIR, 0.0, 1.0)
        image[hit] = np.clip(albedo * shade[:, None], 0.0, 1.0)
    return Capture(image.reshape(h, w, 3), t.reshape(h, w), pose)


def capture_burst(scene: SyntheticScene, pose: Pose, resolution: tuple[int, int] = (128, 128), burst: int = 1, jitter: float = 0.01, seed: int = 0, fov_deg: float = 40.0) -> list[Capture]:
    """``burst`` captures around ``pose``; the first is always the exact pose."""
    if burst < 1:
        raise ConfigurationError("burst size must be >= 1")
    out = [capture(scene, pose, resolution, fov_deg)]
    rng = np.random.default_rng([seed, 0xB0257])
    for _ in range(burst - 1):
        d_el, d_az = rng.normal(0.0, jitter, 2)
        el = min(max(pose.elevation + d_el, 0.0), math.pi / 2)
        out.append(capture(scene, Pose(el, pose.azimuth + d_az, pose.radius), resolution, fov_deg))
    return out


# --------------------------------------------------------------------------
# candidate poses


def sample_candidate_poses(
    n: int,
    elevation_range: tuple[float, float] = (0.8, 1.2),
    radius_range: tuple[float, float] = (2.2, 3.0),
    seed: int = 0,
    azimuth_range: tuple[float, float] = (0.0, TWO_PI),
) -> list[Pose]:
    """Stratified hemisphere samples: pose ``i`` has its azimuth in stratum ``i``."""
    if n < 1:
        raise ConfigurationError("need at least one candidate pose")
    for name, (lo, hi) in (("elevation", elevation_range), ("radius", radius_range), ("azimuth", azimuth_range)):
        if not hi >= lo:
            raise ConfigurationError(f"empty {name} range {lo}..{hi}")
    if elevation_range[0] < 0 or elevation_range[1] > math.pi / 2:
        raise ConfigurationError("elevation range must lie within [0, pi/2]")
    if radius_range[0] <= 0:
        raise ConfigurationError("radius range must be positive")
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0xCA4D])
    a0, a1 = azimuth_range
    az = a0 + (a1 - a0) * (np.arange(n) + rng.random(n)) / n
    el_strata = rng.permutation(n)
    el = elevation_range[0] + (elevation_range[1] - elevation_range[0]) * (el_strata + rng.random(n)) / n
    r = radius_range[0] + (radius_range[1] - radius_range[0]) * rng.random(n)
    return [Pose(float(e), float(a), float(rr)) for e, a, rr in zip(el, az, r)]


def azimuth_discrepancy(poses: list[Pose]) -> float:
    """Star discrepancy of the azimuths mapped to [0, 1)."""
    x = np.sort(np.array([p.azimuth for p in poses]) / TWO_PI)
    n = len(x)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - x), np.max(x - (i - 1) / n)))


# --------------------------------------------------------------------------
# file formats


def save_scene(scene: SyntheticScene, path: str | Path) -> None:
    """Little-endian sidecar: magic, version, H, W, seed, extent, then f32 grids."""
    h, w = scene.shape
    p = scene.params
    with open(path, "wb") as fh:
        fh.write(SCENE_MAGIC)
        fh.write(struct.pack("<IIIQ", SCENE_VERSION, h, w, scene.rng_seed & 0xFFFFFFFFFFFFFFFF))
        fh.write(struct.pack("<ddd", p.extent, p.h_min, p.amplitude))
        fh.write(scene.height_field.astype("<f4").tobytes())
        fh.write(np.moveaxis(scene.albedo_field, -1, 0).astype("<f4").tobytes())
        fh.write(scene.semantic_field.astype("<f4").tobytes())


def load_scene(path: str | Path) -> SyntheticScene:
    data = Path(path).read_bytes()
    if data[:4] != SCENE_MAGIC:
        raise DimensionError("not a scene sidecar file")
    version, h, w, seed = struct.unpack_from("<IIIQ", data, 4)
    if version != SCENE_VERSION:
        raise DimensionError(f"unsupported scene version {version}")
    extent, h_min, amplitude = struct.unpack_from("<ddd", data, 24)
    off = 48
    grids = np.frombuffer(data, dtype="<f4", offset=off, count=5 * h * w).astype(np.float64)
    height = grids[: h * w].reshape(h, w)
    albedo = np.moveaxis(grids[h * w : 4 * h * w].reshape(3, h, w), 0, -1)
    sem = grids[4 * h * w :].reshape(h, w).astype(np.int32)
    params = TerrainParams(extent=extent, h_min=h_min, amplitude=amplitude)
    return SyntheticScene(height, np.ascontiguousarray(albedo), sem, int(seed), params)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    img = to_uint8(image)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise DimensionError("only binary P6 files are supported")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pixels = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return pixels.astype(np.float64) / maxval


def export_capture(cap: Capture, stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    ppm = stem.with_suffix(".ppm")
    txt = stem.with_suffix(".depth.txt")
    write_ppm(ppm, cap.image)
    h, w = cap.depth.shape
    with open(txt, "w") as fh:
        fh.write(f"{h} {w}\n")
        np.savetxt(fh, cap.depth, fmt="%.6f")
    return ppm, txt


def read_depth_text(path: str | Path) -> np.ndarray:
    with open(path) as fh:
        h, w = (int(v) for v in fh.readline().split())
        depth = np.loadtxt(fh, ndmin=2)
    return depth.reshape(h, w)
