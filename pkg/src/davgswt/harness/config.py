"""Experiment configuration: one flat record holding every module knob.

Files are either JSON objects or plain ``key = value`` lines (``#`` starts a
comment).  Tuples are written as comma-separated numbers, e.g.
``capture_hw = 128, 128``.  Unknown keys are rejected.
"""
from __future__ import annotations

import json
import types
import typing
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ..active import ActiveConfig
from ..errors import ConfigurationError
from ..lod import CachePolicy, LodParams
from ..prior import PriorConfig
from ..scene import TerrainParams
from ..uncertainty import EstimatorConfig
from ..wang import TileParams

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    # scene
    scene_seed: int = 0
    scene_size: int = 256
    terrain_extent: float = 6.0
    terrain_amplitude: float = 0.5
    # acquisition
    n_candidates: int = 64
    k: int = 4
    T: int = 3
    n_init: int = 8
    capture_hw: tuple[int, int] = (128, 128)
    insert_stride: int = 4
    refine_hw: tuple[int, int] = (64, 64)
    refine_iters: int = 10
    n_validation: int = 16
    fov_deg: float = 40.0
    # prior and estimator
    M: int = 5
    p_drop: float = 0.15
    noise_gain: float = 0.1
    latent_channels: int = 4
    latent_hw: tuple[int, int] = (64, 64)
    prior_render_hw: tuple[int, int] = (64, 64)
    estimator_mode: str = "latent_space"
    lam: float = 0.1
    # tiles
    K: int = 2
    tile_px: int = 128
    overlap_px: int = 16
    tile_world: float = 0.8
    gamma_mode: str = "adaptive"
    tiling_rows: int = 4
    tiling_cols: int = 4
    seam_crop: int = 64
    # lod and cache
    lod_levels: int = 6
    reduction_ratio: int = 4
    lod_base_distance: float = 2.0
    lod_growth: float = 1.6
    tau: float = 0.6
    base_bins: int = 8
    hot_bins: int = 16
    cold_prefetch: int = 3
    hot_prefetch: int = 6
    # rendering
    frames: int = 120
    render_hw: tuple[int, int] = (128, 128)
    path_radius: float = 3.0
    path_elevation: float = 1.0
    # experiment runners
    seeds: int = 5
    sweep_k: tuple[int, ...] = (2, 4, 8)
    sweep_pdrop: tuple[float, ...] = (0.05, 0.15, 0.25)
    sweep_lambda: tuple[float, ...] = (0.0, 0.1, 0.5)
    sweep_tau: tuple[float, ...] = (0.4, 0.6, 0.8)
    budget_T: int = 5

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema version {self.schema_version}")
        if self.n_candidates < 1 or self.seeds < 1 or self.frames < 1:
            raise ConfigurationError("counts must be positive")
        if self.tiling_rows < 2 or self.tiling_cols < 2:
            raise ConfigurationError("tiling must be at least 2x2")
        # constructing every module config runs its own validation
        self.active()
        self.prior()
        self.estimator()
        self.tiles()
        self.lod()
        self.cache()
        self.terrain()

    def terrain(self) -> TerrainParams:
        return TerrainParams(extent=self.terrain_extent, amplitude=self.terrain_amplitude)

    def active(self) -> ActiveConfig:
        return ActiveConfig(
            k=self.k, T=self.T, n_init=self.n_init, capture_hw=self.capture_hw, insert_stride=self.insert_stride,
            refine_hw=self.refine_hw, refine_iters=self.refine_iters, n_validation=self.n_validation, fov_deg=self.fov_deg,
        )

    def prior(self) -> PriorConfig:
        return PriorConfig(M=self.M, p_drop=self.p_drop, channels=self.latent_channels, latent_hw=self.latent_hw, noise_gain=self.noise_gain, seed=self.seed, render_hw=self.prior_render_hw, fov_deg=self.fov_deg)

    def estimator(self) -> EstimatorConfig:
        return EstimatorConfig(mode=self.estimator_mode, lam=self.lam)

    def tiles(self) -> TileParams:
        return TileParams(tile_px=self.tile_px, overlap_px=self.overlap_px, tile_world=self.tile_world, seed=self.seed, gamma_mode=self.gamma_mode)

    def lod(self) -> LodParams:
        return LodParams(levels=self.lod_levels, reduction_ratio=self.reduction_ratio, base_distance=self.lod_base_distance, distance_growth=self.lod_growth)

    def cache(self) -> CachePolicy:
        return CachePolicy(tau=self.tau, base_bins=self.base_bins, hot_bins=self.hot_bins, cold_prefetch=self.cold_prefetch, hot_prefetch=self.hot_prefetch, elevation=self.path_elevation)

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def dump(self, path: str | Path) -> None:
        """Write the flat ``key = value`` form."""
        lines = []
        for k, v in self.to_dict().items():
            lines.append(f"{k} = {', '.join(str(x) for x in v) if isinstance(v, list) else v}")
        Path(path).write_text("\n".join(lines) + "\n")


_HINTS = typing.get_type_hints(ExperimentConfig)


def _coerce(key: str, raw):
    hint = _HINTS[key]
    origin = typing.get_origin(hint)
    if origin is tuple:
        items = raw if isinstance(raw, (list, tuple)) else [x for x in str(raw).split(",") if x.strip()]
        elem = typing.get_args(hint)[0]
        return tuple(elem(x.strip() if isinstance(x, str) else x) for x in items)
    if origin in (typing.Union, types.UnionType):
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    if hint is bool:
        return str(raw).strip().lower() in ("1", "true", "yes", "on")
    if hint is int:
        if isinstance(raw, float) and not raw.is_integer():
            raise ConfigurationError(f"{key} must be an integer")
        return int(raw) if not isinstance(raw, str) else int(raw.strip())
    if hint is float:
        return float(raw)
    return str(raw).strip()


def from_mapping(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"unknown configuration keys: {', '.join(unknown)}")
    try:
        typed = {k: _coerce(k, v) for k, v in values.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad configuration value: {exc}") from exc
    return replace(base or ExperimentConfig(), **typed)


def parse_flat(text: str) -> dict[str, str]:
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ConfigurationError("JSON configuration must be an object")
        return from_mapping(data)
    return from_mapping(parse_flat(text))
