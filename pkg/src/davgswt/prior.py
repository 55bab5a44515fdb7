"""Generative-prior interface and the synthetic ensemble default.

The synthetic prior renders the current field, encodes it to a small latent
grid and perturbs each ensemble member with dropout-masked Gaussian noise whose
strength grows where the scene has been observed less.  Ensemble spread is
therefore a controllable stand-in for epistemic uncertainty.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .camera import Intrinsics, PerspectiveView, Pose
from .errors import ConfigurationError, DimensionError
from .gsfield import GaussianField, render
from .scene import Capture


@dataclass(frozen=True)
class PriorConfig:
    M: int = 5
    p_drop: float = 0.15
    channels: int = 4
    latent_hw: tuple[int, int] = (64, 64)
    noise_gain: float = 0.1
    seed: int = 0
    render_hw: tuple[int, int] = (64, 64)
    fov_deg: float = 40.0

    def __post_init__(self):
        if self.M < 2:
            raise ConfigurationError("ensemble size M must be >= 2")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigurationError("p_drop must lie in [0, 1)")
        if self.channels < 3:
            raise ConfigurationError("latent needs at least 3 channels")
        if self.noise_gain < 0:
            raise ConfigurationError("noise_gain must be >= 0")
        if min(self.latent_hw) < 1 or min(self.render_hw) < 1:
            raise ConfigurationError("resolutions must be positive")


@dataclass(frozen=True)
class LatentSample:
    mean: np.ndarray  # (C, Hz, Wz)
    variance: np.ndarray  # (C, Hz, Wz)


@dataclass(frozen=True)
class LatentEnsemble:
    samples: list[LatentSample]
    pose: Pose
    decoded: list[np.ndarray]
    pose_index: int = -1

    @property
    def means(self) -> np.ndarray:
        return np.stack([s.mean for s in self.samples])

    @property
    def variances(self) -> np.ndarray:
        return np.stack([s.variance for s in self.samples])


# --------------------------------------------------------------------------
# observation bookkeeping


@dataclass
class ObservationMap:
    """Per-texel count of captures that saw the texel, on a ground grid."""

    counts: np.ndarray
    lo: np.ndarray  # (x, y) of grid corner
    hi: np.ndarray
    plane_z: float

    @classmethod
    def for_bounds(cls, bounds: tuple[np.ndarray, np.ndarray], grid: tuple[int, int] = (64, 64)) -> "ObservationMap":
        lo, hi = bounds
        return cls(np.zeros(grid, dtype=np.int64), np.asarray(lo[:2], float), np.asarray(hi[:2], float), float(0.5 * (lo[2] + hi[2])))

    def texel(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        gh, gw = self.counts.shape
        u = (xy[..., 0] - self.lo[0]) / (self.hi[0] - self.lo[0])
        v = (xy[..., 1] - self.lo[1]) / (self.hi[1] - self.lo[1])
        inside = (u >= 0) & (u < 1) & (v >= 0) & (v < 1)
        col = np.clip((u * gw).astype(np.int64), 0, gw - 1)
        row = np.clip((v * gh).astype(np.int64), 0, gh - 1)
        return row, col, inside

    def add_capture(self, cap: Capture, fov_deg: float = 40.0) -> None:
        h, w = cap.depth.shape
        view = PerspectiveView.from_pose(cap.pose, Intrinsics.from_fov(w, h, fov_deg))
        hit = cap.depth > 0
        pts = view.position + cap.depth[hit][:, None] * view.pixel_rays()[hit]
        row, col, inside = self.texel(pts[:, :2])
        seen = np.zeros(self.counts.shape, dtype=bool)
        seen[row[inside], col[inside]] = True
        self.counts += seen

    def deficit(self) -> np.ndarray:
        return 1.0 / (1.0 + self.counts)

    def copy(self) -> "ObservationMap":
        return ObservationMap(self.counts.copy(), self.lo.copy(), self.hi.copy(), self.plane_z)


def deficit_at_view(obs: ObservationMap, pose: Pose, hw: tuple[int, int], fov_deg: float = 40.0) -> np.ndarray:
    """Deficit seen through each pixel of an ``hw`` image at ``pose``.

    Rays are intersected with the map's reference plane; rays that miss the
    mapped region see nothing to be uncertain about and get deficit 0.
    """
    h, w = hw
    view = PerspectiveView.from_pose(pose, Intrinsics.from_fov(w, h, fov_deg))
    rays = view.pixel_rays()
    dz = rays[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (obs.plane_z - view.position[2]) / dz
    ok = np.isfinite(t) & (t > 0)
    xy = view.position[:2] + np.where(ok, t, 0.0)[..., None] * rays[..., :2]
    row, col, inside = obs.texel(xy)
    d = obs.deficit()[row, col]
    return np.where(ok & inside, d, 0.0)


# --------------------------------------------------------------------------
# encode / decode


def _resample(img: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Area average for integer shrink factors, bilinear (pixel-center aligned) otherwise."""
    h, w = img.shape[:2]
    th, tw = hw
    if (h, w) == (th, tw):
        return img.copy()
    if h % th == 0 and w % tw == 0:
        fy, fx = h // th, w // tw
        return img.reshape(th, fy, tw, fx, *img.shape[2:]).mean(axis=(1, 3))
    ys = (np.arange(th) + 0.5) * h / th - 0.5
    xs = (np.arange(tw) + 0.5) * w / tw - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    if img.ndim == 2:
        return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")
    return np.stack([ndimage.map_coordinates(img[..., c], [yy, xx], order=1, mode="nearest") for c in range(img.shape[2])], axis=-1)


def encode(image: np.ndarray, channels: int = 4, latent_hw: tuple[int, int] = (64, 64)) -> LatentSample:
    """RGB bands followed by luminance bands, area-resampled to ``latent_hw``."""
    small = _resample(np.asarray(image, dtype=float), latent_hw)
    lum = small.mean(axis=2)
    bands = [small[..., 0], small[..., 1], small[..., 2]] + [lum] * (channels - 3)
    mean = np.stack(bands)
    return LatentSample(mean, np.zeros_like(mean))


def decode(sample: LatentSample, target_resolution: tuple[int, int]) -> np.ndarray:
    """Merge bands back to RGB, upsample bilinearly and clamp to [0, 1].

    Luminance bands shift all three colour channels by their offset from the
    RGB bands' own luminance.
    """
    z = sample.mean
    rgb = z[:3]
    if z.shape[0] > 3:
        rgb = rgb + (z[3:].mean(axis=0) - rgb.mean(axis=0))[None]
    img = _resample(np.moveaxis(rgb, 0, -1), target_resolution)
    return np.clip(img, 0.0, 1.0)


# --------------------------------------------------------------------------
# sampling


class Prior(Protocol):
    def sample(self, fld: GaussianField, pose: Pose, obs: ObservationMap, pose_index: int = 0, stream: int = 0) -> LatentEnsemble: ...


def derived_seed(*parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])


def sample_ensemble(
    fld: GaussianField,
    pose: Pose,
    config: PriorConfig,
    observation_map: ObservationMap,
    pose_index: int = 0,
    stream: int = 0,
    decode_hw: tuple[int, int] | None = None,
) -> LatentEnsemble:
    """Draw ``config.M`` noisy latents for the field as seen from ``pose``.

    Randomness is derived from ``(config.seed, pose_index, stream)`` so each
    candidate can be scored independently.  When no noise can be injected
    (``p_drop == 0`` or ``noise_gain == 0``) a single forward pass is made and
    replicated.
    """
    h, w = config.render_hw
    view = PerspectiveView.from_pose(pose, Intrinsics.from_fov(w, h, config.fov_deg))
    image, _ = render(fld, view)
    base = encode(image, config.channels, config.latent_hw)
    out_hw = decode_hw or config.latent_hw
    if config.p_drop == 0.0 or config.noise_gain == 0.0:
        dec = decode(base, out_hw)
        return LatentEnsemble([base] * config.M, pose, [dec] * config.M, pose_index)

    deficit = deficit_at_view(observation_map, pose, config.latent_hw, config.fov_deg)
    std = config.noise_gain * (1.0 + deficit)
    rng = np.random.default_rng(derived_seed(config.seed, pose_index, stream))
    c = config.channels
    samples, decoded = [], []
    for _ in range(config.M):
        mask = rng.random(config.latent_hw) < config.p_drop
        sd = std * mask
        noise = rng.standard_normal((c, *config.latent_hw)) * sd[None]
        s = LatentSample(base.mean + noise, np.broadcast_to(sd * sd, (c, *config.latent_hw)).copy())
        samples.append(s)
        decoded.append(decode(s, out_hw))
    return LatentEnsemble(samples, pose, decoded, pose_index)


@dataclass
class SyntheticPrior:
    """Default in-repo prior; see :func:`sample_ensemble`."""

    config: PriorConfig = field(default_factory=PriorConfig)

    def sample(self, fld: GaussianField, pose: Pose, obs: ObservationMap, pose_index: int = 0, stream: int = 0) -> LatentEnsemble:
        return sample_ensemble(fld, pose, self.config, obs, pose_index, stream)


def check_ensemble(ens: LatentEnsemble) -> None:
    if len(ens.samples) < 2:
        raise ConfigurationError("ensemble needs at least two members")
    shape = ens.samples[0].mean.shape
    for s in ens.samples:
        if s.mean.shape != shape or s.variance.shape != shape:
            raise DimensionError("ensemble members disagree on latent dims")
    if len(ens.decoded) != len(ens.samples):
        raise DimensionError("one decoded image per sample is required")


def ensemble_from_arrays(means: Sequence[np.ndarray], variances: Sequence[np.ndarray], pose: Pose | None = None, decode_hw: tuple[int, int] | None = None) -> LatentEnsemble:
    """Build an ensemble directly from tensors (handy for external priors and tests)."""
    samples = [LatentSample(np.asarray(m, float), np.asarray(v, float)) for m, v in zip(means, variances)]
    hw = decode_hw or samples[0].mean.shape[1:]
    decoded = [decode(s, hw) if s.mean.shape[0] >= 3 else np.zeros((*hw, 3)) for s in samples]
    return LatentEnsemble(samples, pose or Pose(0.5, 0.0, 1.0), decoded)
