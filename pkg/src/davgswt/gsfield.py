"""Explicit Gaussian-splat field, insertion from captures and bounded refinement."""
from __future__ import annotations

import logging
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import raster
from .camera import Intrinsics, OrthoView, PerspectiveView, Pose
from .errors import DimensionError, IntegrityError, RefinementError
from .scene import Capture

log = logging.getLogger(__name__)

FIELD_MAGIC = b"DAVG"
FIELD_VERSION = 1
INSERT_OPACITY = 0.8
# splat std-dev in units of (depth * pixel angle * stride)
INSERT_SCALE = 0.5
PRUNE_OPACITY = 0.01
SH_C0 = 0.28209479177387814
PARAM_GROUPS = ("color", "opacity", "position", "scale")


@dataclass(frozen=True)
class Splat:
    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise IntegrityError("splat rotation must be a unit quaternion")
        if np.any(np.asarray(self.scale) <= 0):
            raise IntegrityError("splat scales must be positive")
        if not 0.0 < self.opacity <= 1.0:
            raise IntegrityError("splat opacity must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class GaussianField:
    """Struct-of-arrays splat set.  Every mutation returns a new revision."""

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    bounds: tuple[np.ndarray, np.ndarray]
    revision: int = 0

    @classmethod
    def empty(cls, bounds: tuple[Sequence[float], Sequence[float]]) -> "GaussianField":
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)), (lo, hi), 0)

    @classmethod
    def from_splats(cls, splats: Iterable[Splat], bounds=None, revision: int = 0) -> "GaussianField":
        splats = list(splats)
        pos = np.array([s.position for s in splats], dtype=float).reshape(-1, 3)
        if bounds is None:
            bounds = (pos.min(axis=0) - 1e-6, pos.max(axis=0) + 1e-6) if len(pos) else (np.zeros(3), np.zeros(3))
        return cls(
            pos,
            np.array([s.scale for s in splats], dtype=float).reshape(-1, 3),
            np.array([s.rotation for s in splats], dtype=float).reshape(-1, 4),
            np.array([s.opacity for s in splats], dtype=float),
            np.array([s.color for s in splats], dtype=float).reshape(-1, 3),
            (np.asarray(bounds[0], float), np.asarray(bounds[1], float)),
            revision,
        )

    def __len__(self) -> int:
        return self.positions.shape[0]

    def splat(self, i: int) -> Splat:
        return Splat(self.positions[i].copy(), self.scales[i].copy(), self.rotations[i].copy(), float(self.opacities[i]), self.colors[i].copy())

    def evolve(self, **arrays) -> "GaussianField":
        return replace(self, revision=self.revision + 1, **arrays)

    def subset(self, index: np.ndarray) -> "GaussianField":
        return GaussianField(self.positions[index], self.scales[index], self.rotations[index], self.opacities[index], self.colors[index], self.bounds, self.revision)

    def concat(self, other: "GaussianField") -> "GaussianField":
        lo = np.minimum(self.bounds[0], other.bounds[0])
        hi = np.maximum(self.bounds[1], other.bounds[1])
        return self.evolve(
            positions=np.concatenate([self.positions, other.positions]),
            scales=np.concatenate([self.scales, other.scales]),
            rotations=np.concatenate([self.rotations, other.rotations]),
            opacities=np.concatenate([self.opacities, other.opacities]),
            colors=np.concatenate([self.colors, other.colors]),
            bounds=(lo, hi),
        )

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.bounds[1] - self.bounds[0]))


# --------------------------------------------------------------------------
# projection and rendering


@dataclass(frozen=True)
class Footprint:
    mean: np.ndarray
    covariance: np.ndarray
    depth: float


def project_splat(splat: Splat, pose: Pose, intrinsics: Intrinsics) -> Footprint | None:
    """Screen-space footprint of one splat, or ``None`` if it is behind the camera."""
    view = PerspectiveView.from_pose(pose, intrinsics)
    proj = raster.project(splat.position[None], np.asarray(splat.scale, float)[None], np.asarray(splat.rotation, float)[None], view)
    if not proj.valid[0]:
        return None
    return Footprint(proj.means2d[0], proj.cov2d[0], float(proj.depth[0]))


def make_view(pose: Pose, resolution: tuple[int, int], fov_deg: float = 40.0) -> PerspectiveView:
    h, w = resolution
    return PerspectiveView.from_pose(pose, Intrinsics.from_fov(w, h, fov_deg))


def _check_ordering(ordering: np.ndarray, n: int) -> np.ndarray:
    order = np.asarray(ordering)
    if order.ndim != 1 or order.shape[0] != n or not np.array_equal(np.sort(order), np.arange(n)):
        raise IntegrityError("ordering must be a permutation of splat indices")
    return order.astype(np.int64)


def render(fld: GaussianField, view: PerspectiveView | OrthoView, ordering: np.ndarray | None = None, opacity_scale: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    if ordering is not None:
        ordering = _check_ordering(ordering, len(fld))
    proj = raster.project(fld.positions, fld.scales, fld.rotations, view)
    image, alpha, _ = raster.rasterize(proj, fld.opacities, fld.colors, view.resolution, ordering, opacity_scale)
    return image, alpha


def render_view(fld: GaussianField, pose: Pose, resolution: tuple[int, int] = (128, 128), ordering: np.ndarray | None = None, fov_deg: float = 40.0) -> tuple[np.ndarray, np.ndarray]:
    """Front-to-back alpha composite of the field seen from ``pose``.

    Returns the RGB image and the per-pixel accumulated alpha.
    """
    return render(fld, make_view(pose, resolution, fov_deg), ordering)


def render_depth(fld: GaussianField, view) -> tuple[np.ndarray, np.ndarray]:
    proj = raster.project(fld.positions, fld.scales, fld.rotations, view)
    return raster.rasterize_depth(proj, fld.opacities, view.resolution)


# --------------------------------------------------------------------------
# insertion


def insert_from_capture(fld: GaussianField, cap: Capture, intrinsics: Intrinsics | None = None, stride: float = 4, fov_deg: float = 40.0, mask: np.ndarray | None = None) -> GaussianField:
    """Back-project every ``stride``-th pixel with positive depth into a new splat.

    ``mask`` (H x W bool) further restricts which sampled pixels are used.
    """
    h, w = cap.depth.shape
    k = intrinsics or Intrinsics.from_fov(w, h, fov_deg)
    if not np.any(cap.depth > 0):
        warnings.warn("capture has no valid depth; insertion skipped", RuntimeWarning, stacklevel=2)
        return fld
    if not math.isfinite(stride) or stride > max(h, w):
        return fld.evolve()
    s = int(stride)
    if s < 1:
        raise DimensionError("stride must be >= 1")
    view = PerspectiveView.from_pose(cap.pose, k)
    rows = np.arange(s // 2, h, s)
    cols = np.arange(s // 2, w, s)
    rays = view.pixel_rays()[np.ix_(rows, cols)]
    depth = cap.depth[np.ix_(rows, cols)]
    keep = depth > 0
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)[np.ix_(rows, cols)]
    pts = view.position + depth[keep][:, None] * rays[keep]
    n = pts.shape[0]
    if n == 0:
        return fld.evolve()
    sigma = INSERT_SCALE * depth[keep] * s / k.fx
    new = GaussianField(
        pts,
        np.repeat(sigma[:, None], 3, axis=1),
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.full(n, INSERT_OPACITY),
        cap.image[np.ix_(rows, cols)][keep].copy(),
        (pts.min(axis=0), pts.max(axis=0)),
        fld.revision,
    )
    return fld.concat(new)


# --------------------------------------------------------------------------
# refinement


@dataclass(frozen=True)
class LearningRates:
    """Per-group step sizes.  Position and log-scale steps are multiplied by the
    field diagonal; every step is applied to the pixel-summed loss gradient."""

    position: float = 1e-3
    color: float = 1e-2
    opacity: float = 1e-2
    scale: float = 1e-3


@dataclass
class _Eval:
    loss: float
    states: list
    views: list
    residual_signs: list


def _params(fld: GaussianField) -> dict[str, np.ndarray]:
    return {
        "color": fld.colors.copy(),
        "opacity": fld.opacities.copy(),
        "position": fld.positions.copy(),
        "scale": np.log(fld.scales),
    }


def _evaluate(p: dict, rotations: np.ndarray, captures: Sequence[Capture], views: list) -> _Eval:
    total = 0.0
    states, signs = [], []
    scales = np.exp(p["scale"])
    for cap, view in zip(captures, views):
        proj = raster.project(p["position"], scales, rotations, view)
        image, _, state = raster.rasterize(proj, p["opacity"], p["color"], view.resolution)
        diff = image - cap.image
        total += float(np.mean(np.abs(diff)))
        states.append(state)
        signs.append(np.sign(diff))
    return _Eval(total / len(captures), states, views, signs)


def _gradient(ev: _Eval, p: dict) -> dict[str, np.ndarray]:
    """Gradient of the mean per-pixel L1 loss."""
    g = {k: np.zeros_like(v) for k, v in p.items()}
    scales = np.exp(p["scale"])
    n_caps = len(ev.states)
    for state, view, sign in zip(ev.states, ev.views, ev.residual_signs):
        dl_dimg = sign / (sign.size * n_caps)
        g_mean, g_conic, g_opac, g_color = raster.backward_screen(state, dl_dimg)
        g_pos, g_ls = raster.backward_projection(state.proj, g_mean, g_conic, scales, view)
        g["color"] += g_color
        g["opacity"] += g_opac
        g["position"] += g_pos
        g["scale"] += g_ls
    return g


def loss_and_gradients(fld: GaussianField, captures: Sequence[Capture], fov_deg: float = 40.0) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-pixel L1 render-vs-capture loss and its analytic gradients.

    The ``scale`` gradient is with respect to log-scales.
    """
    views = [make_view(c.pose, c.image.shape[:2], fov_deg) for c in captures]
    p = _params(fld)
    ev = _evaluate(p, fld.rotations, captures, views)
    return ev.loss, _gradient(ev, p)


def refine_bounded(
    fld: GaussianField,
    captures: Sequence[Capture],
    iters: int,
    lr: LearningRates | None = None,
    groups: Sequence[str] = PARAM_GROUPS,
    fov_deg: float = 40.0,
    max_backtracks: int = 8,
) -> tuple[GaussianField, list[float]]:
    """Bounded gradient descent on render-vs-capture L1 with light pruning.

    A step that would raise the loss is halved until it does not (or dropped),
    so the returned trace is non-increasing.  Splats whose opacity ends below
    0.01 are pruned.  On a non-finite loss the input field is left as is and
    :class:`RefinementError` is raised.
    """
    if iters < 0:
        raise DimensionError("iters must be >= 0")
    if not captures:
        raise DimensionError("refinement needs at least one capture")
    unknown = set(groups) - set(PARAM_GROUPS)
    if unknown:
        raise DimensionError(f"unknown parameter groups {sorted(unknown)}")
    lr = lr or LearningRates()
    diag = fld.diagonal or 1.0
    rates = {"color": lr.color, "opacity": lr.opacity, "position": lr.position * diag, "scale": lr.scale * diag}
    views = [make_view(c.pose, c.image.shape[:2], fov_deg) for c in captures]
    npix = float(np.mean([c.image.size for c in captures]))
    lo, hi = fld.bounds

    p = _params(fld)
    ev = _evaluate(p, fld.rotations, captures, views)
    if not math.isfinite(ev.loss):
        raise RefinementError("initial loss is not finite", {"iteration": 0})
    trace = [ev.loss]
    mult = 1.0
    for it in range(iters):
        grad = _gradient(ev, p)
        for name in PARAM_GROUPS:
            if not np.all(np.isfinite(grad[name])):
                raise RefinementError(f"non-finite gradient in group {name!r}", {"iteration": it + 1, "group": name})
        accepted = False
        for _ in range(max_backtracks):
            trial = dict(p)
            for name in groups:
                trial[name] = p[name] - mult * rates[name] * npix * grad[name]
            trial["color"] = np.clip(trial["color"], 0.0, 1.0)
            trial["opacity"] = np.clip(trial["opacity"], 1e-6, 1.0)
            trial["position"] = np.clip(trial["position"], lo, hi)
            tev = _evaluate(trial, fld.rotations, captures, views)
            if not math.isfinite(tev.loss):
                raise RefinementError("non-finite loss during refinement", {"iteration": it + 1})
            if tev.loss <= ev.loss:
                p, ev, accepted = trial, tev, True
                mult = min(1.0, mult * 1.5)
                break
            mult *= 0.5
        if not accepted:
            log.debug("refinement step %d rejected after %d backtracks", it + 1, max_backtracks)
        trace.append(ev.loss)

    keep = p["opacity"] >= PRUNE_OPACITY
    out = fld.evolve(
        positions=p["position"][keep],
        scales=np.exp(p["scale"][keep]),
        rotations=fld.rotations[keep],
        opacities=p["opacity"][keep],
        colors=p["color"][keep],
    )
    return out, trace


def reconstruction_error(fld: GaussianField, captures: Sequence[Capture], fov_deg: float = 40.0) -> float:
    """Mean per-pixel L1 between renders of ``fld`` and the captures."""
    errs = [np.mean(np.abs(render_view(fld, c.pose, c.image.shape[:2], fov_deg=fov_deg)[0] - c.image)) for c in captures]
    return float(np.mean(errs))


# --------------------------------------------------------------------------
# serialization


def save_field(fld: GaussianField, path: str | Path) -> None:
    """Versioned little-endian binary: header (count, bounds, revision) then f32 records."""
    n = len(fld)
    rec = np.concatenate([fld.positions, fld.scales, fld.rotations, fld.opacities[:, None], fld.colors], axis=1)
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<IIQ", FIELD_VERSION, n, fld.revision))
        fh.write(np.concatenate(fld.bounds).astype("<f4").tobytes())
        fh.write(rec.astype("<f4").tobytes())


def load_field(path: str | Path) -> GaussianField:
    data = Path(path).read_bytes()
    if data[:4] != FIELD_MAGIC:
        raise DimensionError("not a splat field file")
    version, n, revision = struct.unpack_from("<IIQ", data, 4)
    if version != FIELD_VERSION:
        raise DimensionError(f"unsupported field version {version}")
    b = np.frombuffer(data, dtype="<f4", offset=20, count=6).astype(np.float64)
    rec = np.frombuffer(data, dtype="<f4", offset=44, count=14 * n).astype(np.float64).reshape(n, 14)
    rot = rec[:, 6:10]
    rot = rot / np.linalg.norm(rot, axis=1, keepdims=True) if n else rot
    return GaussianField(rec[:, 0:3].copy(), rec[:, 3:6].copy(), rot.copy(), rec[:, 10].copy(), rec[:, 11:14].copy(), (b[:3], b[3:]), int(revision))


def export_ply(fld: GaussianField, path: str | Path) -> None:
    """ASCII PLY using the property names common 3DGS viewers read."""
    n = len(fld)
    props = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    o = np.clip(fld.opacities, 1e-6, 1 - 1e-6)
    cols = np.concatenate(
        [fld.positions, (fld.colors - 0.5) / SH_C0, np.log(o / (1 - o))[:, None], np.log(fld.scales), fld.rotations], axis=1
    )
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {n}\n")
        for name in props:
            fh.write(f"property float {name}\n")
        fh.write("end_header\n")
        np.savetxt(fh, cols, fmt="%.7g")
