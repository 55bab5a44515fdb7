"""CPU splat rasterizer: EWA projection, front-to-back compositing and the
analytic backward pass used by bounded refinement.

Compositing is splat-major: splats are visited in depth order and each one
updates the pixels inside its 3-sigma box.  Per pixel this is the same
recurrence as the usual pixel-major loop, ``C += T * a * c; T *= 1 - a``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .camera import OrthoView, PerspectiveView

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_EPS = 1e-4
NEAR = 0.01
# splats whose centre projects further than this fraction of the half-image
# outside the frame are culled; their linearised footprints are meaningless
GUARD = 1.3
# screen-space low-pass added to every projected covariance (pixels^2)
BLUR = 0.3


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(N, 4) unit quaternions (w, x, y, z) -> (N, 3, 3) rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """(N, 3, 3) proper rotations -> (N, 4) unit quaternions (w, x, y, z)."""
    n = r.shape[0]
    q = np.empty((n, 4))
    tr = r[:, 0, 0] + r[:, 1, 1] + r[:, 2, 2]
    for i in range(n):
        m = r[i]
        if tr[i] > 0:
            s = np.sqrt(tr[i] + 1.0) * 2
            q[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return q


def covariance3d(scales: np.ndarray, quats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rot = quat_to_rotmat(quats)
    cov = np.einsum("nik,nk,njk->nij", rot, scales**2, rot)
    return cov, rot


@dataclass
class Projection:
    """Screen-space footprints of a batch of splats (pre-blur covariance)."""

    means2d: np.ndarray  # (N, 2) continuous pixel coords (u, v)
    cov2d: np.ndarray  # (N, 2, 2)
    depth: np.ndarray  # (N,)
    valid: np.ndarray  # (N,) bool; False = culled
    # cached intermediates for the backward pass
    t_cam: np.ndarray | None = None
    jac: np.ndarray | None = None
    cov_cam: np.ndarray | None = None
    rot: np.ndarray | None = None


def project(positions: np.ndarray, scales: np.ndarray, quats: np.ndarray, view) -> Projection:
    cov3, rot = covariance3d(scales, quats)
    if isinstance(view, OrthoView):
        ox, oy = view.origin
        means = np.stack([(positions[:, 0] - ox) / view.pixel_size, (positions[:, 1] - oy) / view.pixel_size], axis=1)
        cov2 = cov3[:, :2, :2] / view.pixel_size**2
        depth = view.top - positions[:, 2]
        return Projection(means, cov2, depth, depth > 0, rot=rot)

    k = view.intrinsics
    w_rot = view.rotation
    t = (positions - view.position) @ w_rot.T
    tz = t[:, 2]
    lim_x = GUARD * max(k.cx, k.width - k.cx) / k.fx
    lim_y = GUARD * max(k.cy, k.height - k.cy) / k.fy
    valid = (tz > NEAR) & (np.abs(t[:, 0]) <= lim_x * tz) & (np.abs(t[:, 1]) <= lim_y * tz)
    tz_safe = np.where(valid, tz, 1.0)
    n = positions.shape[0]
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = k.fx / tz_safe
    jac[:, 0, 2] = -k.fx * t[:, 0] / tz_safe**2
    jac[:, 1, 1] = k.fy / tz_safe
    jac[:, 1, 2] = -k.fy * t[:, 1] / tz_safe**2
    cov_cam = w_rot @ cov3 @ w_rot.T
    cov2 = jac @ cov_cam @ np.transpose(jac, (0, 2, 1))
    means = np.stack([k.fx * t[:, 0] / tz_safe + k.cx, k.fy * t[:, 1] / tz_safe + k.cy], axis=1)
    return Projection(means, cov2, tz, valid, t_cam=t, jac=jac, cov_cam=cov_cam, rot=rot)


def conics_and_radii(proj: Projection, blur: float = BLUR) -> tuple[np.ndarray, np.ndarray]:
    a = proj.cov2d[:, 0, 0] + blur
    b = proj.cov2d[:, 0, 1]
    c = proj.cov2d[:, 1, 1] + blur
    det = a * c - b * b
    ok = proj.valid & (det > 0)
    det_safe = np.where(ok, det, 1.0)
    conics = np.stack([c / det_safe, -b / det_safe, a / det_safe], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = np.where(ok, np.ceil(3.0 * np.sqrt(np.maximum(lam, 0.0))), 0.0)
    return conics, radii


# --------------------------------------------------------------------------
# kernels


@numba.njit(cache=True)
def _composite_forward(order, means, conics, opac, colors, radii, height, width, image, trans, last):
    for k in range(order.shape[0]):
        i = order[k]
        r = radii[i]
        if r <= 0.0:
            continue
        mx = means[i, 0]
        my = means[i, 1]
        x0 = max(0, int(np.floor(mx - r)))
        x1 = min(width - 1, int(np.ceil(mx + r)))
        y0 = max(0, int(np.floor(my - r)))
        y1 = min(height - 1, int(np.ceil(my + r)))
        if x0 > x1 or y0 > y1:
            continue
        ca = conics[i, 0]
        cb = conics[i, 1]
        cc = conics[i, 2]
        o = opac[i]
        for y in range(y0, y1 + 1):
            dy = y + 0.5 - my
            for x in range(x0, x1 + 1):
                t = trans[y, x]
                if t < T_EPS:
                    continue
                dx = x + 0.5 - mx
                q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                al = o * np.exp(-0.5 * q)
                if al < ALPHA_MIN:
                    continue
                if al > ALPHA_MAX:
                    al = ALPHA_MAX
                w = t * al
                image[y, x, 0] += w * colors[i, 0]
                image[y, x, 1] += w * colors[i, 1]
                image[y, x, 2] += w * colors[i, 2]
                trans[y, x] = t * (1.0 - al)
                last[y, x] = k


@numba.njit(cache=True)
def _composite_depth(order, means, conics, opac, depth, radii, height, width, out_depth, trans):
    for k in range(order.shape[0]):
        i = order[k]
        r = radii[i]
        if r <= 0.0:
            continue
        mx = means[i, 0]
        my = means[i, 1]
        x0 = max(0, int(np.floor(mx - r)))
        x1 = min(width - 1, int(np.ceil(mx + r)))
        y0 = max(0, int(np.floor(my - r)))
        y1 = min(height - 1, int(np.ceil(my + r)))
        for y in range(y0, y1 + 1):
            dy = y + 0.5 - my
            for x in range(x0, x1 + 1):
                t = trans[y, x]
                if t < T_EPS:
                    continue
                dx = x + 0.5 - mx
                q = conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy
                al = opac[i] * np.exp(-0.5 * q)
                if al < ALPHA_MIN:
                    continue
                if al > ALPHA_MAX:
                    al = ALPHA_MAX
                out_depth[y, x] += t * al * depth[i]
                trans[y, x] = t * (1.0 - al)


@numba.njit(cache=True)
def _composite_backward(order, means, conics, opac, colors, radii, height, width, trans_final, last, dl_dimg, g_mean, g_conic, g_opac, g_color):
    trans = trans_final.copy()
    acc = np.zeros((height, width, 3))
    for k in range(order.shape[0] - 1, -1, -1):
        i = order[k]
        r = radii[i]
        if r <= 0.0:
            continue
        mx = means[i, 0]
        my = means[i, 1]
        x0 = max(0, int(np.floor(mx - r)))
        x1 = min(width - 1, int(np.ceil(mx + r)))
        y0 = max(0, int(np.floor(my - r)))
        y1 = min(height - 1, int(np.ceil(my + r)))
        ca = conics[i, 0]
        cb = conics[i, 1]
        cc = conics[i, 2]
        o = opac[i]
        c0 = colors[i, 0]
        c1 = colors[i, 1]
        c2 = colors[i, 2]
        for y in range(y0, y1 + 1):
            dy = y + 0.5 - my
            for x in range(x0, x1 + 1):
                if k > last[y, x]:
                    continue
                dx = x + 0.5 - mx
                q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                g = np.exp(-0.5 * q)
                raw = o * g
                if raw < ALPHA_MIN:
                    continue
                al = raw if raw < ALPHA_MAX else ALPHA_MAX
                t = trans[y, x] / (1.0 - al)
                trans[y, x] = t
                w = al * t
                d0 = dl_dimg[y, x, 0]
                d1 = dl_dimg[y, x, 1]
                d2 = dl_dimg[y, x, 2]
                g_color[i, 0] += w * d0
                g_color[i, 1] += w * d1
                g_color[i, 2] += w * d2
                inv = 1.0 / (1.0 - al)
                dl_dal = d0 * (t * c0 - acc[y, x, 0] * inv) + d1 * (t * c1 - acc[y, x, 1] * inv) + d2 * (t * c2 - acc[y, x, 2] * inv)
                acc[y, x, 0] += w * c0
                acc[y, x, 1] += w * c1
                acc[y, x, 2] += w * c2
                if raw >= ALPHA_MAX:
                    continue
                g_opac[i] += dl_dal * g
                dl_dq = -0.5 * raw * dl_dal
                g_mean[i, 0] -= dl_dq * (2.0 * ca * dx + 2.0 * cb * dy)
                g_mean[i, 1] -= dl_dq * (2.0 * cb * dx + 2.0 * cc * dy)
                g_conic[i, 0] += dl_dq * dx * dx
                g_conic[i, 1] += dl_dq * 2.0 * dx * dy
                g_conic[i, 2] += dl_dq * dy * dy


# --------------------------------------------------------------------------
# python-facing wrappers


@dataclass
class RasterState:
    """Everything the backward pass needs from one forward render."""

    order: np.ndarray
    proj: Projection
    conics: np.ndarray
    radii: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    trans: np.ndarray
    last: np.ndarray


def depth_order(proj: Projection) -> np.ndarray:
    """Front-to-back order of valid splats; ties resolved by index."""
    idx = np.flatnonzero(proj.valid)
    return idx[np.argsort(proj.depth[idx], kind="stable")].astype(np.int64)


def rasterize(proj: Projection, opacities: np.ndarray, colors: np.ndarray, resolution: tuple[int, int], order: np.ndarray | None = None, opacity_scale: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, RasterState]:
    h, w = resolution
    if order is None:
        order = depth_order(proj)
    conics, radii = conics_and_radii(proj)
    radii = np.where(proj.valid, radii, 0.0)
    opac = opacities if opacity_scale is None else opacities * opacity_scale
    image = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    last = np.full((h, w), -1, dtype=np.int64)
    _composite_forward(
        np.ascontiguousarray(order, dtype=np.int64),
        np.ascontiguousarray(proj.means2d),
        conics,
        np.ascontiguousarray(opac, dtype=np.float64),
        np.ascontiguousarray(colors, dtype=np.float64),
        radii,
        h,
        w,
        image,
        trans,
        last,
    )
    state = RasterState(order, proj, conics, radii, opac, colors, trans, last)
    return image, 1.0 - trans, state


def rasterize_depth(proj: Projection, opacities: np.ndarray, resolution: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Alpha-weighted expected depth and accumulated alpha."""
    h, w = resolution
    order = depth_order(proj)
    conics, radii = conics_and_radii(proj)
    out = np.zeros((h, w))
    trans = np.ones((h, w))
    _composite_depth(order, np.ascontiguousarray(proj.means2d), conics, np.ascontiguousarray(opacities, dtype=np.float64), np.ascontiguousarray(proj.depth, dtype=np.float64), radii, h, w, out, trans)
    return out, 1.0 - trans


def backward_screen(state: RasterState, dl_dimg: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. (means2d, conics, opacity, color) given dL/d(image)."""
    n = state.colors.shape[0]
    h, w = dl_dimg.shape[:2]
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_color = np.zeros((n, 3))
    _composite_backward(
        state.order,
        np.ascontiguousarray(state.proj.means2d),
        state.conics,
        np.ascontiguousarray(state.opacities, dtype=np.float64),
        np.ascontiguousarray(state.colors, dtype=np.float64),
        state.radii,
        h,
        w,
        state.trans,
        state.last,
        np.ascontiguousarray(dl_dimg, dtype=np.float64),
        g_mean,
        g_conic,
        g_opac,
        g_color,
    )
    return g_mean, g_conic, g_opac, g_color


def backward_projection(proj: Projection, g_mean: np.ndarray, g_conic: np.ndarray, scales: np.ndarray, view: PerspectiveView, blur: float = BLUR) -> tuple[np.ndarray, np.ndarray]:
    """Chain screen-space gradients back to world positions and log-scales."""
    a = proj.cov2d[:, 0, 0] + blur
    b = proj.cov2d[:, 0, 1]
    c = proj.cov2d[:, 1, 1] + blur
    det = a * c - b * b
    det = np.where(proj.valid & (det > 0), det, 1.0)
    d2 = det * det
    ga, gb, gc = g_conic[:, 0], g_conic[:, 1], g_conic[:, 2]
    # conic = (c, -b, a) / det
    g_a = ga * (-c * c / d2) + gb * (b * c / d2) + gc * (-b * b / d2)
    g_b = ga * (2 * b * c / d2) + gb * (-(det + 2 * b * b) / d2) + gc * (2 * a * b / d2)
    g_c = ga * (-b * b / d2) + gb * (a * b / d2) + gc * (-a * a / d2)
    gsig = np.empty((len(a), 2, 2))
    gsig[:, 0, 0] = g_a
    gsig[:, 0, 1] = gsig[:, 1, 0] = 0.5 * g_b
    gsig[:, 1, 1] = g_c

    k = view.intrinsics
    jac, mcam, t = proj.jac, proj.cov_cam, proj.t_cam
    jt = np.transpose(jac, (0, 2, 1))
    g_m = jt @ gsig @ jac
    g_j = 2.0 * gsig @ jac @ mcam
    w_rot = view.rotation
    g_cov3 = w_rot.T @ g_m @ w_rot
    rot = proj.rot
    # d L / d s_k^2 = r_k^T G r_k
    g_s2 = np.einsum("nik,nij,njk->nk", rot, g_cov3, rot)
    g_logscale = 2.0 * scales**2 * g_s2

    tz = np.where(proj.valid, t[:, 2], 1.0)
    tx, ty = t[:, 0], t[:, 1]
    gu, gv = g_mean[:, 0], g_mean[:, 1]
    g_t = np.zeros_like(t)
    g_t[:, 0] = gu * k.fx / tz + g_j[:, 0, 2] * (-k.fx / tz**2)
    g_t[:, 1] = gv * k.fy / tz + g_j[:, 1, 2] * (-k.fy / tz**2)
    g_t[:, 2] = (
        gu * (-k.fx * tx / tz**2)
        + gv * (-k.fy * ty / tz**2)
        + g_j[:, 0, 0] * (-k.fx / tz**2)
        + g_j[:, 0, 2] * (2 * k.fx * tx / tz**3)
        + g_j[:, 1, 1] * (-k.fy / tz**2)
        + g_j[:, 1, 2] * (2 * k.fy * ty / tz**3)
    )
    g_pos = g_t @ w_rot
    g_pos[~proj.valid] = 0.0
    g_logscale[~proj.valid] = 0.0
    return g_pos, g_logscale
