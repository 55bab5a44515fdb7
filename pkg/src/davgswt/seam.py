"""Semantic-aware seam optimisation for tile construction.

Pixels of a tile's overlap bands are labelled with the source (center patch or
one of four edge strips) that supplies them.  The labelling minimises unary
hard constraints plus a pairwise seam cost that mixes colour and semantic
discontinuity, weighted by how uncertain the patch is.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DimensionError, IntegrityError
from .maxflow import min_cut, to_capacity
from .scene import write_ppm

HARD = 1e9
EPS_DEN = 1e-6
G_S_OFF = 1e-3
CENTER, NORTH, EAST, SOUTH, WEST = range(5)
SIDES = ("N", "E", "S", "W")


@dataclass(frozen=True)
class LabelMap:
    """Connected-component labels plus the palette class of every pixel."""

    labels: np.ndarray
    label_count: int
    classes: np.ndarray

    def boundary(self) -> np.ndarray:
        """Pixels with a 4-neighbour carrying a different label."""
        lab = self.labels
        b = np.zeros(lab.shape, dtype=bool)
        dh = lab[:, 1:] != lab[:, :-1]
        dv = lab[1:, :] != lab[:-1, :]
        b[:, 1:] |= dh
        b[:, :-1] |= dh
        b[1:, :] |= dv
        b[:-1, :] |= dv
        return b


def segment_labels(image: np.ndarray, quantization: int = 4, smooth: float = 0.0, min_region: int = 0) -> LabelMap:
    """Uniform colour quantisation into Q^3 cells, then 4-connected components.

    ``smooth`` pre-blurs the image (Gaussian sigma in pixels).  Components
    smaller than ``min_region`` pixels are absorbed into the most common class
    around them.  Labels are numbered in raster order of first appearance.
    """
    if quantization < 2:
        raise ConfigurationError("quantization needs at least 2 bins")
    img = np.asarray(image, dtype=float)
    if smooth > 0:
        img = ndimage.gaussian_filter(img, (smooth, smooth, 0), mode="nearest")
    q = np.clip((img * quantization).astype(np.int64), 0, quantization - 1)
    classes = (q[..., 0] * quantization + q[..., 1]) * quantization + q[..., 2]
    if min_region > 1:
        classes = _absorb_small(classes, min_region)
    raw = np.zeros(classes.shape, dtype=np.int64)
    offset = 0
    for c in np.unique(classes):
        comp, n = ndimage.label(classes == c)
        raw[comp > 0] = comp[comp > 0] + offset
        offset += n
    _, first = np.unique(raw.ravel(), return_index=True)
    order = np.argsort(first)
    remap = np.empty(offset + 1, dtype=np.int64)
    remap[raw.ravel()[first[order]]] = np.arange(order.size)
    return LabelMap(remap[raw], int(order.size), classes)


def _absorb_small(classes: np.ndarray, min_region: int, rounds: int = 8) -> np.ndarray:
    classes = classes.copy()
    for _ in range(rounds):
        changed = False
        for c in np.unique(classes):
            comp, n = ndimage.label(classes == c)
            if n == 0:
                continue
            sizes = np.bincount(comp.ravel())
            for k in np.flatnonzero(sizes[1:] < min_region) + 1:
                blob = comp == k
                ring = ndimage.binary_dilation(blob) & ~blob
                if not ring.any():
                    continue
                vals, counts = np.unique(classes[ring], return_counts=True)
                classes[blob] = vals[np.argmax(counts)]
                changed = True
        if not changed:
            break
    return classes


def gamma_weight(u_bar: float | np.ndarray) -> float | np.ndarray:
    """Colour-vs-semantic mixing weight, 1 - sigmoid(2 (u - 0.5))."""
    return 1.0 - 1.0 / (1.0 + np.exp(-2.0 * (np.asarray(u_bar, dtype=float) - 0.5)))


def pairwise_weight(d_i, g_i, d_s, g_s, gamma):
    """Seam cost ``(g D_I + (1-g) D_S) / max(g G_I + (1-g) G_S, 1e-6)``."""
    num = gamma * np.asarray(d_i) + (1.0 - gamma) * np.asarray(d_s)
    den = np.maximum(gamma * np.asarray(g_i) + (1.0 - gamma) * np.asarray(g_s), EPS_DEN)
    return num / den


# --------------------------------------------------------------------------
# graph, energy, solvers


@dataclass
class SeamGraph:
    """Grid labelling problem.

    ``unary[l, y, x]`` is the cost of label ``l`` at a pixel.  ``horiz[a, b, y, x]``
    is the cost of labels ``(a, b)`` on the edge between ``(y, x)`` and
    ``(y, x + 1)``; ``vert`` likewise for ``(y, x)``-``(y + 1, x)``.
    """

    unary: np.ndarray
    horiz: np.ndarray
    vert: np.ndarray

    def __post_init__(self):
        L, h, w = self.unary.shape
        if self.horiz.shape != (L, L, h, max(w - 1, 0)) or self.vert.shape != (L, L, max(h - 1, 0), w):
            raise DimensionError("pairwise arrays do not match the unary grid")
        for arr in (self.unary, self.horiz, self.vert):
            if not np.all(np.isfinite(arr)):
                raise IntegrityError("graph terms must be finite")
        if np.any(self.horiz < 0) or np.any(self.vert < 0):
            raise IntegrityError("pairwise weights must be non-negative")

    @classmethod
    def potts(cls, unary: np.ndarray, w_h: np.ndarray, w_v: np.ndarray) -> "SeamGraph":
        L = unary.shape[0]
        off = 1.0 - np.eye(L)
        return cls(unary, off[:, :, None, None] * w_h[None, None], off[:, :, None, None] * w_v[None, None])

    @property
    def label_count(self) -> int:
        return self.unary.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.unary.shape[1:]

    def energy(self, assignment: np.ndarray) -> float:
        x = np.asarray(assignment)
        h, w = self.shape
        yy, xx = np.mgrid[0:h, 0:w]
        e = self.unary[x, yy, xx].sum()
        if w > 1:
            e += self.horiz[x[:, :-1], x[:, 1:], yy[:, :-1], xx[:, :-1]].sum()
        if h > 1:
            e += self.vert[x[:-1, :], x[1:, :], yy[:-1, :], xx[:-1, :]].sum()
        return float(e)


@dataclass
class SeamResult:
    assignment: np.ndarray
    energy: float
    seam_pixels: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def seam_mask(assignment: np.ndarray) -> np.ndarray:
    return LabelMap(assignment, 0, assignment).boundary()


def _solve_binary(c0: np.ndarray, c1: np.ndarray, edges: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]]) -> tuple[np.ndarray, int]:
    """Minimise a binary energy over ``n`` nodes; returns (labels, truncations).

    ``edges`` holds ``(i, j, A, B, C, D)`` arrays: the cost of ``(y_i, y_j)``
    being (0,0), (0,1), (1,0), (1,1).  Non-submodular pairs are truncated.
    """
    n = c0.shape[0]
    c0 = c0.astype(float).copy()
    c1 = c1.astype(float).copy()
    ti, tj, tw = [], [], []
    truncated = 0
    for i, j, A, B, C, D in edges:
        if i.size == 0:
            continue
        np.add.at(c1, i, C - A)
        np.add.at(c1, j, D - C)
        w = B + C - A - D
        bad = w < 0
        truncated += int(bad.sum())
        ti.append(i)
        tj.append(j)
        tw.append(np.where(bad, 0.0, w))
    base = np.minimum(c0, c1)
    c0 -= base
    c1 -= base
    s, t = n, n + 1
    nodes = np.arange(n)
    tails = np.concatenate([np.full(n, s), nodes] + ti)
    heads = np.concatenate([nodes, np.full(n, t)] + tj)
    fwd = np.concatenate([to_capacity(c1), to_capacity(c0)] + [to_capacity(w) for w in tw])
    _, source_side = min_cut(n + 2, tails, heads, fwd, np.zeros_like(fwd), s, t)
    return (~source_side[:n]).astype(np.int64), truncated


def _grid_edges(h: int, w: int):
    idx = np.arange(h * w).reshape(h, w)
    return (idx[:, :-1].ravel(), idx[:, 1:].ravel()), (idx[:-1, :].ravel(), idx[1:, :].ravel())


def min_cut_binary(graph: SeamGraph) -> SeamResult:
    """Exact minimum of a two-label grid energy via one s-t cut."""
    if graph.label_count != 2:
        raise ConfigurationError("binary cut needs exactly two labels")
    h, w = graph.shape
    if h * w == 0:
        raise DimensionError("graph has no nodes")
    U = graph.unary.reshape(2, -1)
    (hi, hj), (vi, vj) = _grid_edges(h, w)
    edges = []
    for (i, j), V in (((hi, hj), graph.horiz), ((vi, vj), graph.vert)):
        V = V.reshape(2, 2, -1)
        edges.append((i, j, V[0, 0], V[0, 1], V[1, 0], V[1, 1]))
    y, trunc = _solve_binary(U[0], U[1], edges)
    x = y.reshape(h, w)
    return SeamResult(x, graph.energy(x), seam_mask(x), {"truncations": trunc, "sweeps": 1, "energy_history": [graph.energy(x)]})


def _expansion_move(graph: SeamGraph, x: np.ndarray, alpha: int) -> tuple[np.ndarray, int]:
    h, w = graph.shape
    flat = x.ravel()
    n = flat.size
    U = graph.unary.reshape(graph.label_count, -1)
    free = (flat != alpha) & (U[alpha] < HARD)
    fidx = np.flatnonzero(free)
    if fidx.size == 0:
        return x, 0
    local = np.full(n, -1, dtype=np.int64)
    local[fidx] = np.arange(fidx.size)
    c0 = U[flat[fidx], fidx].astype(float)
    c1 = U[alpha, fidx].astype(float)
    edges = []
    (hi, hj), (vi, vj) = _grid_edges(h, w)
    for (i, j), V in (((hi, hj), graph.horiz), ((vi, vj), graph.vert)):
        V = V.reshape(graph.label_count, graph.label_count, -1)
        e = np.arange(i.size)
        xi, xj = flat[i], flat[j]
        A = V[xi, xj, e]
        B = V[xi, alpha, e]
        C = V[alpha, xj, e]
        D = V[alpha, alpha, e]
        fi, fj = free[i], free[j]
        both = fi & fj
        edges.append((local[i[both]], local[j[both]], A[both], B[both], C[both], D[both]))
        # one endpoint fixed at its current label: fold into the free one's unary
        m = fi & ~fj
        np.add.at(c0, local[i[m]], A[m])
        np.add.at(c1, local[i[m]], C[m])
        m = ~fi & fj
        np.add.at(c0, local[j[m]], A[m])
        np.add.at(c1, local[j[m]], B[m])
    y, trunc = _solve_binary(c0, c1, edges)
    out = flat.copy()
    out[fidx[y == 1]] = alpha
    return out.reshape(h, w), trunc


def alpha_expansion(graph: SeamGraph, max_sweeps: int = 5, init: np.ndarray | None = None) -> SeamResult:
    """Multi-label minimisation by repeated expansion moves over labels 0..L-1.

    A move is kept only if it lowers the exact energy, so the energy never
    rises.  With two labels the problem is solved directly by one cut.
    """
    L = graph.label_count
    if L < 2:
        raise ConfigurationError("alpha expansion needs at least two labels")
    if L == 2:
        return min_cut_binary(graph)
    x = np.argmin(graph.unary, axis=0) if init is None else np.asarray(init, dtype=np.int64).copy()
    energy = graph.energy(x)
    history = [energy]
    truncations = 0
    sweeps = 0
    for _ in range(max_sweeps):
        sweeps += 1
        improved = False
        for alpha in range(L):
            cand, trunc = _expansion_move(graph, x, alpha)
            truncations += trunc
            e = graph.energy(cand)
            if e < energy - 1e-12 * max(1.0, abs(energy)):
                x, energy, improved = cand, e, True
            history.append(energy)
        if not improved:
            break
    return SeamResult(x, energy, seam_mask(x), {"truncations": truncations, "sweeps": sweeps, "energy_history": history})


# --------------------------------------------------------------------------
# tile patches


@dataclass(frozen=True)
class Source:
    image: np.ndarray
    labels: LabelMap


def _sobel_mag(img: np.ndarray) -> np.ndarray:
    grey = img.mean(axis=2)
    return np.hypot(ndimage.sobel(grey, axis=1, mode="nearest"), ndimage.sobel(grey, axis=0, mode="nearest")) / 8.0


def _pair_terms(imgs, grads, classes, bnd, sl_s, sl_t, gamma):
    """(L, L, ...) seam costs between the pixel sets ``sl_s`` and ``sl_t``."""
    a_s, a_t = imgs[(slice(None),) + sl_s], imgs[(slice(None),) + sl_t]
    d_i = 0.5 * (np.linalg.norm(a_s[:, None] - a_s[None], axis=-1) + np.linalg.norm(a_t[:, None] - a_t[None], axis=-1))
    g_s_pix = grads[(slice(None),) + sl_s]
    g_t_pix = grads[(slice(None),) + sl_t]
    g_i = 0.25 * (g_s_pix[:, None] + g_s_pix[None] + g_t_pix[:, None] + g_t_pix[None])
    c_s, c_t = classes[(slice(None),) + sl_s], classes[(slice(None),) + sl_t]
    d_s = ((c_s[:, None] != c_s[None]) | (c_t[:, None] != c_t[None])).astype(float)
    b_s, b_t = bnd[(slice(None),) + sl_s], bnd[(slice(None),) + sl_t]
    on = b_s[:, None] | b_s[None] | b_t[:, None] | b_t[None]
    g_sem = np.where(on, 1.0, G_S_OFF)
    W = pairwise_weight(d_i, g_i, d_s, g_sem, gamma)
    L = imgs.shape[0]
    W[np.arange(L), np.arange(L)] = 0.0
    return W


def tile_graph(center: Source, strips: dict[str, Source], overlap_width: int, gamma: float) -> tuple[SeamGraph, np.ndarray, np.ndarray]:
    """Seam graph for one tile plus the stacked source images and classes.

    ``strips`` maps N/E/S/W to band-shaped sources: N and S are
    ``overlap_width`` rows tall, E and W ``overlap_width`` columns wide.
    """
    h, w = center.image.shape[:2]
    ow = overlap_width
    if ow < 2:
        raise ConfigurationError("overlap width must be >= 2")
    if 2 * ow > min(h, w):
        raise ConfigurationError("overlap width exceeds half the tile size")
    L = 5
    imgs = np.zeros((L, h, w, 3))
    classes = np.full((L, h, w), -1, dtype=np.int64)
    bnd = np.zeros((L, h, w), dtype=bool)
    valid = np.zeros((L, h, w), dtype=bool)
    regions = {
        "N": (slice(0, ow), slice(0, w)),
        "E": (slice(0, h), slice(w - ow, w)),
        "S": (slice(h - ow, h), slice(0, w)),
        "W": (slice(0, h), slice(0, ow)),
    }
    imgs[CENTER] = center.image
    classes[CENTER] = center.labels.classes
    bnd[CENTER] = center.labels.boundary()
    valid[CENTER] = True
    for lab, side in zip((NORTH, EAST, SOUTH, WEST), SIDES):
        src = strips[side]
        reg = regions[side]
        shape = (reg[0].stop - reg[0].start, reg[1].stop - reg[1].start)
        if src.image.shape[:2] != shape:
            raise DimensionError(f"strip {side} has shape {src.image.shape[:2]}, expected {shape}")
        imgs[lab][reg] = src.image
        classes[lab][reg] = src.labels.classes
        bnd[lab][reg] = src.labels.boundary()
        valid[lab][reg] = True

    unary = np.where(valid, 0.0, HARD)
    pinned = np.full((h, w), -1, dtype=np.int64)
    pinned[ow : h - ow, ow : w - ow] = CENTER
    pinned[1 : h - 1, 0] = WEST
    pinned[1 : h - 1, w - 1] = EAST
    pinned[0, :] = NORTH
    pinned[h - 1, :] = SOUTH
    for lab in range(L):
        unary[lab][(pinned >= 0) & (pinned != lab)] = HARD

    grads = np.stack([_sobel_mag(im) for im in imgs])
    horiz = _pair_terms(imgs, grads, classes, bnd, (slice(None), slice(0, w - 1)), (slice(None), slice(1, w)), gamma)
    vert = _pair_terms(imgs, grads, classes, bnd, (slice(0, h - 1), slice(None)), (slice(1, h), slice(None)), gamma)
    return SeamGraph(unary, horiz, vert), imgs, classes


def build_tile_patch(center: Source, strips: dict[str, Source], overlap_width: int, u_bar: float, gamma: float | None = None, max_sweeps: int = 4) -> tuple[SeamResult, np.ndarray]:
    """Cut the overlap bands between center and strips; returns the seam result
    and the composited tile image.  ``gamma`` overrides ``gamma_weight(u_bar)``."""
    g = float(gamma_weight(u_bar)) if gamma is None else float(gamma)
    graph, imgs, classes = tile_graph(center, strips, overlap_width, g)
    res = alpha_expansion(graph, max_sweeps)
    h, w = graph.shape
    yy, xx = np.mgrid[0:h, 0:w]
    composite = imgs[res.assignment, yy, xx]
    res.diagnostics["gamma"] = g
    res.diagnostics["label_crossings"] = label_crossings(res.assignment, classes)
    return res, composite


def label_crossings(assignment: np.ndarray, classes: np.ndarray) -> int:
    """Seam edges across which the composited semantic class changes."""
    h, w = assignment.shape
    yy, xx = np.mgrid[0:h, 0:w]
    comp = classes[assignment, yy, xx]
    cut_h = (assignment[:, 1:] != assignment[:, :-1]) & (comp[:, 1:] != comp[:, :-1])
    cut_v = (assignment[1:, :] != assignment[:-1, :]) & (comp[1:, :] != comp[:-1, :])
    return int(cut_h.sum() + cut_v.sum())


def write_label_ppm(path, assignment: np.ndarray) -> None:
    """Indexed label map as a colour PPM (one fixed colour per source)."""
    palette = np.array([[0.5, 0.5, 0.5], [0.9, 0.2, 0.2], [0.2, 0.8, 0.2], [0.2, 0.3, 0.9], [0.9, 0.8, 0.1]])
    write_ppm(path, palette[np.asarray(assignment) % len(palette)])
