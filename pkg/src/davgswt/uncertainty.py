"""Uncertainty estimators: image-space score, ensemble 2-Wasserstein divergence,
the combined latent score, a perceptual-distance stand-in and the cost model."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .camera import Pose
from .errors import ConfigurationError, DimensionError, IntegrityError
from .prior import LatentEnsemble, check_ensemble

MODES = ("latent_space", "image_space")


@dataclass(frozen=True)
class EstimatorConfig:
    mode: str = "latent_space"
    lam: float = 0.1
    sobel_padding: str = "replicate"
    # (a, b) positions in the ensemble after sorting members by mean-tensor norm
    lpips_pair_rule: tuple[int, int] = (0, 1)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown estimator mode {self.mode!r}")
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if self.sobel_padding != "replicate":
            raise ConfigurationError("only replicate padding is supported")
        a, b = self.lpips_pair_rule
        if a == b or min(a, b) < 0:
            raise ConfigurationError("perceptual pair needs two distinct members")


@dataclass(frozen=True)
class UncertaintyReport:
    pose_index: int
    score: float
    w2_component: float
    perceptual_component: float
    spatial_map: np.ndarray
    # Sobel term in image-space mode, 0 otherwise
    gradient_component: float = 0.0


def sobel_gradient_scalar(image: np.ndarray) -> float:
    """Global mean of the per-pixel Sobel gradient magnitude of the grey image."""
    img = np.asarray(image, dtype=float)
    if img.ndim < 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise DimensionError("image must be at least 3x3")
    grey = img.mean(axis=2) if img.ndim == 3 else img
    gx = ndimage.sobel(grey, axis=1, mode="nearest")
    gy = ndimage.sobel(grey, axis=0, mode="nearest")
    return float(np.mean(np.hypot(gx, gy)))


def _block_stats(img: np.ndarray, block: int) -> tuple[np.ndarray, np.ndarray]:
    h, w = img.shape[:2]
    rs = np.arange(0, h, block)
    cs = np.arange(0, w, block)
    counts = np.outer(np.diff(np.append(rs, h)), np.diff(np.append(cs, w)))[..., None]
    s1 = np.add.reduceat(np.add.reduceat(img, rs, axis=0), cs, axis=1)
    s2 = np.add.reduceat(np.add.reduceat(img * img, rs, axis=0), cs, axis=1)
    mean = s1 / counts
    var = np.maximum(s2 / counts - mean * mean, 0.0)
    return mean, np.sqrt(var)


def perceptual_distance(a: np.ndarray, b: np.ndarray, levels: int = 3, block: int = 8) -> float:
    """Multi-scale block-statistics dissimilarity in [0, 1].

    At each pyramid level the images are cut into ``block``-sized blocks and
    the per-channel block means and standard deviations are compared.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    dists = []
    for lvl in range(levels):
        if lvl:
            h, w = a.shape[0] // 2 * 2, a.shape[1] // 2 * 2
            if h == 0 or w == 0:
                break
            a = a[:h, :w].reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))
            b = b[:h, :w].reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))
        ma, sa = _block_stats(a, block)
        mb, sb = _block_stats(b, block)
        dists.append(float(np.mean(0.5 * (np.abs(ma - mb) + np.abs(sa - sb)))))
    return float(np.mean(dists))


def w2_ensemble(ensemble: LatentEnsemble) -> tuple[float, np.ndarray]:
    """Mean pairwise closed-form 2-Wasserstein divergence between members.

    Per location the pair term is ``|mu_i - mu_j|^2 + sum_c (sigma_i - sigma_j)^2``.
    The pair sum is evaluated through the centred identity
    ``sum_{i<j} |a_i - a_j|^2 = M * sum_i |a_i - mean(a)|^2``.
    """
    check_ensemble(ensemble)
    mu = ensemble.means
    var = ensemble.variances
    if np.any(var < 0):
        raise IntegrityError("negative latent variance")
    return w2_from_arrays(mu, var)


def w2_from_arrays(mu: np.ndarray, var: np.ndarray) -> tuple[float, np.ndarray]:
    m = mu.shape[0]
    if m < 2:
        raise ConfigurationError("W2 needs at least two members")
    sig = np.sqrt(var)
    total = np.zeros(mu.shape[2:])
    for arr in (mu, sig):
        dev = arr - arr.mean(axis=0, keepdims=True)
        total += m * np.einsum("mc...,mc...->...", dev, dev)
    spatial = total / (m * (m - 1) / 2)
    return float(spatial.mean()), spatial


def canonical_pair(ensemble: LatentEnsemble, rule: tuple[int, int] = (0, 1)) -> tuple[int, int]:
    """Indices of the perceptual pair after a stable sort by mean-tensor norm.

    Ties in norm are broken by the mean tensors' bytes, so the choice does not
    depend on member order.
    """
    norms = [float(np.linalg.norm(s.mean)) for s in ensemble.samples]
    keys = sorted(range(len(norms)), key=lambda i: (norms[i], ensemble.samples[i].mean.tobytes()))
    return keys[rule[0]], keys[rule[1]]


def score_view(fld, pose: Pose, ensemble: LatentEnsemble, config: EstimatorConfig, sobel_scale: float = 1.0) -> UncertaintyReport:
    """Uncertainty report for one candidate pose.

    In image-space mode the Sobel term is divided by ``sobel_scale`` (see
    :func:`score_batch`, which sets it from the candidate batch).
    """
    if ensemble.pose != pose:
        raise ConfigurationError("ensemble was drawn for a different pose")
    check_ensemble(ensemble)
    ia, ib = canonical_pair(ensemble, config.lpips_pair_rule)
    perc = perceptual_distance(ensemble.decoded[ia], ensemble.decoded[ib])
    if config.mode == "latent_space":
        w2, spatial = w2_ensemble(ensemble)
        return UncertaintyReport(ensemble.pose_index, w2 + config.lam * perc, w2, perc, spatial)
    mean_img = np.mean(ensemble.decoded, axis=0)
    grad = sobel_gradient_scalar(mean_img) / sobel_scale
    spatial = np.zeros(ensemble.samples[0].mean.shape[1:])
    return UncertaintyReport(ensemble.pose_index, grad + config.lam * perc, 0.0, perc, spatial, grad)


def score_batch(fld, poses: Sequence[Pose], ensembles: Sequence[LatentEnsemble], config: EstimatorConfig) -> list[UncertaintyReport]:
    """Score a candidate batch.  Image-space Sobel terms are rescaled by their
    95th percentile over the batch before the perceptual term is added."""
    scale = 1.0
    if config.mode == "image_space":
        raw = [sobel_gradient_scalar(np.mean(e.decoded, axis=0)) for e in ensembles]
        p95 = float(np.percentile(raw, 95)) if raw else 0.0
        scale = p95 if p95 > 0 else 1.0
    return [score_view(fld, p, e, config, scale) for p, e in zip(poses, ensembles)]


def estimate_cost(n_theta: int, M: int, C: int, H_z: int, W_z: int) -> int:
    """Scalar-operation count of scoring ``n_theta`` candidates in latent space."""
    for v in (n_theta, M, C, H_z, W_z):
        if v < 1:
            raise DimensionError("cost arguments must be >= 1")
    return n_theta * M * C * H_z * W_z


def write_reports_csv(path: str | Path, reports: Sequence[UncertaintyReport], poses: Sequence[Pose]) -> None:
    by_index = {i: p for i, p in enumerate(poses)}
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["pose_index", "elevation", "azimuth", "radius", "score", "w2", "perceptual"])
        for r in reports:
            p = by_index[r.pose_index]
            out.writerow([r.pose_index, f"{p.elevation:.9g}", f"{p.azimuth:.9g}", f"{p.radius:.9g}", f"{r.score:.9g}", f"{r.w2_component:.9g}", f"{r.perceptual_component:.9g}"])
