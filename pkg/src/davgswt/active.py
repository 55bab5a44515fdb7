"""Active viewpoint selection: score candidates, take the top-k, capture, update."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .camera import Pose
from .errors import BudgetError, ConfigurationError, DavError, LoopAborted
from .gsfield import GaussianField, LearningRates, insert_from_capture, refine_bounded, render_view
from .harness.metrics import compute_psnr
from .prior import ObservationMap, Prior, PriorConfig, SyntheticPrior, _resample, derived_seed
from .scene import Capture, SyntheticScene, capture_burst, sample_candidate_poses
from .uncertainty import EstimatorConfig, UncertaintyReport, score_batch

log = logging.getLogger(__name__)

STRATEGIES = ("active", "random")


@dataclass(frozen=True)
class ActiveConfig:
    k: int = 4
    T: int = 3
    B: int | None = None
    n_init: int = 8
    selection_tie_rule: str = "lowest_index"
    capture_hw: tuple[int, int] = (128, 128)
    insert_stride: int = 4
    refine_hw: tuple[int, int] = (64, 64)
    refine_iters: int = 10
    # the loop only inserts splats where the current field misses the capture
    insert_alpha: float = 0.9
    insert_error: float = 0.1
    n_validation: int = 16
    validation_seed: int = 9_176_321
    fov_deg: float = 40.0
    elevation_range: tuple[float, float] = (0.8, 1.2)
    radius_range: tuple[float, float] = (2.2, 3.0)
    burst: int = 1
    # a validation error may rise by this fraction per iteration before it counts as a violation
    monotone_tolerance: float = 0.02

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")
        if self.T < 0:
            raise ConfigurationError("T must be >= 0")
        if self.B is not None and self.B < 0:
            raise ConfigurationError("B must be >= 0")
        if self.n_init < 0 or self.n_validation < 1:
            raise ConfigurationError("view counts out of range")
        if self.selection_tie_rule != "lowest_index":
            raise ConfigurationError("only the lowest-index tie rule is supported")

    @property
    def budget(self) -> int:
        return self.k * self.T if self.B is None else self.B

    @property
    def n_iterations(self) -> int:
        return min(self.T, self.budget // self.k)


@dataclass
class IterationRecord:
    iteration: int
    selected: list[int]
    scores: list[float]
    error: float
    psnr: float
    revision: int
    n_captured: int
    score_seconds: float = 0.0


@dataclass
class LoopTrace:
    records: list[IterationRecord] = field(default_factory=list)
    initial_error: float = math.nan
    initial_psnr: float = math.nan
    monotone_violations: int = 0

    @property
    def selected(self) -> list[int]:
        return [i for r in self.records for i in r.selected]

    @property
    def final_psnr(self) -> float:
        return self.records[-1].psnr if self.records else self.initial_psnr

    @property
    def final_error(self) -> float:
        return self.records[-1].error if self.records else self.initial_error

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["iteration", "pose_index", "score", "psnr_after"])
            for r in self.records:
                for idx, s in zip(r.selected, r.scores):
                    out.writerow([r.iteration, idx, f"{s:.9g}", f"{r.psnr:.6f}"])

    def to_record(self, include_timing: bool = False) -> dict:
        recs = []
        for r in self.records:
            d = asdict(r)
            if not include_timing:
                d.pop("score_seconds")
            recs.append(d)
        return {"initial_error": self.initial_error, "initial_psnr": self.initial_psnr, "monotone_violations": self.monotone_violations, "iterations": recs}

    def write_json(self, path: str | Path, config: dict | None = None) -> None:
        Path(path).write_text(json.dumps({"config": config or {}, "trace": self.to_record()}, indent=2, sort_keys=True))


def select_top_k(reports: Sequence[UncertaintyReport], k: int, exclude: set[int] | Sequence[int] = ()) -> list[int]:
    """The ``k`` best non-excluded candidates by score, best first.

    Equal scores go to the lower pose index.
    """
    excl = set(exclude)
    pool = [r for r in reports if r.pose_index not in excl]
    if k > len(pool):
        raise BudgetError(f"cannot select {k} of {len(pool)} remaining candidates")
    pool.sort(key=lambda r: (-r.score, r.pose_index))
    return [r.pose_index for r in pool[:k]]


# --------------------------------------------------------------------------
# validation and state


@dataclass
class Validation:
    captures: list[Capture]
    fov_deg: float = 40.0

    @classmethod
    def for_scene(cls, scene: SyntheticScene, cfg: ActiveConfig) -> "Validation":
        poses = sample_candidate_poses(cfg.n_validation, cfg.elevation_range, cfg.radius_range, seed=cfg.validation_seed)
        return cls([capture_burst(scene, p, cfg.capture_hw, fov_deg=cfg.fov_deg)[0] for p in poses], cfg.fov_deg)

    def evaluate(self, fld: GaussianField) -> tuple[float, float]:
        """Mean L1 and mean PSNR of renders against the held-out captures."""
        l1, psnr = [], []
        for c in self.captures:
            img, _ = render_view(fld, c.pose, c.image.shape[:2], fov_deg=self.fov_deg)
            l1.append(float(np.mean(np.abs(img - c.image))))
            psnr.append(compute_psnr(img, c.image))
        return float(np.mean(l1)), float(np.mean(psnr))


@dataclass
class Reconstruction:
    """Mutable bookkeeping for one reconstruction run (single writer)."""

    scene: SyntheticScene
    field: GaussianField
    observations: ObservationMap
    captures: list[Capture] = field(default_factory=list)
    captured: set[int] = field(default_factory=set)


def initial_reconstruction(scene: SyntheticScene, cfg: ActiveConfig, seed: int, obs_grid: tuple[int, int] = (64, 64)) -> Reconstruction:
    """Seed the field from ``n_init`` views confined to half the azimuth circle.

    The other half of the scene starts unobserved, which gives the active loop
    something to find.
    """
    poses = sample_candidate_poses(cfg.n_init, cfg.elevation_range, cfg.radius_range, seed=seed, azimuth_range=(0.0, math.pi)) if cfg.n_init else []
    rec = Reconstruction(scene, GaussianField.empty(scene.bounds()), ObservationMap.for_bounds(scene.bounds(), obs_grid))
    for p in poses:
        _ingest(rec, p, cfg, seed)
    if rec.captures:
        rec.field = _refine(rec.field, rec.captures, cfg)
    return rec


def _ingest(rec: Reconstruction, pose: Pose, cfg: ActiveConfig, seed: int) -> list[Capture]:
    caps = capture_burst(rec.scene, pose, cfg.capture_hw, burst=cfg.burst, seed=seed, fov_deg=cfg.fov_deg)
    for c in caps:
        mask = None
        if len(rec.field):
            img, alpha = render_view(rec.field, c.pose, c.image.shape[:2], fov_deg=cfg.fov_deg)
            mask = (alpha < cfg.insert_alpha) | (np.abs(img - c.image).mean(axis=2) > cfg.insert_error)
        rec.field = insert_from_capture(rec.field, c, stride=cfg.insert_stride, fov_deg=cfg.fov_deg, mask=mask)
        rec.observations.add_capture(c, cfg.fov_deg)
    rec.captures.extend(caps)
    return caps


def _refine(fld: GaussianField, caps: Sequence[Capture], cfg: ActiveConfig) -> GaussianField:
    if cfg.refine_iters == 0 or not caps:
        return fld
    small = [_downsample_capture(c, cfg.refine_hw) for c in caps]
    out, trace = refine_bounded(fld, small, cfg.refine_iters, LearningRates(), fov_deg=cfg.fov_deg)
    log.debug("refined %d -> %d splats, loss %.4f -> %.4f", len(fld), len(out), trace[0], trace[-1])
    return out


def _downsample_capture(c: Capture, hw: tuple[int, int]) -> Capture:
    if c.image.shape[:2] == tuple(hw):
        return c
    return Capture(_resample(c.image, hw), _resample(c.depth, hw), c.pose)


# --------------------------------------------------------------------------
# the loop

ScoreFn = Callable[[GaussianField, Sequence[Pose], Sequence[int], ObservationMap, int], list[UncertaintyReport]]


def make_scorer(prior: Prior, estimator_cfg: EstimatorConfig) -> ScoreFn:
    def score(fld, poses, indices, obs, iteration):
        ens = [prior.sample(fld, poses[i], obs, i, iteration) for i in indices]
        return score_batch(fld, [poses[i] for i in indices], ens, estimator_cfg)

    return score


def run_dav_loop(
    scene: SyntheticScene,
    field_0: GaussianField | Reconstruction,
    candidates: Sequence[Pose],
    active_cfg: ActiveConfig,
    prior_cfg: PriorConfig | None = None,
    estimator_cfg: EstimatorConfig | None = None,
    *,
    prior: Prior | None = None,
    scorer: ScoreFn | None = None,
    validation: Validation | None = None,
    strategy: str = "active",
    seed: int = 0,
) -> tuple[GaussianField, LoopTrace]:
    """Run ``T`` rounds of score / select / capture / insert / refine.

    ``field_0`` may be a bare field or a :class:`Reconstruction` that also
    carries the observation map and the captures made so far.  ``scorer``
    overrides the prior + estimator pair entirely.  With ``strategy="random"``
    the scoring phase is skipped and ``k`` uncaptured candidates are drawn
    uniformly instead.
    """
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy {strategy!r}")
    if isinstance(field_0, Reconstruction):
        rec = Reconstruction(scene, field_0.field, field_0.observations.copy(), list(field_0.captures), set(field_0.captured))
    else:
        rec = Reconstruction(scene, field_0, ObservationMap.for_bounds(scene.bounds()))
    if scorer is None and strategy == "active":
        scorer = make_scorer(prior or SyntheticPrior(prior_cfg or PriorConfig()), estimator_cfg or EstimatorConfig())
    validation = validation or Validation.for_scene(scene, active_cfg)
    trace = LoopTrace()
    trace.initial_error, trace.initial_psnr = validation.evaluate(rec.field)
    n_iter = active_cfg.n_iterations
    if n_iter and active_cfg.k > len(candidates) - len(rec.captured):
        raise BudgetError("not enough candidates for one selection round")

    prev_error = trace.initial_error
    for t in range(1, n_iter + 1):
        try:
            remaining = [i for i in range(len(candidates)) if i not in rec.captured]
            if len(remaining) < active_cfg.k:
                break
            t0 = time.perf_counter()
            if strategy == "active":
                reports = scorer(rec.field, candidates, remaining, rec.observations, t)
                chosen = select_top_k(reports, active_cfg.k, rec.captured)
                by_idx = {r.pose_index: r.score for r in reports}
                scores = [float(by_idx[i]) for i in chosen]
            else:
                rng = np.random.default_rng(derived_seed(seed, 0x52414E44, t))
                chosen = sorted(int(i) for i in rng.choice(remaining, active_cfg.k, replace=False))
                scores = [0.0] * len(chosen)
            elapsed = time.perf_counter() - t0

            new_caps = []
            for i in chosen:
                new_caps += _ingest(rec, candidates[i], active_cfg, seed)
                rec.captured.add(i)
            rec.field = _refine(rec.field, new_caps, active_cfg)
            err, psnr = validation.evaluate(rec.field)
        except DavError as exc:
            raise LoopAborted(f"iteration {t}: {exc}", rec.field, trace) from exc
        if err > prev_error * (1.0 + active_cfg.monotone_tolerance):
            trace.monotone_violations += 1
            log.warning("validation error rose from %.5f to %.5f at iteration %d", prev_error, err, t)
        prev_error = err
        trace.records.append(IterationRecord(t, chosen, scores, err, psnr, rec.field.revision, len(rec.captures), elapsed))
    return rec.field, trace


def run_exhaustive(scene: SyntheticScene, start: Reconstruction, candidates: Sequence[Pose], cfg: ActiveConfig, validation: Validation, seed: int = 0) -> tuple[GaussianField, LoopTrace]:
    """Capture every candidate (in index order, in batches of ``k``)."""
    rec = Reconstruction(scene, start.field, start.observations.copy(), list(start.captures), set(start.captured))
    trace = LoopTrace()
    trace.initial_error, trace.initial_psnr = validation.evaluate(rec.field)
    todo = [i for i in range(len(candidates)) if i not in rec.captured]
    for t, lo in enumerate(range(0, len(todo), cfg.k), start=1):
        batch = todo[lo : lo + cfg.k]
        new_caps = []
        for i in batch:
            new_caps += _ingest(rec, candidates[i], cfg, seed)
            rec.captured.add(i)
        rec.field = _refine(rec.field, new_caps, cfg)
        trace.records.append(IterationRecord(t, batch, [0.0] * len(batch), math.nan, math.nan, rec.field.revision, len(rec.captures)))
    err, psnr = validation.evaluate(rec.field)
    if trace.records:
        trace.records[-1].error, trace.records[-1].psnr = err, psnr
    return rec.field, trace
