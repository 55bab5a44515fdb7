"""Experiment runners behind the CLI.

Every run writes into its own directory: CSV tables, images, a JSON run
record listing the configuration and a digest of every deterministic output,
and (on failure) an ``error.json`` manifest.  Wall-clock measurements go to
files whose names contain ``timing`` so the remaining outputs stay
byte-identical across repeated runs.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from ..active import Reconstruction, Validation, initial_reconstruction, make_scorer, run_dav_loop, run_exhaustive
from ..errors import ConfigurationError
from ..gsfield import GaussianField, export_ply, load_field, save_field
from ..lod import TiledWorld, circle_path, timing_summary, write_timing_csv
from ..prior import SyntheticPrior
from ..scene import SyntheticScene, generate_scene, sample_candidate_poses, write_ppm
from ..uncertainty import EstimatorConfig, write_reports_csv
from ..wang import GroundMap, TileSet, build_tile_set, ground_uncertainty, stochastic_tiling
from .config import ExperimentConfig
from .metrics import seam_score, tiling_mosaic

log = logging.getLogger(__name__)

KINDS = ("reconstruct", "tiles", "render", "ablate", "sweep", "budget_curve")
VARIANTS = ("full", "w2_only", "image_grad", "single_forward", "no_gamma", "exhaustive")
SWEEP_PARAMS = {"k": "sweep_k", "pdrop": "sweep_pdrop", "lambda": "sweep_lambda", "tau": "sweep_tau"}
INIT_SEED_OFFSET = 1000


# --------------------------------------------------------------------------
# shared pieces


@dataclass
class Stage:
    """Everything a seed needs before the active loop starts."""

    cfg: ExperimentConfig
    scene: SyntheticScene
    start: Reconstruction
    candidates: list
    validation: Validation

    @classmethod
    def prepare(cls, cfg: ExperimentConfig) -> "Stage":
        acfg = cfg.active()
        scene = generate_scene(cfg.scene_seed, (cfg.scene_size, cfg.scene_size), cfg.terrain())
        start = initial_reconstruction(scene, acfg, cfg.seed + INIT_SEED_OFFSET)
        candidates = sample_candidate_poses(cfg.n_candidates, acfg.elevation_range, acfg.radius_range, seed=cfg.seed)
        return cls(cfg, scene, start, candidates, Validation.for_scene(scene, acfg))


@dataclass
class LoopResult:
    field: GaussianField
    psnr: float
    views: int
    unc_seconds: float
    trace: object = None


def seeded(cfg: ExperimentConfig, s: int) -> ExperimentConfig:
    """Configuration for the ``s``-th paired seed."""
    return cfg.with_(seed=cfg.seed + s, scene_seed=cfg.scene_seed + s)


def run_loop(stage: Stage, cfg: ExperimentConfig, strategy: str = "active") -> LoopResult:
    acfg = cfg.active()
    if strategy == "exhaustive":
        fld, trace = run_exhaustive(stage.scene, stage.start, stage.candidates, acfg, stage.validation, cfg.seed)
        return LoopResult(fld, trace.final_psnr, len(stage.start.captures) + len(stage.candidates), 0.0, trace)
    prior = SyntheticPrior(cfg.prior())
    fld, trace = run_dav_loop(stage.scene, stage.start, stage.candidates, acfg, prior=prior, estimator_cfg=cfg.estimator(), validation=stage.validation, strategy=strategy, seed=cfg.seed)
    views = len(stage.start.captures) + len(trace.selected)
    return LoopResult(fld, trace.final_psnr, views, sum(r.score_seconds for r in trace.records), trace)


def final_ground_map(stage: Stage, cfg: ExperimentConfig, fld: GaussianField):
    """Score every candidate against the final field and project onto the ground."""
    scorer = make_scorer(SyntheticPrior(cfg.prior()), cfg.estimator())
    reports = scorer(fld, stage.candidates, list(range(len(stage.candidates))), stage.start.observations, cfg.T + 1)
    gmap = ground_uncertainty(reports, stage.candidates, stage.scene.bounds(), fov_deg=cfg.fov_deg)
    return gmap, reports


def tile_and_score(fld: GaussianField, gmap: GroundMap | None, cfg: ExperimentConfig) -> tuple[TileSet, object, float]:
    tile_set = build_tile_set(fld, gmap, cfg.K, cfg.tiles())
    tiling = stochastic_tiling(tile_set, (0, 0, cfg.tiling_rows, cfg.tiling_cols), cfg.seed)
    return tile_set, tiling, seam_score(tiling, tile_set, cfg.seam_crop)


def sign_test(wins: int, losses: int) -> float:
    """One-sided exact sign test p-value (ties dropped)."""
    n = wins + losses
    if n == 0:
        return 1.0
    return float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue)


def paired_t(a: Sequence[float], b: Sequence[float]) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) < 2 or np.allclose(a - b, (a - b)[0]):
        return math.nan
    return float(stats.ttest_rel(a, b).pvalue)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        out.writerows(rows)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _digest(out: Path) -> dict[str, str]:
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and "timing" not in p.name and p.name not in ("run.json", "error.json"):
            files[str(p.relative_to(out))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return files


def _write_record(out: Path, kind: str, cfg: ExperimentConfig, metrics: dict, extra: dict | None = None) -> dict:
    record = {"kind": kind, "config": cfg.to_dict(), "metrics": metrics, "outputs": _digest(out)}
    record.update(extra or {})
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    return record


# --------------------------------------------------------------------------
# run kinds


def run_reconstruct(cfg: ExperimentConfig, out: Path) -> dict:
    t0 = time.perf_counter()
    stage = Stage.prepare(cfg)
    res = run_loop(stage, cfg, "active")
    gmap, reports = final_ground_map(stage, cfg, res.field)
    save_field(res.field, out / "field.bin")
    export_ply(res.field, out / "field.ply")
    gmap.save(out / "ground_uncertainty.npz")
    res.trace.write_csv(out / "loop.csv")
    write_reports_csv(out / "scores.csv", reports, stage.candidates)
    metrics = {"psnr": res.psnr, "views": res.views, "splats": len(res.field), "initial_psnr": res.trace.initial_psnr, "monotone_violations": res.trace.monotone_violations}
    (out / "reconstruct_timing.json").write_text(json.dumps({"total_s": time.perf_counter() - t0, "uncertainty_s": res.unc_seconds}, indent=2))
    return _write_record(out, "reconstruct", cfg, metrics, {"trace": res.trace.to_record()})


def run_tiles(cfg: ExperimentConfig, out: Path) -> dict:
    if not (out / "field.bin").exists():
        run_reconstruct(cfg, out)
    fld = load_field(out / "field.bin")
    gpath = out / "ground_uncertainty.npz"
    gmap = GroundMap.load(gpath) if gpath.exists() else None
    tile_set, tiling, score = tile_and_score(fld, gmap, cfg)
    tile_set.save(out / "tiles")
    tiling.write_csv(out / "tiling.csv")
    mosaic, seams, _ = tiling_mosaic(tiling, tile_set)
    write_ppm(out / "mosaic.ppm", mosaic)
    _write_csv(out / "tiles.csv", ["tile_id", "north", "east", "south", "west", "u_bar", "splats", "label_crossings"], [[t.tile_id, *t.edge_codes, _fmt(t.u_bar), len(t.field), t.label_crossings] for t in tile_set.tiles])
    metrics = {"seam_score": score, "tiles": len(tile_set.tiles), "complete": tile_set.complete, "violations": tiling.violations(tile_set)}
    return _write_record(out, "tiles", cfg, metrics)


def run_render(cfg: ExperimentConfig, out: Path) -> dict:
    if not (out / "tiles" / "manifest.json").exists():
        run_tiles(cfg, out)
    tile_set = TileSet.load(out / "tiles")
    tiling = stochastic_tiling(tile_set, (0, 0, cfg.tiling_rows, cfg.tiling_cols), cfg.seed)
    world = TiledWorld.build(tile_set, tiling, cfg.lod(), cfg.cache())
    frames_dir = out / "frames"
    frames_dir.mkdir(exist_ok=True)
    timings = []
    for f, pose in enumerate(circle_path(cfg.frames, cfg.path_radius, cfg.path_elevation)):
        image, timing = world.render_frame(pose, cfg.render_hw, cfg.fov_deg)
        write_ppm(frames_dir / f"frame_{f:04d}.ppm", image)
        timings.append(timing)
    write_timing_csv(out / "render_timing.csv", timings)
    summary = timing_summary(timings)
    (out / "render_timing_summary.json").write_text(json.dumps({k: {"mean": m, "std": s} for k, (m, s) in summary.items()}, indent=2))
    bins = {tid: c.bin_count for tid, c in world.caches.items()}
    _write_csv(out / "caches.csv", ["tile_id", "u_bar", "bin_count", "prefetch_depth", "cached_bytes"], [[tid, _fmt(tile_set.by_id(tid).u_bar), c.bin_count, c.prefetch_depth, c.nbytes] for tid, c in sorted(world.caches.items())])
    metrics = {"frames": cfg.frames, "hot_tiles": sum(b == cfg.hot_bins for b in bins.values()) if cfg.hot_bins != cfg.base_bins else 0}
    return _write_record(out, "render", cfg, metrics)


# ---- ablation


def ablation_rows(cfg: ExperimentConfig, s: int) -> tuple[list[list], dict[str, float]]:
    """Rows (variant, seed, psnr, seam_score, views) for one paired seed, plus timings."""
    scfg = seeded(cfg, s)
    stage = Stage.prepare(scfg)
    rows, timing = [], {}
    full = run_loop(stage, scfg.with_(estimator_mode="latent_space"))
    gmap, _ = final_ground_map(stage, scfg, full.field)
    results = {
        "full": full,
        "w2_only": run_loop(stage, scfg.with_(estimator_mode="latent_space", lam=0.0)),
        "image_grad": run_loop(stage, scfg.with_(estimator_mode="image_space")),
        "single_forward": run_loop(stage, scfg.with_(estimator_mode="latent_space", p_drop=0.0)),
        "no_gamma": full,
        "exhaustive": run_loop(stage, scfg, "exhaustive"),
    }
    for name in VARIANTS:
        res = results[name]
        tcfg = scfg.with_(gamma_mode="unweighted" if name == "no_gamma" else "adaptive")
        g = gmap if res is full else final_ground_map(stage, scfg, res.field)[0]
        _, _, score = tile_and_score(res.field, g, tcfg)
        rows.append([name, s, _fmt(res.psnr), f"{score:.8f}", res.views])
        timing[name] = res.unc_seconds
    return rows, timing


def run_ablate(cfg: ExperimentConfig, out: Path) -> dict:
    rows, trows = [], []
    for s in range(cfg.seeds):
        r, t = ablation_rows(cfg, s)
        rows += r
        trows += [[name, s, f"{t[name]:.6f}"] for name in VARIANTS]
        log.info("ablation seed %d done", s)
    _write_csv(out / "ablation.csv", ["variant", "seed", "psnr", "seam_score", "views"], rows)
    _write_csv(out / "ablation_timing.csv", ["variant", "seed", "unc_time_s"], trows)
    by = {v: [r for r in rows if r[0] == v] for v in VARIANTS}
    summary = []
    for v in VARIANTS:
        p = np.array([float(r[2]) for r in by[v]])
        q = np.array([float(r[3]) for r in by[v]])
        summary.append([v, _fmt(p.mean()), _fmt(p.std()), f"{q.mean():.8f}", f"{q.std():.8f}"])
    _write_csv(out / "ablation_summary.csv", ["variant", "psnr_mean", "psnr_std", "seam_mean", "seam_std"], summary)
    metrics = {"tests": ablation_tests(rows)}
    return _write_record(out, "ablate", cfg, metrics)


def ablation_tests(rows: Sequence[Sequence]) -> dict:
    """Paired sign tests (and t-tests) for the two ablation directions."""
    get = lambda v, col: [float(r[col]) for r in sorted((r for r in rows if r[0] == v), key=lambda r: r[1])]
    full_p, single_p = get("full", 2), get("single_forward", 2)
    full_s, nog_s = get("full", 3), get("no_gamma", 3)
    psnr_w = sum(a > b for a, b in zip(full_p, single_p))
    psnr_l = sum(a < b for a, b in zip(full_p, single_p))
    seam_w = sum(a < b for a, b in zip(full_s, nog_s))
    seam_l = sum(a > b for a, b in zip(full_s, nog_s))
    return {
        "psnr_full_vs_single": {"wins": psnr_w, "losses": psnr_l, "sign_p": sign_test(psnr_w, psnr_l), "t_p": paired_t(full_p, single_p)},
        "seam_gamma_vs_unweighted": {"wins": seam_w, "losses": seam_l, "sign_p": sign_test(seam_w, seam_l), "t_p": paired_t(nog_s, full_s)},
    }


# ---- sensitivity sweep


def sweep_row(cfg: ExperimentConfig, param: str, value) -> tuple[list, float]:
    key = {"k": "k", "pdrop": "p_drop", "lambda": "lam", "tau": "tau"}[param]
    vcfg = cfg.with_(**{key: value})
    stage = Stage.prepare(vcfg)
    res = run_loop(stage, vcfg)
    gmap, _ = final_ground_map(stage, vcfg, res.field)
    tile_set, tiling, score = tile_and_score(res.field, gmap, vcfg)
    world = TiledWorld.build(tile_set, tiling, vcfg.lod(), vcfg.cache())
    hot = sum(c.bin_count == vcfg.hot_bins for c in world.caches.values())
    return [param, value, _fmt(res.psnr), f"{score:.8f}", res.views, hot], res.unc_seconds


def run_sweep(cfg: ExperimentConfig, out: Path, param: str) -> dict:
    if param not in SWEEP_PARAMS:
        raise ConfigurationError(f"unknown sweep parameter {param!r}")
    rows, trows = [], []
    for value in getattr(cfg, SWEEP_PARAMS[param]):
        row, unc = sweep_row(cfg, param, value)
        rows.append(row)
        trows.append([param, value, f"{unc:.6f}"])
    _write_csv(out / "sweep.csv", ["param", "value", "psnr", "seam_score", "views", "hot_tiles"], rows)
    _write_csv(out / "sweep_timing.csv", ["param", "value", "unc_time_s"], trows)
    return _write_record(out, "sweep", cfg, {"rows": len(rows)}, {"param": param})


# ---- budget curve


def budget_rows(cfg: ExperimentConfig, strategy: str) -> list[list]:
    bcfg = cfg.with_(T=cfg.budget_T)
    stage = Stage.prepare(bcfg)
    res = run_loop(stage, bcfg, strategy)
    n0 = len(stage.start.captures)
    if strategy == "exhaustive":
        return [[strategy, res.views, _fmt(res.psnr)]]
    rows = [[strategy, n0, _fmt(res.trace.initial_psnr)]]
    for r in res.trace.records:
        rows.append([strategy, r.n_captured, _fmt(r.psnr)])
    return rows


def run_budget_curve(cfg: ExperimentConfig, out: Path) -> dict:
    rows = []
    for strategy in ("active", "random", "exhaustive"):
        rows += budget_rows(cfg, strategy)
    _write_csv(out / "budget_curve.csv", ["strategy", "views", "psnr"], rows)
    return _write_record(out, "budget_curve", cfg, {"rows": len(rows)})


# --------------------------------------------------------------------------
# dispatch


RUNNERS: dict[str, Callable[..., dict]] = {
    "reconstruct": run_reconstruct,
    "tiles": run_tiles,
    "render": run_render,
    "ablate": run_ablate,
    "sweep": run_sweep,
    "budget_curve": run_budget_curve,
}


def run_experiment(config: ExperimentConfig, kind: str, out: str | Path, **kwargs) -> dict:
    """Run ``kind`` into ``out``; on any error write ``error.json`` and re-raise."""
    if kind not in RUNNERS:
        raise ConfigurationError(f"unknown run kind {kind!r}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return RUNNERS[kind](config, out, **kwargs)
    except Exception as exc:
        manifest = {"kind": kind, "error": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc(), "config": config.to_dict(), "partial_outputs": sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file())}
        (out / "error.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        raise


def replay_row(record: dict, csv_name: str, row: Sequence[str]) -> list[str]:
    """Recompute one emitted CSV row from a run record; returns it as strings."""
    from .config import from_mapping

    cfg = from_mapping(record["config"])
    kind = record["kind"]
    if kind == "ablate" and csv_name == "ablation.csv":
        rows, _ = ablation_rows(cfg, int(row[1]))
        match = [r for r in rows if r[0] == row[0]]
    elif kind == "sweep" and csv_name == "sweep.csv":
        field_type = type(getattr(cfg, SWEEP_PARAMS[row[0]])[0])
        match = [sweep_row(cfg, row[0], field_type(row[1]))[0]]
    elif kind == "budget_curve" and csv_name == "budget_curve.csv":
        match = [r for r in budget_rows(cfg, row[0]) if str(r[1]) == row[1]]
    else:
        raise ConfigurationError(f"no replay rule for {csv_name} of a {kind} run")
    return [str(x) for x in match[0]]
