import csv
import json

import numpy as np
import pytest

from davgswt.errors import ConfigurationError, DimensionError
from davgswt.harness.cli import main
from davgswt.harness.config import ExperimentConfig, from_mapping, load_config, parse_flat
from davgswt.harness.experiments import (
    VARIANTS, ablation_tests, paired_t, replay_row, run_experiment, sign_test,
)
from davgswt.harness.metrics import compute_psnr, seam_score, tiling_mosaic
from davgswt.wang import stochastic_tiling


def test_psnr():
    a = np.zeros((4, 4, 3))
    assert compute_psnr(a, a) == 99.0
    assert compute_psnr(a, a + 0.1) == pytest.approx(20.0)
    with pytest.raises(DimensionError):
        compute_psnr(a, a[:2])


def test_flat_config_round_trip(tmp_path):
    cfg = ExperimentConfig(k=3, capture_hw=(96, 64), sweep_pdrop=(0.1, 0.2))
    cfg.dump(tmp_path / "c.cfg")
    assert load_config(tmp_path / "c.cfg") == cfg
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "c.json") == cfg


def test_config_parsing_details():
    vals = parse_flat("# comment\nk = 2  # inline\n\ncapture_hw = 32, 48\n")
    cfg = from_mapping(vals)
    assert cfg.k == 2 and cfg.capture_hw == (32, 48)
    with pytest.raises(ConfigurationError, match="unknown configuration keys: bogus"):
        from_mapping({"bogus": 1})
    with pytest.raises(ConfigurationError):
        parse_flat("k 2")
    with pytest.raises(ConfigurationError):
        from_mapping({"k": "two"})
    with pytest.raises(ConfigurationError):
        from_mapping({"k": 2.5})


@pytest.mark.parametrize("kw", [{"k": 0}, {"p_drop": 1.5}, {"tau": 0.5, "base_bins": 5}, {"gamma_mode": "off"}, {"tiling_rows": 1}, {"schema_version": 2}, {"estimator_mode": "x"}])
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        ExperimentConfig(**kw)


def test_sign_and_t_tests():
    assert sign_test(5, 0) == pytest.approx(1 / 32)
    assert sign_test(8, 2) == pytest.approx(0.0546875)
    assert sign_test(0, 0) == 1.0
    assert paired_t([2, 3, 4, 5], [1, 2, 3, 4.5]) < 0.05


def test_ablation_test_summary():
    rows = []
    for s in range(5):
        rows += [["full", s, 30.0 + s, 0.1, 20], ["single_forward", s, 29.0 + s, 0.1, 20], ["no_gamma", s, 30.0 + s, 0.2, 20]]
    t = ablation_tests(rows)
    assert t["psnr_full_vs_single"]["wins"] == 5 and t["psnr_full_vs_single"]["sign_p"] < 0.05
    assert t["seam_gamma_vs_unweighted"]["wins"] == 5


def test_seam_score_guards(tile_set_k2):
    _, ts = tile_set_k2
    tm = stochastic_tiling(ts, (0, 0, 3, 3), 0)
    s = seam_score(tm, ts)
    assert 0 <= s <= 1 and s == seam_score(tm, ts)
    img, seams, origin = tiling_mosaic(tm, ts)
    assert img.shape == (3 * ts.params.tile_px, 3 * ts.params.tile_px, 3) and origin == (0, 0) and seams.any()
    with pytest.raises(ConfigurationError):
        seam_score(tm, ts, crop_size=2)
    with pytest.raises(ConfigurationError):
        seam_score(stochastic_tiling(ts, (0, 0, 1, 3), 0), ts)


def _desk_file(tmp_path, cfg):
    path = tmp_path / "desk.cfg"
    cfg.dump(path)
    return str(path)


def _outputs(run):
    return {p.relative_to(run): p.read_bytes() for p in sorted(run.rglob("*")) if p.is_file() and "timing" not in p.name}


def test_cli_pipeline_is_deterministic(tmp_path, desk_config, capsys):
    cfg = _desk_file(tmp_path, desk_config)
    assert main(["render", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert "frames: 3" in capsys.readouterr().out
    for step in ("reconstruct", "tiles", "render"):
        assert main([step, "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    a, b = _outputs(tmp_path / "a"), _outputs(tmp_path / "b")
    assert a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    names = {str(k) for k in a}
    assert {"field.bin", "field.ply", "tiles/manifest.json", "tiling.csv", "frames/frame_0002.ppm", "caches.csv", "run.json"} <= names
    record = json.loads((tmp_path / "a" / "run.json").read_text())
    assert record["kind"] == "render" and record["config"]["frames"] == 3


def test_cli_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense = 1\n")
    assert main(["reconstruct", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "unknown configuration keys" in capsys.readouterr().err
    assert main(["reconstruct", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "o")]) == 2


def test_cli_failure_writes_error_manifest(tmp_path, desk_config, capsys):
    # a tile far larger than the reconstructed area cannot be sampled
    cfg = _desk_file(tmp_path, desk_config.with_(tile_world=5.0))
    assert main(["tiles", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    err = json.loads((tmp_path / "o" / "error.json").read_text())
    assert err["error"] == "ConfigurationError" and "field.bin" in err["partial_outputs"]
    assert "tiles failed" in capsys.readouterr().err


def test_unknown_run_kind(tmp_path, desk_config):
    with pytest.raises(ConfigurationError):
        run_experiment(desk_config, "paint", tmp_path)


def test_ablation_rows_and_replay(tmp_path, desk_config):
    rec = run_experiment(desk_config, "ablate", tmp_path)
    with open(tmp_path / "ablation.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["variant", "seed", "psnr", "seam_score", "views"]
    assert [r[0] for r in rows[1:]] == list(VARIANTS)
    assert replay_row(rec, "ablation.csv", rows[2]) == rows[2]
    with open(tmp_path / "ablation_timing.csv") as fh:
        unc = {r["variant"]: float(r["unc_time_s"]) for r in csv.DictReader(fh)}
    assert unc["exhaustive"] == 0.0
    assert unc["single_forward"] < min(unc[v] for v in ("full", "w2_only", "image_grad"))
    exhaustive = next(r for r in rows[1:] if r[0] == "exhaustive")
    assert int(exhaustive[4]) == desk_config.n_init + desk_config.n_candidates
    assert set(rec["metrics"]["tests"]) == {"psnr_full_vs_single", "seam_gamma_vs_unweighted"}


def test_sweep_and_budget_curve(tmp_path, desk_config):
    cfg = desk_config.with_(sweep_tau=(0.0, 1.0), budget_T=2)
    rec = run_experiment(cfg, "sweep", tmp_path / "s", param="tau")
    with open(tmp_path / "s" / "sweep.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 3
    hot = {r[1]: int(r[5]) for r in rows[1:]}
    assert hot["1.0"] == 0 and hot["0.0"] > 0
    assert replay_row(rec, "sweep.csv", rows[1]) == rows[1]
    rec = run_experiment(cfg, "budget_curve", tmp_path / "b")
    with open(tmp_path / "b" / "budget_curve.csv") as fh:
        rows = list(csv.reader(fh))[1:]
    assert [r[0] for r in rows].count("active") == 3
    active_views = [int(r[1]) for r in rows if r[0] == "active"]
    assert active_views == sorted(active_views)
    assert replay_row(rec, "budget_curve.csv", rows[1]) == rows[1]
    with pytest.raises(ConfigurationError):
        run_experiment(cfg, "sweep", tmp_path / "x", param="colour")
