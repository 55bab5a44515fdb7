
import numpy as np
import pytest

from davgswt.active import ActiveConfig
from davgswt.gsfield import GaussianField
from davgswt.harness.config import ExperimentConfig


def random_field(rng: np.random.Generator, n: int, spread: float = 0.5) -> GaussianField:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianField(
        rng.uniform(-spread, spread, (n, 3)),
        rng.uniform(0.05, 0.2, (n, 3)),
        q,
        rng.uniform(0.2, 0.9, n),
        rng.uniform(0.0, 1.0, (n, 3)),
        (np.full(3, -1.0), np.full(3, 1.0)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_active() -> ActiveConfig:
    return ActiveConfig(k=2, T=2, n_init=4, capture_hw=(48, 48), refine_hw=(32, 32), refine_iters=3, n_validation=4)


@pytest.fixture(scope="session")
def desk_config() -> ExperimentConfig:
    """A configuration small enough for end-to-end runs inside unit tests."""
    return ExperimentConfig(
        scene_size=64, n_candidates=12, k=2, T=1, n_init=6, capture_hw=(64, 64), refine_hw=(32, 32),
        refine_iters=3, n_validation=4, M=3, latent_hw=(16, 16), prior_render_hw=(32, 32),
        tile_px=32, overlap_px=4, tiling_rows=2, tiling_cols=2, seam_crop=16, frames=3, render_hw=(32, 32), seeds=1,
    )


@pytest.fixture(scope="session")
def tile_set_k2():
    """A complete K=2 set over the default seed-0 reconstruction (built once)."""
    from davgswt.harness.experiments import Stage, final_ground_map, run_loop
    from davgswt.wang import build_tile_set

    cfg = ExperimentConfig()
    stage = Stage.prepare(cfg)
    res = run_loop(stage, cfg)
    gmap, _ = final_ground_map(stage, cfg, res.field)
    return res.field, build_tile_set(res.field, gmap, 2, cfg.tiles())




ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
