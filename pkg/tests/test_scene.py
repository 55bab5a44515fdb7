import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from davgswt.camera import Pose
from davgswt.errors import ConfigurationError, PoseError
from davgswt.scene import (
    azimuth_discrepancy, capture, flat_scene, generate_scene, load_scene, read_depth_text, read_ppm,
    sample_candidate_poses, save_scene, export_capture, to_uint8,
)


def test_scene_is_seed_deterministic():
    a, b = generate_scene(3, (64, 64)), generate_scene(3, (64, 64))
    assert np.array_equal(a.height_field, b.height_field)
    assert np.array_equal(a.albedo_field, b.albedo_field)
    assert not np.array_equal(a.height_field, generate_scene(4, (64, 64)).height_field)


def test_scene_golden_digest():
    s = generate_scene(7, (64, 64))
    digest = hashlib.sha256(s.height_field.astype("<f8").tobytes()).hexdigest()
    assert digest == GOLDEN_SEED7


def test_heights_span_amplitude_and_bands_are_valid():
    s = generate_scene(0, (64, 64))
    assert s.height_field.min() == pytest.approx(s.params.h_min)
    assert s.height_field.max() == pytest.approx(s.params.h_max)
    assert set(np.unique(s.semantic_field)) <= {0, 1, 2, 3}
    assert 0.0 <= s.albedo_field.min() and s.albedo_field.max() <= 1.0


def test_scene_rejects_tiny_grid():
    with pytest.raises(ConfigurationError):
        generate_scene(0, (8, 8))


def test_flat_scene_depth_matches_geometry():
    # nadir camera above a plateau: the centre pixel sees the plateau at radius - height
    s = flat_scene(0.25, albedo=0.5)
    cap = capture(s, Pose(math.pi / 2, 0.0, 2.0), (33, 33))
    assert cap.depth[16, 16] == pytest.approx(1.75, abs=2e-3)
    assert np.allclose(cap.image[cap.depth > 0], cap.image[16, 16], atol=1e-9)


def test_capture_is_deterministic():
    s = generate_scene(1, (64, 64))
    p = Pose(1.0, 0.7, 2.5)
    a, b = capture(s, p, (32, 32)), capture(s, p, (32, 32))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.depth, b.depth)


def test_scene_round_trip(tmp_path):
    s = generate_scene(2, (32, 32))
    save_scene(s, tmp_path / "s.bin")
    t = load_scene(tmp_path / "s.bin")
    assert np.allclose(s.height_field, t.height_field, atol=1e-6)
    assert t.rng_seed == 2


def test_capture_export(tmp_path):
    cap = capture(generate_scene(0, (32, 32)), Pose(1.0, 0.0, 2.5), (16, 16))
    img_path, depth_path = export_capture(cap, tmp_path / "c")
    assert np.array_equal(to_uint8(read_ppm(img_path)), to_uint8(cap.image))
    assert np.allclose(read_depth_text(depth_path), cap.depth, atol=1e-5)


@given(st.floats(-10, 10), st.floats(0.1, 5))
def test_pose_azimuth_is_canonical(az, r):
    p = Pose(0.5, az, r)
    assert 0.0 <= p.azimuth < 2 * math.pi
    assert np.linalg.norm(p.position) == pytest.approx(r)


def test_pose_rejects_bad_values():
    for args in ((0.5, 0.0, 0.0), (2.0, 0.0, 1.0), (math.nan, 0.0, 1.0)):
        with pytest.raises(PoseError):
            Pose(*args)


@settings(max_examples=30)
@given(st.integers(1, 200), st.integers(0, 2**31))
def test_candidate_poses_are_stratified(n, seed):
    poses = sample_candidate_poses(n, seed=seed)
    assert len(poses) == n
    assert azimuth_discrepancy(poses) <= 1.0 / n + 1e-12
    for p in poses:
        assert 0.8 <= p.elevation <= 1.2 and 2.2 <= p.radius <= 3.0


# sha256 of the little-endian float64 height grid for seed 7 at 64x64
GOLDEN_SEED7 = "6906262b222779411f4a46772d01822ab136cf1f5171dfc95a6ddb6d32e44fc4"
