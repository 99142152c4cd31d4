import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from radarctx.aligner import camera_to_radar, deproject_pixel, project_rgbd, radar_to_camera
from radarctx.config import CameraModel, RadarConfig, ScenarioConfig
from radarctx.scene import build_scenario, render_depth

IDENTITY = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
NARROW = CameraModel.tilted(0.0, height=16, width=16, vfov_deg=8.0)


def test_deproject_principal_point():
    cam = CameraModel.tilted(0.0)
    assert np.allclose(deproject_pixel(cam.cx, cam.cy, 2.0, cam), [0, 0, 2])


def test_deproject_unit_tangent():
    cam = CameraModel.tilted(0.0)
    assert np.allclose(deproject_pixel(cam.cx + cam.fx, cam.cy, 1.0, cam), [1, 0, 1])


def test_deproject_rejects_nonpositive_depth():
    with pytest.raises(ValueError):
        deproject_pixel(0, 0, 0.0, CameraModel.tilted(0.0))


@given(st.floats(0, 63), st.floats(0, 47), st.floats(0.1, 9.0))
def test_reprojection_recovers_pixel(u, v, z):
    cam = CameraModel.tilted(0.0)
    x, y, zz = deproject_pixel(u, v, z, cam)
    assert abs(cam.fx * x / zz + cam.cx - u) < 1e-9
    assert abs(cam.fy * y / zz + cam.cy - v) < 1e-9


def test_identity_extrinsics():
    cam = CameraModel(50, 50, 10, 10, 20, 20, rotation=IDENTITY)
    p = np.array([0.3, -1.2, 2.5])
    assert np.array_equal(camera_to_radar(p, cam), p)


def test_twenty_degree_tilt():
    cam = CameraModel.tilted(20.0)
    p = camera_to_radar([0.0, 0.0, 3.0], cam)
    a = math.radians(20.0)
    assert p[1] == pytest.approx(-3 * math.sin(a), abs=1e-12)
    assert p[2] == pytest.approx(3 * math.cos(a), abs=1e-12)
    assert p[0] == pytest.approx(0.0, abs=1e-12)


@given(st.floats(-40, 40), st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_extrinsics_roundtrip(tilt, p, t):
    cam = CameraModel.tilted(tilt, translation=t)
    assert np.allclose(radar_to_camera(camera_to_radar(p, cam), cam), p, atol=1e-9)


def test_invalid_depth_projects_to_zero(rc):
    proj = project_rgbd(np.zeros((48, 64)), CameraModel.tilted(0.0), rc)
    assert proj.grid.shape == (rc.range_bins, rc.azimuth_bins)
    assert not proj.grid.any()


def test_plane_concentrates_at_its_range(rc):
    proj = project_rgbd(np.full((16, 16), 2.0), NARROW, rc)
    rows = proj.occupied_range_rows()
    k = math.floor(2.0 / rc.range_resolution)
    assert rows.min() >= k - 1 and rows.max() <= k + 1
    assert proj.grid.max() == 1.0


def test_wide_plane_starts_at_its_range(rc):
    cam = CameraModel.tilted(0.0)
    proj = project_rgbd(np.full((48, 64), 2.0), cam, rc)
    assert proj.occupied_range_rows()[0] == math.floor(2.0 / rc.range_resolution)


def test_person_at_four_metres():
    cfg = ScenarioConfig.for_scenario("through_wall", positions=((0.0, 4.0),), position=0)
    scene = dataclasses.replace(build_scenario(cfg, 0)[0], occluders=[])
    rc = cfg.radar()
    _, depth = render_depth(scene, cfg.camera())
    proj = project_rgbd(depth, cfg.camera(), rc)
    col = np.argmax(proj.counts.sum(axis=0))
    assert abs(col - rc.azimuth_bins // 2) <= 2
    rows = np.arange(rc.range_bins)
    mean_r = (proj.counts.sum(axis=1) @ (rows + 0.5)) / proj.counts.sum() * rc.range_resolution
    assert mean_r == pytest.approx(4.0, abs=0.2)


@given(st.integers(12, 80), st.integers(-10, 30))
def test_rigid_shift_moves_rows(k, dk):
    rc = RadarConfig()
    k2 = k + dk
    if not 1 <= k2 < 120:
        return
    z1, z2 = (k + 0.3) * rc.range_resolution, (k2 + 0.3) * rc.range_resolution
    r1 = project_rgbd(np.full((16, 16), z1), NARROW, rc).occupied_range_rows()
    r2 = project_rgbd(np.full((16, 16), z2), NARROW, rc).occupied_range_rows()
    assert np.array_equal(r2, r1 + dk)


@given(st.integers(0, 2 ** 31))
def test_count_conservation(seed):
    rc = RadarConfig()
    cam = CameraModel.tilted(10.0)
    r = np.random.default_rng(seed)
    depth = np.where(r.random((48, 64)) < 0.3, 0.0, r.uniform(0.2, 5.0, (48, 64)))
    proj = project_rgbd(depth, cam, rc)
    v, u = np.nonzero(depth > 0)
    # independent in-grid check: range below the grid limit and azimuth bin inside [0, M)
    d = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u, float)], 1)
    p = (d * depth[v, u][:, None]) @ cam.R.T
    rng_ = np.linalg.norm(p, axis=1)
    ab = np.floor(rc.azimuth_bin(p[:, 0] / np.hypot(p[:, 0], p[:, 2])) + 0.5)
    ok = (p[:, 2] > 0) & (rng_ < rc.range_bins * rc.range_resolution) & (ab >= 0) & (ab < 64)
    assert proj.counts.sum() == ok.sum()


def test_depth_shape_mismatch(rc):
    with pytest.raises(ValueError):
        project_rgbd(np.ones((10, 10)), CameraModel.tilted(0.0), rc)
