"""RGB-D -> radar-perspective projection on the range-azimuth grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import CameraModel, RadarConfig


@dataclass
class RadarPerspectiveProjection:
    grid: np.ndarray          # range_bins x azimuth_bins, max-normalised counts
    frame_index: int = 0
    counts: np.ndarray | None = None

    def occupied_range_rows(self) -> np.ndarray:
        return np.flatnonzero(self.grid.any(axis=1))


def deproject_pixel(u, v, z, cam: CameraModel) -> np.ndarray:
    """Pixel + depth -> camera-frame point (x right, y down, z forward)."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise ValueError("depth must be positive to deproject")
    x = (np.asarray(u, dtype=float) - cam.cx) * z / cam.fx
    y = (np.asarray(v, dtype=float) - cam.cy) * z / cam.fy
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def camera_to_radar(p, cam: CameraModel) -> np.ndarray:
    return np.asarray(p, dtype=float) @ cam.R.T + cam.t


def radar_to_camera(p, cam: CameraModel) -> np.ndarray:
    return (np.asarray(p, dtype=float) - cam.t) @ cam.R


def radar_bins(points: np.ndarray, rc: RadarConfig):
    """Integer (range, azimuth) bins for radar-frame points plus an in-grid mask.

    Range uses floor(r / dr); azimuth rounds to the nearest FFT-shifted bin of
    sin(atan2(x, z)). Points with z <= 0 are outside the field of view.
    """
    x, z = points[:, 0], points[:, 2]
    r = np.linalg.norm(points, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        sin_az = x / np.hypot(x, z)
    rb = np.floor(r / rc.range_resolution).astype(np.int64)
    ab = np.floor(rc.azimuth_bin(sin_az) + 0.5).astype(np.int64)
    ok = (z > 0) & (rb >= 0) & (rb < rc.range_bins) & (ab >= 0) & (ab < rc.azimuth_bins)
    return rb, ab, ok


def project_rgbd(depth, cam: CameraModel, rc: RadarConfig, frame_index: int = 0
                 ) -> RadarPerspectiveProjection:
    """Accumulate one count per valid pixel into its radar bin, then divide by the max count."""
    depth = np.asarray(depth)
    if depth.shape != (cam.height, cam.width):
        raise ValueError(f"depth shape {depth.shape} != camera {(cam.height, cam.width)}")
    v, u = np.nonzero(depth > 0)
    counts = np.zeros((rc.range_bins, rc.azimuth_bins))
    if u.size:
        pts = camera_to_radar(deproject_pixel(u, v, depth[v, u], cam), cam)
        rb, ab, ok = radar_bins(pts, rc)
        np.add.at(counts, (rb[ok], ab[ok]), 1.0)
    peak = counts.max()
    grid = counts / peak if peak > 0 else counts.copy()
    return RadarPerspectiveProjection(grid.astype(np.float32), frame_index, counts)
