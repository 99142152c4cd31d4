"""Sensor and scenario configuration.

All geometry lives in the radar frame: x to the right (seen from the radar),
y up, z along boresight. The radar sits at the origin; the floor is at
``y = -sensor_height``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np

C0 = 299_792_458.0

SCENARIOS = ("through_cloth", "through_wall", "fall")


class ConfigError(ValueError):
    """Raised when a configuration file or value violates its schema."""


@dataclass(frozen=True)
class RadarConfig:
    """FMCW radar parameters (single chirp per frame, uniform linear array)."""

    carrier_hz: float = 77e9
    bandwidth_hz: float = 2e9
    samples_per_chirp: int = 128
    sample_rate_hz: float = 10e6
    virtual_antennas: int = 8
    antenna_spacing: float = 0.5  # wavelengths
    range_bins: int = 128
    azimuth_bins: int = 64
    fps: float = 15.0

    def __post_init__(self):
        if self.range_bins < self.samples_per_chirp:
            raise ConfigError("range_bins must be >= samples_per_chirp")
        if self.azimuth_bins < self.virtual_antennas:
            raise ConfigError("azimuth_bins must be >= virtual_antennas")
        for n, name in ((self.range_bins, "range_bins"), (self.azimuth_bins, "azimuth_bins")):
            if n & (n - 1):
                raise ConfigError(f"{name} must be a power of two, got {n}")
        if self.bandwidth_hz <= 0 or self.sample_rate_hz <= 0:
            raise ConfigError("bandwidth and sample rate must be positive")

    @property
    def wavelength(self) -> float:
        return C0 / self.carrier_hz

    @property
    def slope(self) -> float:
        """Chirp slope in Hz/s; the sampled sweep covers the full bandwidth."""
        return self.bandwidth_hz * self.sample_rate_hz / self.samples_per_chirp

    @property
    def range_resolution(self) -> float:
        """Range spacing of one spectrum bin (m), including zero-padding."""
        return C0 * self.samples_per_chirp / (2.0 * self.bandwidth_hz * self.range_bins)

    @property
    def max_range(self) -> float:
        """Largest scatterer range accepted by the simulator, c*N/(4B)."""
        return C0 * self.samples_per_chirp / (4.0 * self.bandwidth_hz)

    def range_bin(self, r):
        """Fractional spectrum bin for range ``r`` (meters)."""
        return np.asarray(r) / self.range_resolution

    def azimuth_bin(self, sin_theta):
        """Fractional (FFT-shifted) azimuth bin for ``sin(theta)``."""
        n = self.azimuth_bins
        return n / 2 + n * self.antenna_spacing * np.asarray(sin_theta)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def rotation_x(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


# camera image axes (x right, y down) -> radar axes (x right, y up)
_IMAGE_FLIP = np.diag([1.0, -1.0, 1.0])


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with extrinsics mapping camera coordinates into the radar frame.

    ``p_radar = rotation @ p_cam + translation``. Use :meth:`tilted` to build
    the usual downward-tilted rig.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    height: int
    width: int
    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, -1.0, 0.0), (0.0, 0.0, 1.0))
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("camera focal lengths must be positive")
        if self.height < 1 or self.width < 1:
            raise ConfigError("camera resolution must be positive")
        r = self.R
        if r.shape != (3, 3) or np.linalg.norm(r.T @ r - np.eye(3)) >= 1e-6:
            raise ConfigError("camera rotation is not orthonormal")

    @classmethod
    def tilted(cls, tilt_deg: float = 0.0, height: int = 48, width: int = 64,
               vfov_deg: float = 60.0, translation=(0.0, 0.0, 0.0)) -> "CameraModel":
        """Camera at ``translation`` looking along boresight, pitched down by ``tilt_deg``."""
        fy = (height / 2) / math.tan(math.radians(vfov_deg) / 2)
        rot = rotation_x(math.radians(tilt_deg)) @ _IMAGE_FLIP
        return cls(fx=fy, fy=fy, cx=(width - 1) / 2, cy=(height - 1) / 2,
                   height=height, width=width,
                   rotation=tuple(map(tuple, rot.tolist())),
                   translation=tuple(float(v) for v in translation))

    @cached_property
    def R(self) -> np.ndarray:
        return np.asarray(self.rotation, dtype=float)

    @cached_property
    def t(self) -> np.ndarray:
        return np.asarray(self.translation, dtype=float)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "height": self.height, "width": self.width,
                "rotation": [list(r) for r in self.rotation],
                "translation": list(self.translation)}


# Eight canonical body regions: (name, lateral offset m, height above floor m).
# Negative lateral = radar-left. Class id = index + 1.
BODY_REGIONS = (
    ("left_chest", -0.15, 1.35),
    ("right_chest", 0.15, 1.35),
    ("left_waist", -0.15, 1.00),
    ("right_waist", 0.15, 1.00),
    ("left_pocket", -0.18, 0.80),
    ("right_pocket", 0.18, 0.80),
    ("left_ankle", -0.10, 0.10),
    ("right_ankle", 0.10, 0.10),
)

# Six through-wall positions: (cross-range x m, down-range z m). Class id = index + 1.
WALL_POSITIONS = tuple((x, z) for z in (2.0, 3.5) for x in (-1.0, 0.0, 1.0))

POSES = ("standing", "sitting", "lying", "absent")


@dataclass
class ScenarioConfig:
    """One sequence's worth of scene parameters.

    ``anomaly_region`` (through_cloth) and ``position`` (through_wall / fall)
    are 0-based indices into :data:`BODY_REGIONS` / :data:`WALL_POSITIONS`;
    ``None`` means the anomaly-free case.
    """

    scenario: str = "through_cloth"
    frames: int = 60
    fps: float = 15.0
    clothing: str = "casual"
    environment: str = "lab"
    wall: str = "curtain"
    anomaly_region: int | None = None
    position: int | None = None
    pose: str = "standing"
    fall_to: str | None = None  # "sitting" | "lying"
    fall_frame: int = 30
    sensor_height: float = 2.0
    camera_tilt_deg: float = 20.0
    start_distance: float = 2.8
    walk_speed: float = 0.2
    wall_distance: float = 1.2
    metal_rcs: float = 0.3
    body_rcs_scale: float = 1.0
    wall_facet_rcs: float = 1.0
    snr_db: float | None = 55.0
    jitter_m: float = 0.01
    positions: tuple = WALL_POSITIONS
    regions: tuple = BODY_REGIONS

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.anomaly_region is not None and not 0 <= self.anomaly_region < len(self.regions):
            raise ConfigError(f"invalid body region index {self.anomaly_region}")
        if self.position is not None and not 0 <= self.position < len(self.positions):
            raise ConfigError(f"invalid position index {self.position}")
        if self.pose not in POSES[:3]:
            raise ConfigError(f"invalid pose {self.pose!r}")
        if self.fall_to not in (None, "sitting", "lying"):
            raise ConfigError(f"invalid fall target pose {self.fall_to!r}")
        if self.frames < 1 or self.fps <= 0:
            raise ConfigError("frames and fps must be positive")

    @classmethod
    def for_scenario(cls, scenario: str, **overrides) -> "ScenarioConfig":
        """Scenario defaults: 15 fps walking sequences or 2 fps static through-wall scenes."""
        base: dict[str, Any] = {"scenario": scenario}
        if scenario in ("through_wall", "fall"):
            base.update(fps=2.0, sensor_height=1.22, camera_tilt_deg=0.0)
        base.update(overrides)
        return cls(**base)

    @property
    def anomaly_class(self) -> int:
        if self.scenario == "through_cloth":
            return 0 if self.anomaly_region is None else self.anomaly_region + 1
        return 0 if self.position is None else self.position + 1

    def camera(self) -> CameraModel:
        if self.scenario == "through_cloth":
            return CameraModel.tilted(self.camera_tilt_deg, vfov_deg=64.0)
        return CameraModel.tilted(self.camera_tilt_deg, vfov_deg=56.0)

    def radar(self) -> RadarConfig:
        return RadarConfig(fps=self.fps)


@dataclass
class DatasetConfig:
    """What ``simulate`` consumes: how many sequences to draw and how to split them."""

    scenario: str = "through_cloth"
    n_sequences: int = 20
    train_fraction: float = 0.7
    one_class: bool = False
    anomaly_fraction: float | None = None
    clothing: list = field(default_factory=lambda: ["casual", "fleece", "snow_jacket"])
    environments: list = field(default_factory=lambda: ["lab", "corridor", "stairwell"])
    walls: list = field(default_factory=lambda: ["styrofoam", "curtain", "gator_board", "particle_board"])
    fall_fraction: float = 0.5
    blank_fraction: float = 0.0
    scene: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.n_sequences < 1:
            raise ConfigError("n_sequences must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.anomaly_fraction is not None and not 0.0 <= self.anomaly_fraction <= 1.0:
            raise ConfigError("anomaly_fraction must lie in [0, 1]")
        known = {f.name for f in dataclasses.fields(ScenarioConfig)}
        bad = sorted(set(self.scene) - known)
        if bad:
            raise ConfigError(f"unknown scene keys: {bad}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _line_of(text: str, key: str) -> int:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return i
    return 1


_FIELD_TYPES = {
    "scenario": str, "n_sequences": int, "train_fraction": (int, float), "one_class": bool,
    "anomaly_fraction": (int, float, type(None)), "clothing": list, "environments": list,
    "walls": list, "fall_fraction": (int, float), "blank_fraction": (int, float), "scene": dict,
}


def parse_dataset_config(text: str) -> DatasetConfig:
    """Parse and validate a JSON dataset config; errors carry the offending line number."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("line 1: top-level value must be an object")
    for key, value in raw.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {_line_of(text, key)}: unknown key {key!r}")
        expected = _FIELD_TYPES[key]
        if isinstance(value, bool) and expected in (int, (int, float)):
            raise ConfigError(f"line {_line_of(text, key)}: {key!r} must be a number")
        if not isinstance(value, expected):
            raise ConfigError(f"line {_line_of(text, key)}: {key!r} has wrong type "
                              f"{type(value).__name__}")
    try:
        return DatasetConfig(**raw)
    except ConfigError as exc:
        key = next((k for k in raw if k in str(exc)), None)
        line = _line_of(text, key) if key else 1
        raise ConfigError(f"line {line}: {exc}") from None


def load_dataset_config(path) -> DatasetConfig:
    return parse_dataset_config(Path(path).read_text(encoding="utf-8"))


def config_hash(obj) -> str:
    """Stable short hash of a JSON-compatible object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
