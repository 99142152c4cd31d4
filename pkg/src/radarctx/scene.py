"""Seeded synthetic scenes: geometry, RGB-D rendering and FMCW ADC synthesis."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

from .config import CameraModel, RadarConfig, ScenarioConfig
from .data_model import AnnotationRecord
from .dsp import azimuth_kernel, range_kernel


@lru_cache(maxsize=None)
def material_tables() -> dict:
    text = resources.files("radarctx").joinpath("data/materials.json").read_text()
    return json.loads(text)


def wall_material(name: str) -> tuple[float, float]:
    """(transmission, reflectivity) for a wall material; reflectivity = 1 - t - absorption."""
    tables = material_tables()
    if name not in tables["walls"]:
        raise KeyError(f"unknown wall material {name!r}")
    t = tables["walls"][name]["transmission"]
    return t, max(0.0, round(1.0 - t - tables["wall_absorption"], 12))


@dataclass(frozen=True)
class Scatterer:
    position: tuple  # radar frame, meters
    rcs: float       # m^2
    velocity: tuple = (0.0, 0.0, 0.0)
    tag: str = ""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in the radar frame used for camera rendering."""

    lo: tuple
    hi: tuple
    color: tuple
    opaque: bool = True


@dataclass(frozen=True)
class Occluder:
    kind: str            # cloth | wall | reflector
    material: str
    lo: tuple            # box extents in the radar frame
    hi: tuple
    transmission: float
    reflectivity: float
    color: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.kind not in ("cloth", "wall", "reflector"):
            raise ValueError(f"unknown occluder kind {self.kind!r}")
        if not (0 <= self.transmission <= 1 and 0 <= self.reflectivity <= 1):
            raise ValueError("transmission and reflectivity must lie in [0, 1]")
        if self.transmission + self.reflectivity > 1 + 1e-12:
            raise ValueError("transmission + reflectivity must not exceed 1")

    @property
    def range_extent(self) -> float:
        return float(self.hi[2] - self.lo[2])

    @property
    def visible(self) -> bool:
        return self.kind != "cloth"


@dataclass(frozen=True)
class PersonSpec:
    torso: tuple                 # (x, floor-relative y is implied, z) radar frame of body centre on the floor
    pose: str
    region_points: tuple         # 8 radar-frame points on the body surface
    velocity: tuple = (0.0, 0.0, 0.0)
    clothing: str = "casual"
    boxes: tuple = ()


@dataclass(frozen=True)
class AnomalySpec:
    region: int
    position: tuple
    rcs: float


@dataclass
class SceneSpec:
    frame_index: int
    scatterers: list
    occluders: list
    person: PersonSpec | None
    anomaly: AnomalySpec | None
    ambient_noise_snr_db: float | None
    background: tuple = (0.0, 0.0, 0.0)
    annotation: AnnotationRecord | None = None
    extra_boxes: list = field(default_factory=list)

    def boxes(self) -> list:
        out = list(self.extra_boxes)
        for occ in self.occluders:
            if occ.visible:
                out.append(Box(occ.lo, occ.hi, occ.color))
        if self.person is not None:
            out.extend(self.person.boxes)
        return out


# ---------------------------------------------------------------------------
# body model
# ---------------------------------------------------------------------------

# (name, x0, x1, h0, h1, half-depth), heights above the floor
_STANDING = (
    ("head", -0.09, 0.09, 1.52, 1.74, 0.10),
    ("torso", -0.20, 0.20, 0.95, 1.50, 0.12),
    ("pelvis", -0.18, 0.18, 0.75, 0.95, 0.11),
    ("leg_l", -0.17, -0.03, 0.00, 0.75, 0.07),
    ("leg_r", 0.03, 0.17, 0.00, 0.75, 0.07),
    ("arm_l", -0.29, -0.21, 0.80, 1.45, 0.05),
    ("arm_r", 0.21, 0.29, 0.80, 1.45, 0.05),
)


def _body_parts(pose: str, gait_phase: float):
    """Boxes (floor-relative heights, z relative to body centre) and point scatterers.

    Standing and sitting bodies reflect from their radar-facing surfaces;
    a person lying flat returns only a few weak glints.
    """
    swing = 0.05 * math.sin(gait_phase)
    if pose == "standing":
        boxes = []
        for name, x0, x1, h0, h1, hd in _STANDING:
            dz = 0.0
            if name in ("arm_l", "leg_r"):
                dz = swing
            elif name in ("arm_r", "leg_l"):
                dz = -swing
            boxes.append((name, x0, x1, h0, h1, -hd + dz, hd + dz))
        return boxes, _surface_samples(boxes)
    if pose == "sitting":
        boxes = [
            ("head", -0.09, 0.09, 1.08, 1.30, -0.10, 0.10),
            ("torso", -0.20, 0.20, 0.55, 1.06, -0.12, 0.12),
            ("thighs", -0.18, 0.18, 0.42, 0.58, -0.50, 0.05),
            ("shin_l", -0.17, -0.03, 0.00, 0.42, -0.50, -0.36),
            ("shin_r", 0.03, 0.17, 0.00, 0.42, -0.50, -0.36),
            ("arm_l", -0.29, -0.21, 0.55, 1.00, -0.05, 0.05),
            ("arm_r", 0.21, 0.29, 0.55, 1.00, -0.05, 0.05),
        ]
        return boxes, _surface_samples(boxes)
    if pose == "lying":
        boxes = [("body", -0.95, 0.80, 0.00, 0.24, -0.20, 0.20),
                 ("head", 0.80, 1.00, 0.00, 0.20, -0.10, 0.10)]
        # lying flat is nearly specular-away from the radar: weak returns
        points = [(x, 0.22, -0.20, 0.002, -1.0) for x in (-0.6, -0.2, 0.2, 0.6)]
        return boxes, points
    raise ValueError(f"pose {pose!r} has no body")


SURFACE_SPACING = 0.06      # m between body surface samples
SURFACE_DENSITY = 2.7       # return amplitude per m^2 of radar-facing body surface


def _surface_samples(boxes, spacing: float = SURFACE_SPACING, density: float = SURFACE_DENSITY):
    """Point scatterers on the radar-facing front and top faces of body boxes.

    Each sample stands for one ``spacing x spacing`` surface cell with return
    amplitude ``density * cell_area`` before the incidence-angle factor applied
    in :func:`_person`, so the body's return grows with its visible area.
    Front-face cells hidden behind a nearer box are dropped. Rows are
    ``(x, h, z_rel, rcs, is_top_face)``.
    """
    amp = density * spacing * spacing
    rcs = amp * amp
    pts = []
    for name, x0, x1, h0, h1, z0, z1 in boxes:
        xs = np.arange(x0 + spacing / 2, x1, spacing)
        if xs.size == 0:
            xs = np.array([(x0 + x1) / 2])
        hs = np.arange(h0 + spacing / 2, h1, spacing)
        if hs.size == 0:
            hs = np.array([(h0 + h1) / 2])
        for x in xs:
            for h in hs:
                hidden = any(o[0] != name and o[1] <= x <= o[2] and o[3] <= h <= o[4] and o[5] < z0
                             for o in boxes)
                if not hidden:
                    pts.append((float(x), float(h), z0, rcs, 0.0))
        zs = np.arange(z0 + spacing / 2, z1, spacing)
        for x in xs:
            for z in zs:
                pts.append((float(x), h1, float(z), rcs, 1.0))
    return pts


def _region_points(pose: str, regions, boxes):
    """Radar-independent (x, h, z_rel) of each canonical region on the body front."""
    out = []
    for _, lateral, height in regions:
        if pose == "standing":
            h = height
        elif pose == "sitting":
            h = 0.10 + (height - 0.10) * (1.06 - 0.10) / (1.50 - 0.10)
        else:
            h = 0.12
        # front face of the frontmost box containing (lateral, h)
        zf = None
        for _, x0, x1, h0, h1, z0, _z1 in boxes:
            if h0 <= h <= h1 and x0 - 0.05 <= lateral <= x1 + 0.05:
                zf = z0 if zf is None else min(zf, z0)
        out.append((lateral, h, (zf if zf is not None else -0.1) - 0.005))
    return out


def _person(cfg: ScenarioConfig, pose: str, x0: float, z0: float, gait_phase: float,
            velocity: tuple, rng: np.random.Generator, clothing_color) -> tuple:
    hs = cfg.sensor_height
    boxes, points = _body_parts(pose, gait_phase)
    tables = material_tables()
    skin = tuple(tables["skin_color"])
    rboxes = []
    for name, bx0, bx1, h0, h1, zr0, zr1 in boxes:
        color = skin if name == "head" else tuple(clothing_color)
        rboxes.append(Box((x0 + bx0, h0 - hs, z0 + zr0), (x0 + bx1, h1 - hs, z0 + zr1), color))
    scat = []
    j = cfg.jitter_m
    if points:
        pts = np.array(points, dtype=float)
        pos = np.stack([x0 + pts[:, 0], pts[:, 1] - hs, z0 + pts[:, 2] - 0.005], axis=1)
        pos += rng.normal(0.0, j, pos.shape)
        # projected area toward the radar: amplitude ~ cos(incidence), rcs ~ cos^2
        los = -pos / np.linalg.norm(pos, axis=1, keepdims=True)
        top = pts[:, 4]
        cos_inc = np.where(top > 0.5, los[:, 1], np.where(top < -0.5, 1.0, -los[:, 2]))
        cos_inc = np.clip(cos_inc, 0.02, 1.0)
        rcs = pts[:, 3] * cos_inc ** 2 * cfg.body_rcs_scale * np.exp(rng.normal(0.0, 0.1, len(pts)))
        scat = [Scatterer(tuple(p), float(r), velocity, "body") for p, r in zip(pos.tolist(), rcs)]
    regions = tuple(
        (x0 + lx, h - hs, z0 + zr) for lx, h, zr in _region_points(pose, cfg.regions, boxes))
    spec = PersonSpec(torso=(x0, -hs, z0), pose=pose, region_points=regions,
                      velocity=velocity, clothing=cfg.clothing, boxes=tuple(rboxes))
    return spec, scat


def _jitter_color(color, rng: np.random.Generator):
    c = np.asarray(color) * rng.uniform(0.88, 1.08) + rng.normal(0.0, 0.02, 3)
    return tuple(np.clip(c, 0.0, 1.0).tolist())


def _pose_at(cfg: ScenarioConfig, frame: int) -> str:
    if cfg.fall_to is not None and frame >= cfg.fall_frame:
        return cfg.fall_to
    return cfg.pose


def build_scenario(config: ScenarioConfig, seed: int) -> list[SceneSpec]:
    """Ground-truth scenes for every frame of one sequence; pure in (config, seed)."""
    cfg = config
    tables = material_tables()
    seq_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0FFEE]))
    rc = cfg.radar()
    background = _jitter_color(tables["environments"][cfg.environment]["color"], seq_rng)
    scenes = []
    if cfg.scenario == "through_cloth":
        if cfg.clothing not in tables["clothing"]:
            raise KeyError(f"unknown clothing {cfg.clothing!r}")
        cloth = tables["clothing"][cfg.clothing]
        color = _jitter_color(cloth["color"], seq_rng)
        gait_f = seq_rng.uniform(0.8, 1.2)
        gait_phi0 = seq_rng.uniform(0, 2 * math.pi)
        lateral = seq_rng.uniform(-0.05, 0.05)
        metal_rcs = cfg.metal_rcs * seq_rng.uniform(0.8, 1.25)
        for f in range(cfg.frames):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), f + 1]))
            t = f / cfg.fps
            z0 = cfg.start_distance - cfg.walk_speed * t
            vel = (0.0, 0.0, -cfg.walk_speed)
            phase = gait_phi0 + 2 * math.pi * gait_f * t
            person, scat = _person(cfg, "standing", lateral, z0, phase, vel, rng, color)
            front = z0 - 0.12 - 0.05
            occ = Occluder("cloth", cfg.clothing,
                           (lateral - 0.32, 0.03 - cfg.sensor_height, front - 0.05),
                           (lateral + 0.32, 1.52 - cfg.sensor_height, front - 0.02),
                           cloth["transmission"], 0.0, color)
            anomaly = None
            loc = None
            if cfg.anomaly_region is not None:
                p = np.asarray(person.region_points[cfg.anomaly_region]) + rng.normal(0, cfg.jitter_m / 2, 3)
                anomaly = AnomalySpec(cfg.anomaly_region, tuple(p.tolist()), metal_rcs)
                scat.append(Scatterer(anomaly.position, metal_rcs, vel, "anomaly"))
                loc = int(round(float(rc.range_bin(np.linalg.norm(p)))))
            ann = AnnotationRecord(cfg.anomaly_class, "standing", loc, cfg.scenario)
            scenes.append(SceneSpec(f, scat, [occ], person, anomaly, cfg.snr_db,
                                    background, ann))
        return scenes

    # through_wall / fall: static wall, optional person behind it
    if cfg.wall not in tables["walls"]:
        raise KeyError(f"unknown wall material {cfg.wall!r}")
    t_wall, refl = wall_material(cfg.wall)
    wall_color = _jitter_color(tables["walls"][cfg.wall]["color"], seq_rng)
    zw = cfg.wall_distance
    wall = Occluder("wall", cfg.wall, (-3.0, -cfg.sensor_height, zw), (3.0, 2.4 - cfg.sensor_height, zw + 0.05),
                    t_wall, refl, wall_color)
    cam = cfg.camera()
    s_max = math.sin(math.atan((cam.width / 2) / cam.fx))
    sway = seq_rng.uniform(0, 2 * math.pi)
    for f in range(cfg.frames):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), f + 1]))
        scat = []
        if refl > 0:
            # facets about one azimuth bin apart so the wall reads as a continuous surface
            n_facets = int(round(s_max * rc.azimuth_bins)) + 1
            facet_rcs = refl * cfg.wall_facet_rcs * (9 / n_facets) ** 2
            for s in np.linspace(-s_max, s_max, n_facets):
                r = zw - 0.002
                pos = (r * s, 0.0, r * math.sqrt(1 - s * s))
                scat.append(Scatterer(pos, facet_rcs * math.exp(rng.normal(0, 0.05)), tag="wall"))
        person = None
        pose = "absent"
        loc = None
        if cfg.position is not None:
            x, z = cfg.positions[cfg.position]
            pose = _pose_at(cfg, f)
            dx = 0.02 * math.sin(sway + 0.7 * f)
            person, body = _person(cfg, pose, x + dx, z, 0.0, (0.0, 0.0, 0.0), rng,
                                   _jitter_color((0.4, 0.4, 0.45), seq_rng))
            scat.extend(body)
            loc = int(round(float(rc.range_bin(math.hypot(x, z)))))
        cls = cfg.anomaly_class
        ann = AnnotationRecord(cls, pose, loc, cfg.scenario)
        scenes.append(SceneSpec(f, scat, [wall], person, None, cfg.snr_db, background, ann))
    return scenes


# ---------------------------------------------------------------------------
# camera rendering
# ---------------------------------------------------------------------------

def _camera_rays(cam: CameraModel):
    v, u = np.mgrid[0:cam.height, 0:cam.width].astype(float)
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    return d_cam.reshape(-1, 3) @ cam.R.T  # ray parameter == camera-frame depth


def render_depth(scene: SceneSpec, cam: CameraModel, max_depth: float | None = None):
    """Z-buffered flat-shaded render; returns ``(rgb HxWx3, depth HxW)``, depth 0 = no hit.

    Cloth occluders are not drawn, so the clothed silhouette stays visible;
    opaque walls hide everything behind them.
    """
    if max_depth is None:
        max_depth = RadarConfig().max_range
    d = _camera_rays(cam)
    o = cam.t
    n = d.shape[0]
    depth = np.full(n, np.inf)
    rgb = np.tile(np.asarray(scene.background, dtype=float), (n, 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        for box in scene.boxes():
            lo = np.asarray(box.lo) - o
            hi = np.asarray(box.hi) - o
            t1 = lo * inv
            t2 = hi * inv
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tmax >= tmin) & (tmin > 1e-6) & (tmin < depth)
            depth[hit] = tmin[hit]
            rgb[hit] = box.color
    valid = np.isfinite(depth) & (depth <= max_depth)
    depth = np.where(valid, depth, 0.0)
    return (rgb.reshape(cam.height, cam.width, 3).astype(np.float32),
            depth.reshape(cam.height, cam.width).astype(np.float32))


# ---------------------------------------------------------------------------
# radar forward model
# ---------------------------------------------------------------------------

def _segment_crosses(p: np.ndarray, occ: Occluder) -> np.ndarray:
    """For each row of ``p``: does the segment radar-origin -> p pass through the occluder box?"""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    lo, hi = np.asarray(occ.lo), np.asarray(occ.hi)
    t0 = np.zeros(len(p))
    t1 = np.ones(len(p))
    ok = np.ones(len(p), dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(3):
            flat = np.abs(p[:, k]) < 1e-15
            ok &= ~flat | ((lo[k] <= 0.0) & (0.0 <= hi[k]))
            a = np.where(flat, -np.inf, lo[k] / p[:, k])
            b = np.where(flat, np.inf, hi[k] / p[:, k])
            t0 = np.maximum(t0, np.minimum(a, b))
            t1 = np.minimum(t1, np.maximum(a, b))
    return ok & (t1 > t0) & (t0 < 1.0 - 1e-9)


def scatterer_params(scene: SceneSpec, rc: RadarConfig):
    """Per-scatterer amplitude and fractional (range, azimuth) bins."""
    if not scene.scatterers:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    pos = np.array([s.position for s in scene.scatterers], dtype=float)
    rcs = np.array([s.rcs for s in scene.scatterers], dtype=float)
    if np.any(rcs <= 0):
        raise ValueError("scatterer rcs must be positive")
    r = np.linalg.norm(pos, axis=1)
    if np.any(r <= 0) or np.any(r >= rc.max_range):
        bad = r[(r <= 0) | (r >= rc.max_range)]
        raise ValueError(f"scatterer range {bad[0]:.3f} m outside (0, {rc.max_range:.3f}) m")
    amp = np.sqrt(rcs) / r ** 2
    for occ in scene.occluders:
        amp = np.where(_segment_crosses(pos, occ), amp * occ.transmission, amp)
    sin_t = pos[:, 0] / np.hypot(pos[:, 0], pos[:, 2])
    return amp, rc.range_bin(r), rc.azimuth_bin(sin_t)


def noise_sigma(rc: RadarConfig, snr_db: float | None) -> float:
    """Per-sample complex noise std giving a normalised-spectrum noise RMS of 10^(-snr/20)."""
    if snr_db is None or math.isinf(snr_db) and snr_db > 0:
        return 0.0
    from .dsp import _windows
    wr, wa = _windows(rc)
    gain = (wr.sum() * wa.sum()) / math.sqrt((wr ** 2).sum() * (wa ** 2).sum())
    return 10 ** (-snr_db / 20) * gain


def synthesize_adc(scene: SceneSpec, rc: RadarConfig, seed: int) -> np.ndarray:
    """Complex ADC samples, shape ``(virtual_antennas, samples_per_chirp)``."""
    amp, mu_r, mu_a = scatterer_params(scene, rc)
    # phase referenced to the window centres, so every point-spread response is real
    n = np.arange(rc.samples_per_chirp) - rc.samples_per_chirp // 2
    k = np.arange(rc.virtual_antennas) - rc.virtual_antennas // 2
    sin_t = (mu_a - rc.azimuth_bins / 2) / (rc.azimuth_bins * rc.antenna_spacing)
    fast = np.exp(2j * np.pi * np.outer(mu_r, n) / rc.range_bins)           # S x N
    spatial = np.exp(2j * np.pi * rc.antenna_spacing * np.outer(sin_t, k))  # S x K
    adc = (spatial * amp[:, None]).T @ fast
    sigma = noise_sigma(rc, scene.ambient_noise_snr_db)
    if sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xADC]))
        adc = adc + sigma / math.sqrt(2) * (rng.standard_normal(adc.shape)
                                            + 1j * rng.standard_normal(adc.shape))
    return adc


def analytic_spectrum(scene: SceneSpec, rc: RadarConfig) -> np.ndarray:
    """Noise-free spectrum by magnitude superposition of window point-spread functions."""
    amp, mu_r, mu_a = scatterer_params(scene, rc)
    if amp.size == 0:
        return np.zeros((rc.range_bins, rc.azimuth_bins), dtype=np.float32)
    kr = range_kernel(rc, np.arange(rc.range_bins)[:, None] - mu_r[None, :])     # R x S
    ka = azimuth_kernel(rc, np.arange(rc.azimuth_bins)[:, None] - mu_a[None, :])  # A x S
    return ((kr * amp) @ ka.T).astype(np.float32)


def scene_pose(scene: SceneSpec) -> str:
    return "absent" if scene.person is None else scene.person.pose

