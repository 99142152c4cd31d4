"""Dataset synthesis, per-frame processing, model training and sequence verdicts."""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import context as ctxmod
from .aligner import RadarPerspectiveProjection, project_rgbd
from .config import (BODY_REGIONS, DatasetConfig, RadarConfig, ScenarioConfig,
                     config_hash)
from .context import ContextBundle, ContextDescriptor, default_descriptor, extract_features
from .data_model import (AnnotationRecord, DatasetManifest, FrameRecord, SequenceEntry,
                         complex_to_interleaved, interleaved_to_complex, load_bundle,
                         save_bundle, tensor_read, tensor_write)
from .dsp import compute_spectrum
from .events import FallParams, TrackSeries, detect_fall
from .generator import (GenerationParams, fit_generation_params, generate_expected,
                        generation_quality)
from .localizer import (LocalizerHyper, LocalizerModel, anomaly_map, encode_branch,
                        fuse_classify, majority_vote, mean_patch, prepare_inputs, rolling_vote,
                        train_localizer)
from .scene import build_scenario, material_tables, render_depth, synthesize_adc

POSE_CLASSES = ["standing", "sitting", "lying", "absent"]

# Scenario-level localizer defaults. A 32-bin patch keeps the azimuth main lobe of
# an 8-element array inside one tile, so mean pooling does not fold positions together.
SCENARIO_HYPER = {
    "through_cloth": LocalizerHyper(patch=32, anchor_bin=8, normalize=True, epochs=800),
    "through_wall": LocalizerHyper(patch=32),
    "fall": LocalizerHyper(patch=32, epochs=800, mask_near=3),
}
# The pose head cannot use the camera (it sees only the wall), so it registers on the
# strongest unexplained radar return and drops absolute scale, which varies with wall
# and distance. Presence itself comes from the position head's "none" class.
POSE_HYPER = LocalizerHyper(patch=16, crop=12, lambda_mse=0.0, anchor_bin=16, register_on="residual",
                            normalize=True, residual_margin=3)


def class_names(scenario: str) -> list:
    if scenario == "through_cloth":
        return ["none"] + [r[0] for r in BODY_REGIONS]
    return ["none"] + [f"position_{i}" for i in range(1, 7)]


# ---------------------------------------------------------------------------
# dataset drawing
# ---------------------------------------------------------------------------

@dataclass
class SequencePlan:
    id: str
    split: str
    label: int
    seed: int
    scene: ScenarioConfig
    context: dict


def _seq_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(i)]).generate_state(1)[0])


def _assign_splits(labels: list, train_fraction: float, one_class: bool) -> list:
    """Stratified split: within label order, every position whose cumulative quota ticks is train.

    A label left without any train sequence then borrows one from the label with
    the most, so every class can be learned and the train count is unchanged.
    """
    n = len(labels)
    splits = ["test"] * n
    if one_class:
        normal = [i for i in range(n) if labels[i] == 0]
        k = min(len(normal), int(round(train_fraction * n)))
        for i in normal[:k]:
            splits[i] = "train"
        return splits
    order = sorted(range(n), key=lambda i: (labels[i], i))
    for j, i in enumerate(order):
        if int(np.floor((j + 1) * train_fraction + 1e-9)) > int(np.floor(j * train_fraction + 1e-9)):
            splits[i] = "train"
    for lab in sorted(set(labels)):
        members = [i for i in range(n) if labels[i] == lab]
        if any(splits[i] == "train" for i in members):
            continue
        counts = {}
        for i in range(n):
            if splits[i] == "train":
                counts[labels[i]] = counts.get(labels[i], 0) + 1
        donor = max(sorted(counts), key=lambda k: counts[k]) if counts else None
        if donor is None or counts[donor] < 2:
            splits[members[0]] = "train"
            continue
        last = max(i for i in range(n) if labels[i] == donor and splits[i] == "train")
        splits[last], splits[members[0]] = "test", "train"
    return splits


def draw_dataset(dc: DatasetConfig, seed: int) -> list[SequencePlan]:
    """Deterministic per-sequence scene plans with balanced classes and a stratified split."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    n = dc.n_sequences
    plans = []
    if dc.scenario == "through_cloth":
        n_cls = 1 + len(BODY_REGIONS)
        labels = [i % n_cls for i in range(n)]
        if dc.anomaly_fraction is not None:
            # which sequences carry an object is random; the regions cycle so all stay covered
            hit = rng.random(n) < dc.anomaly_fraction
            k = np.cumsum(hit) - 1
            labels = [int(1 + k[i] % len(BODY_REGIONS)) if hit[i] else 0 for i in range(n)]
        for i, lab in enumerate(labels):
            cloth = dc.clothing[int(rng.integers(len(dc.clothing)))]
            env = dc.environments[int(rng.integers(len(dc.environments)))]
            sc = ScenarioConfig.for_scenario("through_cloth", clothing=cloth, environment=env,
                                             anomaly_region=None if lab == 0 else lab - 1,
                                             **dc.scene)
            plans.append((lab, sc, {"clothing": cloth, "environment": env}))
    elif dc.scenario == "through_wall":
        labels = [i % 7 for i in range(n)]
        for i, lab in enumerate(labels):
            wall = dc.walls[(i // 7) % len(dc.walls)]
            sc = ScenarioConfig.for_scenario("through_wall", wall=wall,
                                             position=None if lab == 0 else lab - 1, **dc.scene)
            plans.append((lab, sc, {"wall": wall}))
    else:
        for i in range(n):
            wall = dc.walls[int(rng.integers(len(dc.walls)))]
            pos = int(rng.integers(6))
            fall = rng.random() < dc.fall_fraction
            if fall:
                kw = dict(pose="standing", fall_to=("sitting", "lying")[int(rng.integers(2))],
                          fall_frame=int(rng.integers(8, 14)))
            else:
                # normal: someone standing or sitting still, or an empty room
                kind = int(rng.integers(3))
                kw = dict(pose=("standing", "sitting", "standing")[kind])
                if kind == 2:
                    pos = None
            sc = ScenarioConfig.for_scenario("fall", wall=wall, position=pos, **kw, **dc.scene)
            plans.append((int(fall), sc, {"wall": wall, "fall": bool(fall)}))
    labels = [p[0] for p in plans]
    splits = _assign_splits(labels, dc.train_fraction, dc.one_class)
    return [SequencePlan(f"seq_{i:04d}", splits[i], lab, _seq_seed(seed, i), sc, ctx)
            for i, ((lab, sc, ctx), _) in enumerate(zip(plans, splits))]


def simulate_sequence(sc: ScenarioConfig, seed: int) -> list[FrameRecord]:
    rc = sc.radar()
    cam = sc.camera()
    frames = []
    for scene in build_scenario(sc, seed):
        rgb, depth = render_depth(scene, cam, rc.max_range)
        adc = synthesize_adc(scene, rc, seed * 1000 + scene.frame_index)
        frames.append(FrameRecord(scene.frame_index, rgb, depth, adc, scene.annotation))
    return frames


# ---------------------------------------------------------------------------
# on-disk dataset
# ---------------------------------------------------------------------------

def write_sequence(root: Path, plan: SequencePlan, frames: list[FrameRecord]) -> SequenceEntry:
    d = root / plan.id
    d.mkdir(parents=True, exist_ok=True)
    tensor_write(np.stack([f.rgb for f in frames]), d / "rgb.mmat")
    tensor_write(np.stack([f.depth for f in frames]), d / "depth.mmat")
    tensor_write(np.stack([complex_to_interleaved(f.adc) for f in frames]), d / "adc.mmat")
    ann = [{"anomaly_class": f.ground_truth.anomaly_class, "pose": f.ground_truth.pose,
            "location_bin": f.ground_truth.location_bin} for f in frames]
    doc = {"scenario": plan.scene.scenario, "frames": ann,
           "scene": {k: v for k, v in vars(plan.scene).items() if k not in ("positions", "regions")}}
    (d / "annotations.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n",
                                        encoding="utf-8")
    files = {k: f"{plan.id}/{k}.{'json' if k == 'annotations' else 'mmat'}"
             for k in ("rgb", "depth", "adc", "annotations")}
    return SequenceEntry(plan.id, len(frames), plan.scene.fps, plan.split, plan.label, files,
                         plan.context, plan.seed)


def read_sequence(manifest: DatasetManifest, entry: SequenceEntry):
    root = Path(manifest.root)
    rgb = tensor_read(root / entry.files["rgb"])
    depth = tensor_read(root / entry.files["depth"])
    adc = interleaved_to_complex(tensor_read(root / entry.files["adc"]))
    doc = json.loads((root / entry.files["annotations"]).read_text(encoding="utf-8"))
    sc = ScenarioConfig(**doc["scene"])
    frames = []
    for i, a in enumerate(doc["frames"]):
        ann = AnnotationRecord(a["anomaly_class"], a["pose"], a["location_bin"], doc["scenario"])
        frames.append(FrameRecord(i, rgb[i], depth[i], adc[i], ann))
    return sc, frames


def simulate_dataset(dc: DatasetConfig, seed: int, out: Path, workers: int = 1
                     ) -> DatasetManifest:
    plans = draw_dataset(dc, seed)
    out.mkdir(parents=True, exist_ok=True)

    def one(plan):
        return write_sequence(out, plan, simulate_sequence(plan.scene, plan.seed))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        entries = list(ex.map(one, plans))
    m = DatasetManifest(dc.scenario, int(seed), dc.one_class, entries, dc.to_dict(), str(out))
    m.write(out / "manifest.json")
    return m


# ---------------------------------------------------------------------------
# per-frame processing
# ---------------------------------------------------------------------------

@dataclass
class Processed:
    real: np.ndarray
    proj: RadarPerspectiveProjection
    ctx: ContextDescriptor
    gen: np.ndarray
    features: np.ndarray


def process_frame(frame: FrameRecord, sc: ScenarioConfig, ctx_bundle: ContextBundle | None,
                  gp: GenerationParams, timings: dict | None = None) -> Processed:
    """Spectrum, projection, context and expected spectrum for one frame.

    ``ctx_bundle=None`` uses the scenario default context (the no-context ablation).
    """
    rc = sc.radar()
    cam = sc.camera()
    t = timings if timings is not None else {}
    t0 = time.perf_counter()
    real = compute_spectrum(frame.adc, rc)
    t1 = time.perf_counter()
    proj = project_rgbd(frame.depth, cam, rc, frame.timestamp_index)
    t2 = time.perf_counter()
    feats = extract_features(frame.rgb)
    ctx = ctx_bundle.describe_features(feats) if ctx_bundle is not None else default_descriptor(sc.scenario)
    t3 = time.perf_counter()
    gen = generate_expected(proj, ctx, rc, gp)
    t4 = time.perf_counter()
    for k, dt in (("spectrum", t1 - t0), ("projection", t2 - t1), ("context", t3 - t2),
                  ("generation", t4 - t3)):
        t[k] = t.get(k, 0.0) + 1e3 * dt
    return Processed(real, proj, ctx, gen, feats)


def residual_score(p: Processed, gp: GenerationParams) -> float:
    return generation_quality(p.gen, p.real, gp)


def localizer_inputs(p: Processed, hyper: LocalizerHyper):
    return prepare_inputs(p.real, p.gen, p.proj.grid, hyper)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

@dataclass
class PipelineModels:
    scenario: str
    context: ContextBundle
    localizer: LocalizerModel
    pose: LocalizerModel | None = None
    gen_params: GenerationParams = field(default_factory=GenerationParams)

    def check(self, scenario: str) -> None:
        for name, m in (("context", self.context), ("localizer", self.localizer)):
            if m.scenario != scenario:
                raise ValueError(f"{name} model was trained for {m.scenario!r}, "
                                 f"sequence is {scenario!r}")


def train_context_bundle(scenario: str, feats, contexts, epochs: int = 500, step: float = 0.5,
                         chash: str = "") -> ContextBundle:
    tables = material_tables()
    X = np.asarray(feats)
    if scenario == "through_cloth":
        names = list(tables["clothing"])
        y = [names.index(c["clothing"]) for c in contexts]
        prim = ctxmod.train_context(X, y, names, step, epochs, scenario, "clothing")
        env_names = list(tables["environments"])
        ye = [env_names.index(c["environment"]) for c in contexts]
        env = ctxmod.train_context(X, ye, env_names, step, epochs, scenario, "environment")
        return ContextBundle(scenario, prim, env, chash)
    names = list(tables["walls"])
    y = [names.index(c["wall"]) for c in contexts]
    prim = ctxmod.train_context(X, y, names, step, epochs, scenario, "wall")
    return ContextBundle(scenario, prim, None, chash)


def fit_gen_params(scenario: str, processed: list[Processed], labels: list,
                   rc: RadarConfig, gp: GenerationParams = GenerationParams()) -> GenerationParams:
    pairs = [(p.proj, p.ctx, p.real) for p, lab in zip(processed, labels) if lab == 0]
    if not pairs:
        return gp
    return fit_generation_params(pairs, rc, gp)


def save_gen_params(path, gp: GenerationParams) -> None:
    save_bundle(path, {"type": "generation", "params": vars(gp)}, {})


def load_gen_params(path) -> GenerationParams:
    header, _ = load_bundle(path)
    return GenerationParams(**header["params"])


# ---------------------------------------------------------------------------
# sequence inference
# ---------------------------------------------------------------------------

@dataclass
class FrameVerdict:
    probs: np.ndarray
    label: int
    aggregated: int
    score: float
    pose: str | None = None
    anomaly_map: np.ndarray | None = None


@dataclass
class AnomalyVerdict:
    frames: list
    label: int                   # aggregated over the whole sequence
    event: str | None = None     # fall scenario only
    timings: dict = field(default_factory=dict)

    @property
    def frame_labels(self) -> list:
        return [f.label for f in self.frames]


def _location_bin(label: int, sc: ScenarioConfig, rc: RadarConfig):
    if label == 0:
        return None
    x, z = sc.positions[label - 1]
    return int(round(float(rc.range_bin(np.hypot(x, z)))))


def run_pipeline(frames: list[FrameRecord], models: PipelineModels, sc: ScenarioConfig,
                 use_context: bool = True, with_maps: bool = True,
                 fall_params: FallParams = FallParams()) -> AnomalyVerdict:
    """Per-frame spectrum -> projection -> context -> generation -> localizer, then voting."""
    models.check(sc.scenario)
    rc = sc.radar()
    loc = models.localizer
    timings: dict = {}
    out = []
    labels = []
    pose_labels = []
    for fr in frames:
        p = process_frame(fr, sc, models.context if use_context else None, models.gen_params,
                          timings)
        t0 = time.perf_counter()
        real, gen = localizer_inputs(p, loc.hyper)
        emb_r, cls_r = encode_branch(real, loc.real, loc.patch)
        emb_g, cls_g = encode_branch(gen, loc.gen, loc.patch)
        probs = fuse_classify(cls_r, cls_g, loc)
        label = int(np.argmax(probs))
        labels.append(label)
        pose = None
        if models.pose is not None:
            preal, pgen = localizer_inputs(p, models.pose.hyper)
            _, pr = encode_branch(preal, models.pose.real, models.pose.patch)
            _, pg = encode_branch(pgen, models.pose.gen, models.pose.patch)
            pp = fuse_classify(pr, pg, models.pose)
            absent = POSE_CLASSES.index("absent")
            pose_labels.append(absent if label == 0 else int(np.argmax(pp[:absent])))
            pose = POSE_CLASSES[pose_labels[-1]]
        t1 = time.perf_counter()
        score = residual_score(p, models.gen_params)
        t2 = time.perf_counter()
        amap = None
        if with_maps:
            foot = None
            if label != 0 and sc.scenario == "through_cloth":
                foot = _footprint(real, loc)
            amap = anomaly_map(real, gen, loc, label, foot)
        t3 = time.perf_counter()
        timings["localizer"] = timings.get("localizer", 0.0) + 1e3 * (t1 - t0)
        timings["scoring"] = timings.get("scoring", 0.0) + 1e3 * (t2 - t1)
        timings["anomaly_map"] = timings.get("anomaly_map", 0.0) + 1e3 * (t3 - t2)
        out.append(FrameVerdict(probs, label, majority_vote(labels, loc.hyper.window), score,
                                pose, amap))
    verdict = AnomalyVerdict(out, majority_vote(labels, len(labels)), timings=timings)
    if models.pose is not None:
        t0 = time.perf_counter()
        verdict.event = fall_event(labels, pose_labels, sc, rc, loc.hyper.window, fall_params)
        timings["events"] = 1e3 * (time.perf_counter() - t0)
    return verdict


def _footprint(real: np.ndarray, m: LocalizerModel):
    """Strongest bin of the real spectrum: the highlight centre for a non-zero class."""
    r, a = np.unravel_index(int(np.argmax(real)), real.shape)
    return int(r), int(a)


def fall_event(labels, pose_labels, sc: ScenarioConfig, rc: RadarConfig, window: int,
               fp: FallParams) -> str:
    """Smooth per-frame pose / position labels with the rolling vote, then apply the fall rule."""
    poses = [POSE_CLASSES[k] for k in rolling_vote(pose_labels, window)]
    pos = rolling_vote(labels, window)
    locs = tuple(None if p == "absent" else _location_bin(c, sc, rc) for p, c in zip(poses, pos))
    return detect_fall(TrackSeries(tuple(poses), locs, sc.fps), fp)


def train_pipeline_localizers(scenario: str, processed_seqs, hyper: LocalizerHyper | None = None,
                              seed: int = 0, stride: int = 1, chash: str = "",
                              pose_hyper: LocalizerHyper = POSE_HYPER):
    """Train the class localizer (and the pose head for falls) on processed training sequences.

    ``processed_seqs`` is a list of (list[Processed], list[AnnotationRecord]).
    """
    hyper = hyper or SCENARIO_HYPER[scenario]
    Mr, Mg, Pr, Pg, y, yp = [], [], [], [], [], []
    for procs, anns in processed_seqs:
        for p, a in list(zip(procs, anns))[::stride]:
            # a person lying flat returns little more than noise, so those frames would
            # teach the position head that noise means someone is there
            if not (scenario == "fall" and a.pose == "lying"):
                real, gen = localizer_inputs(p, hyper)
                Mr.append(mean_patch(real, hyper.patch))
                Mg.append(mean_patch(gen, hyper.patch))
                y.append(a.anomaly_class)
            if scenario == "fall":
                real, gen = localizer_inputs(p, pose_hyper)
                Pr.append(mean_patch(real, pose_hyper.patch))
                Pg.append(mean_patch(gen, pose_hyper.patch))
                yp.append(POSE_CLASSES.index(a.pose))
    Mr, Mg = np.asarray(Mr), np.asarray(Mg)
    names = class_names(scenario)
    loc = train_localizer(Mr, Mg, y, names, hyper, seed, scenario, "anomaly", pooled=True)
    loc.config_hash = chash
    pose = None
    if scenario == "fall":
        present = sorted(set(yp))
        if present != list(range(len(POSE_CLASSES))):
            missing = [POSE_CLASSES[i] for i in range(len(POSE_CLASSES)) if i not in present]
            raise ValueError(f"no training frames for pose class(es): {', '.join(missing)}")
        pose = train_localizer(np.asarray(Pr), np.asarray(Pg), yp, POSE_CLASSES, pose_hyper,
                               seed + 1, scenario, "pose", pooled=True)
        pose.config_hash = chash
    return loc, pose


def config_for(scenario: str, dc_dict: dict | None = None) -> ScenarioConfig:
    dc_dict = dc_dict or {}
    return ScenarioConfig.for_scenario(scenario, **dc_dict.get("scene", {}))

