"""Command-line entry points: simulate, train-context, train-localizer, run, evaluate, render-map.

Every option is long-form. Effective settings resolve as command line over
``--config`` file over built-in defaults and are printed before work starts.
Outputs go to a temporary sibling first and are moved into place only when
the command succeeds.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .config import ConfigError, DatasetConfig, config_hash, parse_dataset_config
from .context import ContextBundle, accuracy, extract_features
from .data_model import DatasetManifest, spectrum_to_image
from .dsp import compute_spectrum
from .generator import GenerationParams, generate_expected
from .localizer import LocalizerModel
from .metrics import (RegionCoordinateTable, auroc, average_precision, event_counts, event_f1,
                      macro_f1, mean_localization_error)

OUT_ENV = "RADARCTX_OUT"


class CommandError(RuntimeError):
    """A user-facing failure: printed without a traceback, exit status 2."""


# ---------------------------------------------------------------------------
# settings and output plumbing
# ---------------------------------------------------------------------------

def default_out(name: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "radarctx_out")) / name


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """CLI > config file > defaults. Unset CLI options are ``None``."""
    eff = dict(defaults)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            doc = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{cfg_path}: line {exc.lineno}: invalid JSON: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{cfg_path}: line 1: top-level value must be an object")
        unknown = sorted(set(doc) - set(defaults))
        if unknown:
            raise ConfigError(f"{cfg_path}: unknown option(s) {unknown}")
        eff.update(doc)
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            eff[k] = v
    return eff


_PATH_KEYS = ("out", "manifest", "context", "localizer", "verdicts", "workers", "config")


def _hashable(eff: dict) -> dict:
    """Settings that change results; paths and worker counts do not."""
    return {k: v for k, v in eff.items() if k not in _PATH_KEYS}


def show(command: str, eff: dict) -> None:
    print(json.dumps({"command": command, "config": eff}, sort_keys=True, default=str), flush=True)


@contextmanager
def staged_dir(final: Path):
    """Yield a temporary directory that replaces ``final`` only on success."""
    final = Path(final)
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{final.name}.", dir=final.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if final.exists():
        shutil.rmtree(final) if final.is_dir() else final.unlink()
    os.replace(tmp, final)


@contextmanager
def staged_file(final: Path):
    final = Path(final)
    final.parent.mkdir(parents=True, exist_ok=True)
    fd, name = tempfile.mkstemp(prefix=f".{final.name}.", dir=final.parent)
    os.close(fd)
    tmp = Path(name)
    try:
        yield tmp
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    os.replace(tmp, final)


def write_json(path: Path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise CommandError(f"manifest not found: {path}")
    m = DatasetManifest.read(path)
    m.validate()
    return m


def _select(manifest: DatasetManifest, split: str, ids=None) -> list:
    seqs = manifest.sequences if split == "all" else manifest.split(split)
    if ids:
        wanted = set(ids)
        seqs = [s for s in manifest.sequences if s.id in wanted]
        missing = sorted(wanted - {s.id for s in seqs})
        if missing:
            raise CommandError(f"unknown sequence id(s): {missing}")
    if not seqs:
        raise CommandError(f"no sequences in split {split!r}")
    return seqs


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    scenario: str
    metrics: dict
    stage_ms: dict
    config_hash: str
    seed: int
    total_ms: float = field(init=False)

    def __post_init__(self):
        if any(v < 0 for v in self.stage_ms.values()):
            raise ValueError("stage times must be non-negative")
        self.total_ms = float(sum(self.stage_ms.values()))

    def to_dict(self) -> dict:
        return asdict(self)


TIMING_KEYS = ("stage_ms", "total_ms")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> dict:
    base = DatasetConfig()
    if args.config:
        try:
            base = parse_dataset_config(Path(args.config).read_text(encoding="utf-8"))
        except ConfigError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
    over = {k: v for k, v in (("scenario", args.scenario), ("n_sequences", args.n_sequences),
                              ("train_fraction", args.train_fraction),
                              ("one_class", args.one_class)) if v is not None}
    dc = DatasetConfig(**{**base.to_dict(), **over})
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out) if args.out else default_out("dataset")
    show("simulate", {"dataset": dc.to_dict(), "seed": seed, "out": str(out),
                      "workers": args.workers})
    with staged_dir(out) as tmp:
        m = pl.simulate_dataset(dc, seed, tmp, args.workers)
    n_train = len(m.split("train"))
    print(json.dumps({"sequences": len(m.sequences), "train": n_train,
                      "test": len(m.sequences) - n_train,
                      "manifest": str(out / "manifest.json")}, sort_keys=True))
    return {"manifest": out / "manifest.json"}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _context_training_set(manifest: DatasetManifest, stride: int):
    feats, ctxs = [], []
    for e in manifest.split("train"):
        _, frames = pl.read_sequence(manifest, e)
        for fr in frames[::stride]:
            feats.append(extract_features(fr.rgb))
            ctxs.append(e.context)
    return np.asarray(feats), ctxs


def cmd_train_context(args) -> dict:
    eff = resolve(args, {"manifest": None, "out": str(default_out("context")), "epochs": 500,
                         "step": 0.5, "frame_stride": 6, "seed": 0})
    if not eff["manifest"]:
        raise CommandError("--manifest is required")
    show("train-context", eff)
    m = _read_manifest(eff["manifest"])
    X, ctxs = _context_training_set(m, eff["frame_stride"])
    chash = config_hash({"manifest": m.config, "seed": m.seed, "train": _hashable(eff)})
    bundle = pl.train_context_bundle(m.scenario, X, ctxs, eff["epochs"], eff["step"], chash)
    names = bundle.primary.class_names
    key = "clothing" if m.scenario == "through_cloth" else "wall"
    missing = sorted({c[key] for c in ctxs} - set(names))
    if missing:
        raise CommandError(f"context classes missing from the material table: {missing}")
    acc = accuracy(bundle.primary, X, [names.index(c[key]) for c in ctxs])
    with staged_dir(Path(eff["out"])) as tmp:
        bundle.save(tmp)
    print(json.dumps({"train_accuracy": acc, "classes": names, "config_hash": chash}))
    return {"train_accuracy": acc, "model": Path(eff["out"])}


def _process_sequence(manifest, entry, bundle, gp, stride=1, use_context=True):
    sc, frames = pl.read_sequence(manifest, entry)
    frames = frames[::stride]
    procs = [pl.process_frame(f, sc, bundle if use_context else None, gp) for f in frames]
    return sc, procs, [f.ground_truth for f in frames]


def cmd_train_localizer(args) -> dict:
    eff = resolve(args, {"manifest": None, "context": None, "out": str(default_out("localizer")),
                         "frame_stride": 3, "seed": 0, "epochs": None})
    if not eff["manifest"] or not eff["context"]:
        raise CommandError("--manifest and --context are required")
    show("train-localizer", eff)
    m = _read_manifest(eff["manifest"])
    bundle = ContextBundle.load(eff["context"])
    if bundle.scenario != m.scenario:
        raise CommandError(f"context model is for {bundle.scenario!r}, dataset is {m.scenario!r}")
    gp0 = GenerationParams()
    seqs = [_process_sequence(m, e, bundle, gp0, eff["frame_stride"]) for e in m.split("train")]
    rc = seqs[0][0].radar()
    flat = [p for _, ps, _ in seqs for p in ps]
    labels = [a.anomaly_class for _, _, an in seqs for a in an]
    gp = pl.fit_gen_params(m.scenario, flat, labels, rc, gp0)
    for p in flat:
        p.gen = generate_expected(p.proj, p.ctx, rc, gp)
    hyper = pl.SCENARIO_HYPER[m.scenario]
    pose_hyper = pl.POSE_HYPER
    if eff["epochs"] is not None:
        hyper = replace(hyper, epochs=eff["epochs"])
        pose_hyper = replace(pose_hyper, epochs=eff["epochs"])
    chash = config_hash({"manifest": m.config, "seed": m.seed, "train": _hashable(eff),
                         "context": bundle.config_hash})
    present = sorted(set(labels))
    names = pl.class_names(m.scenario)
    absent = [names[i] for i in range(len(names)) if i not in present]
    if absent:
        hint = " or disable --one-class" if m.one_class else ""
        raise CommandError(f"no training frames for class(es): {', '.join(absent)}; "
                           f"simulate more sequences{hint}")
    try:
        loc, pose = pl.train_pipeline_localizers(m.scenario, [(ps, an) for _, ps, an in seqs],
                                                 hyper, eff["seed"], 1, chash, pose_hyper)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    with staged_dir(Path(eff["out"])) as tmp:
        loc.save(tmp / "localizer")
        if pose is not None:
            pose.save(tmp / "pose")
        pl.save_gen_params(tmp / "generation", gp)
        write_json(tmp / "info.json", {"scenario": m.scenario, "config_hash": chash,
                                       "context_hash": bundle.config_hash})
    print(json.dumps({"frames": len(flat), "config_hash": chash}))
    return {"model": Path(eff["out"])}


def load_models(context_path, localizer_path) -> pl.PipelineModels:
    for p in (context_path, localizer_path):
        if not Path(p).exists():
            raise CommandError(f"model not found: {p}")
    root = Path(localizer_path)
    bundle = ContextBundle.load(context_path)
    loc = LocalizerModel.load(root / "localizer")
    pose = LocalizerModel.load(root / "pose") if (root / "pose").exists() else None
    gp = pl.load_gen_params(root / "generation")
    return pl.PipelineModels(loc.scenario, bundle, loc, pose, gp)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _verdict_doc(entry, v: pl.AnomalyVerdict) -> dict:
    return {"id": entry.id, "label": int(v.label), "event": v.event,
            "frames": [{"label": int(f.label), "aggregated": int(f.aggregated),
                        "score": float(f.score), "pose": f.pose,
                        "probs": [float(x) for x in f.probs]} for f in v.frames]}


def cmd_run(args) -> dict:
    wall0 = time.perf_counter()
    eff = resolve(args, {"manifest": None, "context": None, "localizer": None,
                         "out": str(default_out("run")), "split": "test", "sequence": None,
                         "no_context": False, "maps": True, "workers": 1, "seed": 0})
    if not eff["manifest"] or not eff["context"] or not eff["localizer"]:
        raise CommandError("--manifest, --context and --localizer are required")
    show("run", eff)
    stage: dict = {}
    t0 = time.perf_counter()
    m = _read_manifest(eff["manifest"])
    models = load_models(eff["context"], eff["localizer"])
    if models.scenario != m.scenario or models.context.scenario != m.scenario:
        raise CommandError(f"models are for {models.scenario!r}, dataset is {m.scenario!r}")
    entries = _select(m, eff["split"], [eff["sequence"]] if eff["sequence"] else None)
    stage["load"] = 1e3 * (time.perf_counter() - t0)

    def one(entry):
        ts = time.perf_counter()
        sc, frames = pl.read_sequence(m, entry)
        read_ms = 1e3 * (time.perf_counter() - ts)
        v = pl.run_pipeline(frames, models, sc, use_context=not eff["no_context"],
                            with_maps=eff["maps"])
        v.timings["read"] = read_ms
        return v

    with ThreadPoolExecutor(max_workers=max(1, int(eff["workers"]))) as ex:
        verdicts = list(ex.map(one, entries))
    for v in verdicts:
        for k, ms in v.timings.items():
            stage[k] = stage.get(k, 0.0) + ms

    t0 = time.perf_counter()
    chash = config_hash({"models": models.localizer.config_hash, "run": _hashable(eff),
                         "manifest": m.config})
    docs = [_verdict_doc(e, v) for e, v in zip(entries, verdicts)]
    flagged = {d["id"] for d in docs
               if (d["event"] == "fall" if m.scenario == "fall" else d["label"] != 0)}
    clean = [e.id for e in entries if e.label == 0]
    metrics = {"sequences": len(docs), "flagged": len(flagged),
               "frames": sum(len(d["frames"]) for d in docs),
               "clean_sequences": len(clean),
               "false_positive_rate": (sum(i in flagged for i in clean) / len(clean)
                                       if clean else None)}
    out = Path(eff["out"])
    with staged_dir(out) as tmp:
        write_json(tmp / "verdicts.json", {"scenario": m.scenario, "config_hash": chash,
                                           "use_context": not eff["no_context"],
                                           "sequences": docs})
        if eff["maps"]:
            (tmp / "maps").mkdir()
            for e, v in zip(entries, verdicts):
                for i, f in enumerate(v.frames):
                    if f.label != 0 and f.anomaly_map is not None:
                        spectrum_to_image(f.anomaly_map, tmp / "maps" / f"{e.id}_{i:03d}.pgm")
        stage["write"] = 1e3 * (time.perf_counter() - t0)
        named = sum(stage.values())
        stage["other"] = max(0.0, 1e3 * (time.perf_counter() - wall0) - named)
        report = RunReport(m.scenario, metrics, {k: round(v, 3) for k, v in stage.items()},
                           chash, int(eff["seed"]))
        write_json(tmp / "report.json", report.to_dict())
    print(json.dumps({"report": str(out / "report.json"), "total_ms": report.total_ms,
                      "stage_ms": report.stage_ms, **metrics}, sort_keys=True))
    return {"report": report, "out": out}


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def evaluate_verdicts(vdoc: dict, manifest: DatasetManifest) -> dict:
    by_id = {e.id: e for e in manifest.sequences}
    scenario = manifest.scenario
    if vdoc["scenario"] != scenario:
        raise CommandError(f"verdicts are for {vdoc['scenario']!r}, dataset is {scenario!r}")
    unknown = [d["id"] for d in vdoc["sequences"] if d["id"] not in by_id]
    if unknown:
        raise CommandError(f"verdicts name sequences absent from the manifest: {unknown}")
    scores, fy, fpred, ftrue, spred, strue, ev, evt = [], [], [], [], [], [], [], []
    gaps = []
    for d in vdoc["sequences"]:
        e = by_id[d["id"]]
        _, frames = pl.read_sequence(manifest, e)
        if len(frames) != len(d["frames"]):
            gaps.append(f"{e.id}: {len(d['frames'])} of {len(frames)} frames")
            continue
        for fv, fr in zip(d["frames"], frames):
            scores.append(fv["score"])
            fy.append(int(fr.ground_truth.anomaly_class != 0))
            fpred.append(fv["label"])
            ftrue.append(fr.ground_truth.anomaly_class)
        spred.append(d["label"])
        strue.append(frames[0].ground_truth.anomaly_class if scenario == "fall" else e.label)
        if scenario == "fall":
            ev.append(d["event"])
            evt.append("fall" if e.label else "normal")
    if gaps:
        raise CommandError("verdicts do not cover the ground truth: " + "; ".join(gaps))
    n_cls = len(pl.class_names(scenario))
    table = (RegionCoordinateTable.body() if scenario == "through_cloth"
             else RegionCoordinateTable.floor())
    both = 0 < sum(fy) < len(fy)
    rep = {"scenario": scenario, "sequences": len(spred), "frames": len(fy),
           "auroc": auroc(scores, fy) if both else None,
           "average_precision": average_precision(scores, fy) if sum(fy) else None,
           "macro_f1": macro_f1(spred, strue, n_cls),
           "frame_macro_f1": macro_f1(fpred, ftrue, n_cls),
           "mle_m": _nan_to_none(mean_localization_error(spred, strue, table)),
           "frame_mle_m": _nan_to_none(mean_localization_error(fpred, ftrue, table))}
    if scenario == "fall":
        rep["event_counts"] = event_counts(ev, evt)
        rep["event_f1"] = event_f1(ev, evt)
    return rep


def _nan_to_none(x: float):
    return None if x != x else x


def cmd_evaluate(args) -> dict:
    eff = resolve(args, {"verdicts": None, "manifest": None,
                         "out": str(default_out("evaluation.json"))})
    if not eff["verdicts"] or not eff["manifest"]:
        raise CommandError("--verdicts and --manifest are required")
    show("evaluate", eff)
    vpath = Path(eff["verdicts"])
    if vpath.is_dir():
        vpath = vpath / "verdicts.json"
    if not vpath.exists():
        raise CommandError(f"verdicts not found: {vpath}")
    rep = evaluate_verdicts(json.loads(vpath.read_text(encoding="utf-8")),
                            _read_manifest(eff["manifest"]))
    with staged_file(Path(eff["out"])) as tmp:
        write_json(tmp, rep)
    print(json.dumps(rep, sort_keys=True))
    return rep


# ---------------------------------------------------------------------------
# render-map
# ---------------------------------------------------------------------------

def cmd_render_map(args) -> dict:
    eff = resolve(args, {"manifest": None, "sequence": None, "frame": 0, "kind": "spectrum",
                         "context": None, "localizer": None, "no_context": False,
                         "out": str(default_out("map.pgm"))})
    if not eff["manifest"] or not eff["sequence"]:
        raise CommandError("--manifest and --sequence are required")
    show("render-map", eff)
    m = _read_manifest(eff["manifest"])
    (entry,) = _select(m, "all", [eff["sequence"]])
    sc, frames = pl.read_sequence(m, entry)
    if not 0 <= eff["frame"] < len(frames):
        raise CommandError(f"frame {eff['frame']} outside 0..{len(frames) - 1}")
    fr = frames[eff["frame"]]
    kind = eff["kind"]
    if kind == "spectrum":
        img = compute_spectrum(fr.adc, sc.radar())
    else:
        if not eff["context"] or not eff["localizer"]:
            raise CommandError(f"--kind {kind} needs --context and --localizer")
        models = load_models(eff["context"], eff["localizer"])
        if kind == "expected":
            p = pl.process_frame(fr, sc, None if eff["no_context"] else models.context,
                                 models.gen_params)
            img = p.gen
        elif kind == "anomaly":
            v = pl.run_pipeline([fr], models, sc, use_context=not eff["no_context"])
            img = v.frames[0].anomaly_map
        else:
            raise CommandError(f"unknown map kind {kind!r}")
    with staged_file(Path(eff["out"])) as tmp:
        spectrum_to_image(img, tmp)
    print(json.dumps({"map": eff["out"], "kind": kind}))
    return {"map": Path(eff["out"])}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="radarctx", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="synthesize a paired RGBD + radar dataset")
    s.add_argument("--config", help="dataset config JSON")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--scenario", choices=("through_cloth", "through_wall", "fall"))
    s.add_argument("--n-sequences", type=int)
    s.add_argument("--train-fraction", type=float)
    s.add_argument("--one-class", action="store_true", default=None,
                   help="keep only anomaly-free sequences in the train split")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train-context", help="train the clothing / wall classifier")
    s.add_argument("--config")
    s.add_argument("--manifest")
    s.add_argument("--out")
    s.add_argument("--epochs", type=int)
    s.add_argument("--step", type=float)
    s.add_argument("--frame-stride", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train_context)

    s = sub.add_parser("train-localizer", help="fit generation priors and train the localizer")
    s.add_argument("--config")
    s.add_argument("--manifest")
    s.add_argument("--context", help="context model directory")
    s.add_argument("--out")
    s.add_argument("--frame-stride", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train_localizer)

    s = sub.add_parser("run", help="run the pipeline over a dataset split")
    s.add_argument("--config")
    s.add_argument("--manifest")
    s.add_argument("--context")
    s.add_argument("--localizer")
    s.add_argument("--out")
    s.add_argument("--split", choices=("train", "test", "all"))
    s.add_argument("--sequence", help="run a single sequence id")
    s.add_argument("--no-context", action="store_true", default=None,
                   help="ablation: scenario-default material parameters instead of the classifier")
    s.add_argument("--no-maps", dest="maps", action="store_false", default=None)
    s.add_argument("--workers", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("evaluate", help="score verdicts against ground truth")
    s.add_argument("--config")
    s.add_argument("--verdicts")
    s.add_argument("--manifest")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render-map", help="write a spectrum, expected spectrum or anomaly map as PGM")
    s.add_argument("--config")
    s.add_argument("--manifest")
    s.add_argument("--sequence")
    s.add_argument("--frame", type=int)
    s.add_argument("--kind", choices=("spectrum", "expected", "anomaly"))
    s.add_argument("--context")
    s.add_argument("--localizer")
    s.add_argument("--no-context", action="store_true", default=None)
    s.add_argument("--out")
    s.set_defaults(func=cmd_render_map)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CommandError, ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
