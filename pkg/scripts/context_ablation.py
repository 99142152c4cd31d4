"""Compare anomaly scoring with and without the context-conditioned generator.

Builds a clothing-varied through-cloth set, trains once, then runs the pipeline twice
(with the classifier's context, and with default context) and reports frame AUROC, AP and
the Frechet distance between expected and observed spectra on anomaly-free test frames.

Usage: python3 scripts/context_ablation.py [--n-sequences 36] [--seed 123] [--stride 4]
"""

import argparse
import json
import tempfile
from pathlib import Path

from radarctx import pipeline as pl
from radarctx.cli import _read_manifest, load_models, main
from radarctx.generator import spectrum_features
from radarctx.metrics import gaussian_frechet


def run(*args):
    if main([str(a) for a in args]) != 0:
        raise SystemExit(f"command failed: {args[0]}")


def frechet_pair(root: Path, stride: int):
    m = _read_manifest(root / "data")
    models = load_models(root / "ctx", root / "loc")
    real, with_ctx, without = [], [], []
    for e in m.split("test"):
        if e.label != 0:
            continue
        sc, frames = pl.read_sequence(m, e)
        for fr in frames[::stride]:
            a = pl.process_frame(fr, sc, models.context, models.gen_params)
            b = pl.process_frame(fr, sc, None, models.gen_params)
            real.append(spectrum_features(a.real))
            with_ctx.append(spectrum_features(a.gen))
            without.append(spectrum_features(b.gen))
    return gaussian_frechet(with_ctx, real), gaussian_frechet(without, real)


def main_():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-sequences", type=int, default=36)
    ap.add_argument("--anomaly-fraction", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=123)
    ap.add_argument("--stride", type=int, default=4, help="frame stride for the Frechet features")
    a = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        cfg = root / "cfg.json"
        cfg.write_text(json.dumps({"scenario": "through_cloth", "n_sequences": a.n_sequences,
                                   "anomaly_fraction": a.anomaly_fraction}))
        run("simulate", "--config", cfg, "--seed", a.seed, "--out", root / "data")
        run("train-context", "--manifest", root / "data", "--out", root / "ctx")
        run("train-localizer", "--manifest", root / "data", "--context", root / "ctx", "--out", root / "loc")
        out = {}
        for tag, extra in (("context", []), ("no_context", ["--no-context"])):
            run("run", "--manifest", root / "data", "--context", root / "ctx", "--localizer", root / "loc",
                "--no-maps", "--out", root / tag, *extra)
            run("evaluate", "--verdicts", root / tag, "--manifest", root / "data",
                "--out", root / f"{tag}.json")
            out[tag] = json.loads((root / f"{tag}.json").read_text())
        fd = frechet_pair(root, a.stride)
    print(f"\n{'variant':<12}{'AUROC':>8}{'AP':>8}{'Frechet':>12}")
    for (tag, r), f in zip(out.items(), fd):
        print(f"{tag:<12}{r['auroc']:>8.3f}{r['average_precision']:>8.3f}{f:>12.3e}")
    print(f"AUROC gain from context: {out['context']['auroc'] - out['no_context']['auroc']:+.3f}")


if __name__ == "__main__":
    main_()
