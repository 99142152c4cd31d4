"""Benchmark the three scenarios end to end through the CLI and print a summary table.

Usage: python3 scripts/run_scenarios.py [--work DIR] [--scale 1.0] [--seed 2024]
"""

import argparse
import json
import tempfile
import time
from pathlib import Path

from radarctx.cli import main

SIZES = {"through_cloth": 200, "through_wall": 120, "fall": 80}


def run(*args):
    if main([str(a) for a in args]) != 0:
        raise SystemExit(f"command failed: {' '.join(map(str, args))}")


def benchmark(scenario: str, n: int, seed: int, root: Path) -> dict:
    t0 = time.perf_counter()
    run("simulate", "--scenario", scenario, "--n-sequences", n, "--seed", seed, "--out", root / "data")
    run("train-context", "--manifest", root / "data", "--out", root / "ctx")
    run("train-localizer", "--manifest", root / "data", "--context", root / "ctx", "--out", root / "loc")
    run("run", "--manifest", root / "data", "--context", root / "ctx", "--localizer", root / "loc",
        "--no-maps", "--out", root / "run")
    run("evaluate", "--verdicts", root / "run", "--manifest", root / "data", "--out", root / "eval.json")
    rep = json.loads((root / "eval.json").read_text())
    rep["runtime_s"] = time.perf_counter() - t0
    return rep


def main_():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", type=Path, default=None, help="keep artifacts here (default: temp dir)")
    ap.add_argument("--scale", type=float, default=1.0, help="multiply dataset sizes")
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--scenarios", nargs="*", default=list(SIZES))
    a = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        work = a.work or Path(tmp)
        rows = {}
        for i, sc in enumerate(a.scenarios):
            n = max(7, round(SIZES[sc] * a.scale))
            rows[sc] = benchmark(sc, n, a.seed + i, work / sc)
    print(f"\n{'scenario':<15}{'seqs':>6}{'F1':>8}{'MLE[m]':>9}{'AUROC':>8}{'AP':>7}{'evF1':>7}{'time[s]':>9}")
    for sc, r in rows.items():
        cells = [fmt(r.get(k)) for k in ("macro_f1", "mle_m", "auroc", "average_precision", "event_f1")]
        print(f"{sc:<15}{r['sequences']:>6}" + "".join(f"{c:>{w}}" for c, w in zip(cells, (8, 9, 8, 7, 7)))
              + f"{r['runtime_s']:>9.0f}")


def fmt(v):
    return "-" if v is None else f"{v:.3f}"


if __name__ == "__main__":
    main_()
