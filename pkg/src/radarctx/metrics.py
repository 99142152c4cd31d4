"""Detection, classification, localization and distribution metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import BODY_REGIONS, WALL_POSITIONS


def _rank_average(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC from rank sums; ties count one half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both positive and negative labels")
    r = _rank_average(s)
    u = r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.lexsort((np.arange(len(s)), -s))   # descending score, then index
    hits = np.cumsum(y[order] == 1)
    ranks = np.arange(1, len(s) + 1)
    pos = y[order] == 1
    return float(np.sum(hits[pos] / ranks[pos]) / n_pos)


def confusion(pred, true, n_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=int)
    true = np.asarray(true, dtype=int)
    if pred.shape != true.shape:
        raise ValueError("pred and true differ in length")
    m = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(m, (true, pred), 1)
    return m


def macro_f1(pred, true, n_classes: int) -> float:
    m = confusion(pred, true, n_classes)
    tp = np.diag(m).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(m.sum(0) > 0, tp / m.sum(0), 0.0)
        rec = np.where(m.sum(1) > 0, tp / m.sum(1), 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    return float(f1.mean())


@dataclass(frozen=True)
class RegionCoordinateTable:
    coords: dict                        # class id -> (x, y) meters
    null_point: tuple = (0.0, 0.0)

    def __post_init__(self):
        for k, v in self.coords.items():
            if k == 0:
                raise ValueError("class 0 has no coordinate")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite coordinate for class {k}")

    def lookup(self, cls: int) -> np.ndarray:
        if cls == 0:
            return np.asarray(self.null_point, dtype=float)
        if cls not in self.coords:
            raise KeyError(f"class {cls} missing from coordinate table")
        return np.asarray(self.coords[cls], dtype=float)

    @classmethod
    def body(cls) -> "RegionCoordinateTable":
        """(lateral, height) on the body plane."""
        return cls({i + 1: (lat, h) for i, (_, lat, h) in enumerate(BODY_REGIONS)})

    @classmethod
    def floor(cls, positions=WALL_POSITIONS) -> "RegionCoordinateTable":
        return cls({i + 1: tuple(p) for i, p in enumerate(positions)})


def mean_localization_error(pred, true, table: RegionCoordinateTable) -> float:
    """Mean table distance over items whose true class is non-zero (nan when none)."""
    pred = np.asarray(pred, dtype=int)
    true = np.asarray(true, dtype=int)
    if pred.shape != true.shape:
        raise ValueError("pred and true differ in length")
    d = [np.linalg.norm(table.lookup(p) - table.lookup(t)) for p, t in zip(pred, true) if t != 0]
    return float(np.mean(d)) if d else float("nan")


def gaussian_frechet(feats_a, feats_b) -> float:
    """Frechet distance between diagonal-covariance Gaussian fits (sample variance, ddof=1)."""
    a = np.atleast_2d(np.asarray(feats_a, dtype=float))
    b = np.atleast_2d(np.asarray(feats_b, dtype=float))
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two samples per set")
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature dims differ")
    va = a.var(axis=0, ddof=1)
    vb = b.var(axis=0, ddof=1)
    d = np.sum((a.mean(0) - b.mean(0)) ** 2) + np.sum(va + vb - 2.0 * np.sqrt(va * vb))
    return float(max(d, 0.0))


def event_counts(pred, true) -> dict:
    """Confusion counts for binary fall / normal events."""
    pred = [p == "fall" for p in pred]
    true = [t == "fall" for t in true]
    return {"tp": sum(p and t for p, t in zip(pred, true)),
            "fp": sum(p and not t for p, t in zip(pred, true)),
            "fn": sum(t and not p for p, t in zip(pred, true)),
            "tn": sum(not p and not t for p, t in zip(pred, true))}


def event_f1(pred, true) -> float:
    c = event_counts(pred, true)
    denom = 2 * c["tp"] + c["fp"] + c["fn"]
    return 1.0 if denom == 0 else 2 * c["tp"] / denom
