"""Fall detection from pose / location time series."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

ABSENT = "absent"


@dataclass(frozen=True)
class TrackSeries:
    poses: tuple                 # per-frame pose labels
    locations: tuple             # per-frame range bin, None when absent / invalid
    fps: float = 2.0

    def __post_init__(self):
        if len(self.poses) < 1:
            raise ValueError("track series must have at least one frame")
        if len(self.poses) != len(self.locations):
            raise ValueError("pose and location series differ in length")


@dataclass(frozen=True)
class FallParams:
    entropy_threshold: float = 0.05   # bits
    persistence: int = 3              # frames of absence after presence
    jump: int = 5                     # range bins between adjacent present frames

    def __post_init__(self):
        if self.entropy_threshold < 0:
            raise ValueError("entropy threshold must be >= 0")
        if self.persistence < 1:
            raise ValueError("persistence must be >= 1")


def shannon_entropy(series) -> float:
    """Entropy in bits of the empirical symbol distribution."""
    series = list(series)
    if not series:
        raise ValueError("entropy of an empty series")
    p = np.array(list(Counter(series).values()), dtype=float) / len(series)
    return float(-(p * np.log2(p)).sum())


def _present(pose, loc) -> bool:
    return pose != ABSENT and loc is not None


def transition_fires(poses) -> bool:
    return any(a == "standing" and b in ("sitting", "lying") for a, b in zip(poses, poses[1:]))


def disappearance_fires(poses, locations, k: int) -> bool:
    seen = False
    run = 0
    for p, loc in zip(poses, locations):
        if _present(p, loc):
            seen = True
            run = 0
        elif seen:
            run += 1
            if run >= k:
                return True
    return False


def jump_fires(poses, locations, jump: int) -> bool:
    prev = None
    for p, loc in zip(poses, locations):
        here = loc if _present(p, loc) else None
        if here is not None and prev is not None and abs(here - prev) >= jump:
            return True
        prev = here
    return False


def rule_fires(ts: TrackSeries, fp: FallParams) -> bool:
    return (transition_fires(ts.poses)
            or disappearance_fires(ts.poses, ts.locations, fp.persistence)
            or jump_fires(ts.poses, ts.locations, fp.jump))


def detect_fall(ts: TrackSeries, fp: FallParams = FallParams()) -> str:
    """'fall' when the transition / disappearance / jump rule fires and either series varies.

    The entropy gate only rejects series whose pose and location entropies
    are both below the threshold; at threshold 0 it never rejects.
    """
    if not rule_fires(ts, fp):
        return "normal"
    locs = ["none" if loc is None else loc for loc in ts.locations]
    gate = (shannon_entropy(ts.poses) >= fp.entropy_threshold
            or shannon_entropy(locs) >= fp.entropy_threshold)
    return "fall" if gate else "normal"
