"""Tensor container, frame records, manifests and image export."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MMAT"


class TensorFormatError(ValueError):
    """Header is not a valid tensor container."""


class TensorTruncationError(ValueError):
    """Payload length disagrees with the header dims."""


def tensor_bytes(t) -> bytes:
    a = np.ascontiguousarray(t, dtype="<f4")
    if a.ndim < 1 or a.ndim > 255 or any(d <= 0 for d in a.shape):
        raise ValueError(f"tensor dims must be positive, got {a.shape}")
    header = MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 5 or buf[:4] != MAGIC:
        raise TensorFormatError("bad magic; not a tensor container")
    rank = buf[4]
    if rank == 0:
        raise TensorFormatError("rank must be >= 1")
    end = 5 + 4 * rank
    if len(buf) < end:
        raise TensorTruncationError("header truncated")
    dims = struct.unpack(f"<{rank}I", buf[5:end])
    if any(d == 0 for d in dims):
        raise TensorFormatError(f"zero-sized dim in {dims}")
    n = int(np.prod(dims, dtype=np.int64))
    if len(buf) - end != 4 * n:
        raise TensorTruncationError(f"payload has {len(buf) - end} bytes, expected {4 * n}")
    return np.frombuffer(buf, dtype="<f4", offset=end).reshape(dims).astype(np.float32)


def tensor_write(t, path) -> None:
    Path(path).write_bytes(tensor_bytes(t))


def tensor_read(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def complex_to_interleaved(z: np.ndarray) -> np.ndarray:
    """(..., n) complex -> (..., n, 2) float32 (re, im)."""
    return np.stack([z.real, z.imag], axis=-1).astype(np.float32)


def interleaved_to_complex(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    return a[..., 0].astype(np.float64) + 1j * a[..., 1].astype(np.float64)


def spectrum_to_image(s, path) -> None:
    """Write a 2-D grid as an 8-bit binary PGM, min-max scaled (row = range bin)."""
    a = np.asarray(s, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("expected a 2-D grid")
    lo, hi = a.min(), a.max()
    if hi > lo:
        img = np.round(255.0 * (a - lo) / (hi - lo)).astype(np.uint8)
    else:
        img = np.zeros(a.shape, dtype=np.uint8)
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise TensorFormatError("not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


@dataclass(frozen=True)
class AnnotationRecord:
    anomaly_class: int
    pose: str
    location_bin: int | None
    scenario: str


@dataclass
class FrameRecord:
    """One synchronized RGB / depth / radar capture."""

    timestamp_index: int
    rgb: np.ndarray          # H x W x 3 in [0, 1]
    depth: np.ndarray        # H x W meters, 0 = invalid
    adc: np.ndarray          # antennas x samples, complex
    ground_truth: AnnotationRecord

    def __post_init__(self):
        if self.rgb.shape[:2] != self.depth.shape:
            raise ValueError("rgb and depth must share H x W")


@dataclass
class SequenceEntry:
    id: str
    frame_count: int
    fps: float
    split: str
    label: int
    files: dict
    context: dict = field(default_factory=dict)
    seed: int = 0


@dataclass
class DatasetManifest:
    scenario: str
    seed: int
    one_class: bool
    sequences: list
    config: dict = field(default_factory=dict)
    root: str = "."

    def split(self, tag: str) -> list:
        return [s for s in self.sequences if s.split == tag]

    def validate(self) -> None:
        root = Path(self.root)
        for s in self.sequences:
            if s.split not in ("train", "test"):
                raise ValueError(f"sequence {s.id}: bad split tag {s.split!r}")
            for name in s.files.values():
                if not (root / name).exists():
                    raise FileNotFoundError(f"sequence {s.id}: missing {name}")
        if self.one_class:
            bad = [s.id for s in self.split("train") if s.label != 0]
            if bad:
                raise ValueError(f"one-class manifest has anomalous train sequences: {bad}")

    def to_json(self) -> str:
        doc = {"scenario": self.scenario, "seed": self.seed, "one_class": self.one_class,
               "config": self.config, "sequences": [asdict(s) for s in self.sequences]}
        return json.dumps(doc, indent=2, sort_keys=True)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        seqs = [SequenceEntry(**s) for s in doc["sequences"]]
        return cls(scenario=doc["scenario"], seed=doc["seed"], one_class=doc["one_class"],
                   sequences=seqs, config=doc.get("config", {}), root=str(path.parent))


def save_bundle(path, header: dict, tensors: dict) -> None:
    """Model on disk: ``path/header.json`` plus one tensor container per array."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = sorted(tensors)
    doc = dict(header, tensors=names)
    (path / "header.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    for name in names:
        tensor_write(tensors[name], path / f"{name}.mmat")


def load_bundle(path) -> tuple[dict, dict]:
    path = Path(path)
    header = json.loads((path / "header.json").read_text(encoding="utf-8"))
    tensors = {name: tensor_read(path / f"{name}.mmat") for name in header.get("tensors", [])}
    return header, tensors
