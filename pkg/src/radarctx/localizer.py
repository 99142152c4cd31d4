"""Dual-branch patch encoding, fused classification, voting and anomaly maps."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .context import batch_cross_entropy, softmax
from .data_model import load_bundle, save_bundle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LocalizerHyper:
    patch: int = 8
    dim: int = 16
    lambda_mse: float = 0.1
    lambda_ce: float = 1.0
    window: int = 5
    epochs: int = 400
    lr: float = 0.01
    weight_decay: float = 1e-4
    anchor_bin: int | None = None   # range-registration target row; None = no registration
    register_on: str = "projection"  # projection: nearest occupied row; residual: strongest real - gen cell
    normalize: bool = False          # divide both spectra by the residual peak
    residual_margin: int = -1        # with >= 0, skip rows up to this far past the nearest seen surface
    crop: int | None = None          # keep only a +-crop window around the registered reference
    mask_near: int = -1              # with >= 0, zero rows up to this far past the nearest seen surface
    highlight_radius: int = 3
    highlight_gain: float = 2.0


@dataclass
class BranchEncoder:
    E: np.ndarray   # D x P^2


@dataclass
class LocalizerModel:
    real: BranchEncoder
    gen: BranchEncoder
    head: np.ndarray              # C x (2D + 1)
    patch: int
    class_names: list
    hyper: LocalizerHyper = field(default_factory=LocalizerHyper)
    scenario: str = ""
    kind: str = "anomaly"         # anomaly | pose
    config_hash: str = ""

    @property
    def n_classes(self) -> int:
        return self.head.shape[0]

    @property
    def dim(self) -> int:
        return self.real.E.shape[0]

    def save(self, path) -> None:
        header = {"type": "localizer", "patch": self.patch, "dim": self.dim,
                  "classes": self.class_names, "hyper": asdict(self.hyper),
                  "scenario": self.scenario, "kind": self.kind, "config_hash": self.config_hash}
        save_bundle(path, header, {"E_real": self.real.E, "E_gen": self.gen.E, "head": self.head})

    @classmethod
    def load(cls, path) -> "LocalizerModel":
        header, t = load_bundle(path)
        if header.get("type") != "localizer":
            raise ValueError(f"{path} is not a localizer model")
        return cls(BranchEncoder(t["E_real"].astype(float)), BranchEncoder(t["E_gen"].astype(float)),
                   t["head"].astype(float), header["patch"], header["classes"],
                   LocalizerHyper(**header["hyper"]), header["scenario"], header["kind"],
                   header.get("config_hash", ""))


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

@dataclass
class PatchGrid:
    patch: int
    patches: np.ndarray       # n x P*P, row-major tile order
    centers: np.ndarray       # n x 2 (range_bin_center, az_bin_center)
    shape: tuple              # padded grid shape


def patchify(s, P: int) -> PatchGrid:
    s = np.asarray(s, dtype=float)
    h, w = s.shape
    H, W = -(-h // P) * P, -(-w // P) * P
    if (H, W) != (h, w):
        s = np.pad(s, ((0, H - h), (0, W - w)))
    tiles = s.reshape(H // P, P, W // P, P).transpose(0, 2, 1, 3).reshape(-1, P * P)
    rr, cc = np.meshgrid(np.arange(H // P), np.arange(W // P), indexing="ij")
    centers = np.stack([rr.ravel() * P + (P - 1) / 2, cc.ravel() * P + (P - 1) / 2], axis=1)
    return PatchGrid(P, tiles, centers, (H, W))


def mean_patch(s, P: int) -> np.ndarray:
    return patchify(s, P).patches.mean(axis=0)


def encode_branch(s, enc: BranchEncoder, P: int):
    """Patch embeddings ``E @ patch`` and their mean as the branch summary."""
    s = np.asarray(s, dtype=float)
    if not np.all(np.isfinite(s)):
        raise ValueError("spectrum contains non-finite values")
    if enc.E.shape[1] != P * P:
        raise ValueError(f"encoder expects {enc.E.shape[1]} inputs, patch has {P * P}")
    emb = patchify(s, P).patches @ enc.E.T
    return emb, emb.mean(axis=0)


def fuse_classify(cls_real, cls_gen, m: LocalizerModel) -> np.ndarray:
    cls_real = np.asarray(cls_real, dtype=float)
    cls_gen = np.asarray(cls_gen, dtype=float)
    if cls_real.shape != (m.dim,) or cls_gen.shape != (m.dim,):
        raise ValueError("summary vectors do not match model dim")
    return softmax(m.head @ np.concatenate([cls_real, cls_gen, [1.0]]))


def residual_mse(cls_gen, cls_real) -> float:
    a = np.asarray(cls_gen, dtype=float)
    b = np.asarray(cls_real, dtype=float)
    if a.shape != b.shape:
        raise ValueError("dimension mismatch")
    return float(np.mean((a - b) ** 2))


def _residual_peak(real, gen, proj_grid, margin: int):
    """Row, column and value of the largest real-over-expected excess.

    Rows up to ``margin`` past the nearest occupied projection row are skipped,
    so a modelled wall echo cannot win over what lies behind it.
    """
    res = np.asarray(real, dtype=float) - np.asarray(gen, dtype=float)
    rows = np.flatnonzero(np.asarray(proj_grid).any(axis=1))
    start = int(rows[0]) + margin + 1 if rows.size and margin >= 0 else 0
    if start >= res.shape[0]:
        start = 0
    ref, col = np.unravel_index(int(np.argmax(res[start:])), res[start:].shape)
    return int(ref) + start, int(col), float(res[ref + start, col])


def register(real, gen, proj_grid, anchor_bin: int | None, on: str = "projection",
             margin: int = -1):
    """Roll both spectra along range so a reference row lands on ``anchor_bin``.

    The reference is the nearest visually occupied row of the projection, or
    with ``on="residual"`` the cell holding the largest excess of the real
    spectrum over the expected one (what the camera could not explain); that
    cell is also rolled to the boresight column. ``margin`` >= 0 restricts the
    residual search to rows beyond the nearest occupied row plus ``margin``.
    """
    if anchor_bin is None:
        return real, gen, 0
    if on == "residual":
        ref, col, _ = _residual_peak(real, gen, proj_grid, margin)
        shift = int(anchor_bin - ref)
        cs = int(np.shape(real)[1] // 2 - col)
        return (np.roll(np.roll(real, shift, axis=0), cs, axis=1),
                np.roll(np.roll(gen, shift, axis=0), cs, axis=1), shift)
    elif on == "projection":
        rows = np.flatnonzero(np.asarray(proj_grid).any(axis=1))
        if rows.size == 0:
            return real, gen, 0
        ref = int(rows[0])
    else:
        raise ValueError(f"unknown registration reference {on!r}")
    shift = int(anchor_bin - ref)
    return np.roll(real, shift, axis=0), np.roll(gen, shift, axis=0), shift


def prepare_inputs(real, gen, proj_grid, hyper: LocalizerHyper):
    """Near-field masking, registration and optional residual-peak normalisation before encoding."""
    if hyper.mask_near >= 0:
        rows = np.flatnonzero(np.asarray(proj_grid).any(axis=1))
        if rows.size:
            keep = np.arange(np.shape(real)[0]) > rows[0] + hyper.mask_near
            real, gen = real * keep[:, None], gen * keep[:, None]
    if hyper.normalize:
        peak = _residual_peak(real, gen, proj_grid, hyper.residual_margin)[2]
    real, gen, _ = register(real, gen, proj_grid, hyper.anchor_bin, hyper.register_on,
                            hyper.residual_margin)
    if hyper.normalize and peak > 0:
        real, gen = real / peak, gen / peak
    if hyper.crop is not None and hyper.anchor_bin is not None:
        a, c, mid = hyper.anchor_bin, hyper.crop, np.shape(real)[1] // 2
        mask = np.zeros(np.shape(real))
        mask[max(a - c, 0):a + c, max(mid - c, 0):mid + c] = 1.0
        real, gen = real * mask, gen * mask
    return real, gen


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def localizer_loss_and_grads(Er, Eg, H, Mr, Mg, y, lambda_ce: float, lambda_mse: float,
                             normal_class: int | None = 0):
    """Mean over the batch of lambda_ce * CE + lambda_mse * [y == normal] * MSE(u_gen, u_real).

    ``Mr``/``Mg`` are per-sample mean patches (N x P^2); summaries are
    ``u = E @ m`` because the patch embedding is linear.
    """
    N = len(y)
    D = Er.shape[0]
    ur = Mr @ Er.T
    ug = Mg @ Eg.T
    Z = np.concatenate([ur, ug, np.ones((N, 1))], axis=1)
    logits = Z @ H.T
    ce = batch_cross_entropy(logits, y)
    mask = (y == normal_class).astype(float) if normal_class is not None else np.zeros(N)
    diff = ug - ur
    mse_i = np.mean(diff ** 2, axis=1)
    loss = float(np.mean(lambda_ce * ce + lambda_mse * mask * mse_i))
    gz = softmax(logits, axis=1)
    gz[np.arange(N), y] -= 1.0
    gz *= lambda_ce / N
    dH = gz.T @ Z
    coef = (lambda_mse * mask * 2.0 / (D * N))[:, None]
    gur = gz @ H[:, :D] - coef * diff
    gug = gz @ H[:, D:2 * D] + coef * diff
    return loss, gur.T @ Mr, gug.T @ Mg, dH


class _Adam:
    def __init__(self, shapes, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def pooled_inputs(real, gen, P: int):
    """Stack per-sample mean patches for arrays of spectra shaped N x R x A."""
    real = np.asarray(real)
    gen = np.asarray(gen)
    Mr = np.stack([mean_patch(s, P) for s in real])
    Mg = np.stack([mean_patch(s, P) for s in gen])
    return Mr, Mg


def train_localizer(real, gen, labels, class_names, hyper: LocalizerHyper = LocalizerHyper(),
                    seed: int = 0, scenario: str = "", kind: str = "anomaly",
                    pooled: bool = False) -> LocalizerModel:
    """Train both branch encoders and the fusion head with Adam on the full batch.

    ``real``/``gen`` are N x R x A spectra (or N x P^2 mean patches when
    ``pooled``). Inputs are rescaled to unit RMS for conditioning and the
    scale is folded back into the encoders, so the returned model acts on raw
    spectra.
    """
    y = np.asarray(labels, dtype=int)
    C = len(class_names)
    counts = np.bincount(y, minlength=C)
    missing = [class_names[i] for i in range(C) if counts[i] == 0]
    if missing:
        raise ValueError(f"no training frames for class(es): {', '.join(missing)}")
    P, D = hyper.patch, hyper.dim
    Mr, Mg = (np.asarray(real, float), np.asarray(gen, float)) if pooled else pooled_inputs(real, gen, P)
    sr = float(np.sqrt(np.mean(Mr ** 2))) or 1.0
    sg = float(np.sqrt(np.mean(Mg ** 2))) or 1.0
    Mr, Mg = Mr / sr, Mg / sg
    rng = np.random.default_rng(seed)
    Er = rng.normal(0.0, 1.0 / np.sqrt(P * P), (D, P * P))
    Eg = rng.normal(0.0, 1.0 / np.sqrt(P * P), (D, P * P))
    H = rng.normal(0.0, 0.01, (C, 2 * D + 1))
    normal = 0 if kind == "anomaly" else None
    opt = _Adam([Er.shape, Eg.shape, H.shape], hyper.lr)
    for epoch in range(hyper.epochs):
        loss, gEr, gEg, gH = localizer_loss_and_grads(Er, Eg, H, Mr, Mg, y, hyper.lambda_ce,
                                                      hyper.lambda_mse, normal)
        if not np.isfinite(loss):
            raise FloatingPointError(f"localizer loss became {loss} at epoch {epoch}")
        if hyper.weight_decay:
            gEr = gEr + hyper.weight_decay * Er
            gEg = gEg + hyper.weight_decay * Eg
            gH = gH + hyper.weight_decay * H
        opt.step([Er, Eg, H], [gEr, gEg, gH])
    f32 = lambda a: a.astype(np.float32).astype(np.float64)  # noqa: E731
    return LocalizerModel(BranchEncoder(f32(Er / sr)), BranchEncoder(f32(Eg / sg)), f32(H), P,
                          list(class_names), hyper, scenario, kind)


def predict_pooled(m: LocalizerModel, Mr, Mg) -> np.ndarray:
    """Class probabilities for stacked mean patches (N x P^2 each)."""
    Z = np.concatenate([np.asarray(Mr) @ m.real.E.T, np.asarray(Mg) @ m.gen.E.T,
                        np.ones((len(Mr), 1))], axis=1)
    return softmax(Z @ m.head.T, axis=1)


def predict(m: LocalizerModel, real, gen) -> np.ndarray:
    _, cr = encode_branch(real, m.real, m.patch)
    _, cg = encode_branch(gen, m.gen, m.patch)
    return fuse_classify(cr, cg, m)


# ---------------------------------------------------------------------------
# aggregation + maps
# ---------------------------------------------------------------------------

def majority_vote(labels, window: int) -> int:
    """Mode of the last ``window`` labels; ties go to the most recent tied label."""
    labels = list(labels)
    if not labels:
        raise ValueError("cannot vote on an empty sequence")
    if window < 1:
        raise ValueError("window must be >= 1")
    recent = labels[-window:]
    counts = Counter(recent)
    best = max(counts.values())
    for lab in reversed(recent):
        if counts[lab] == best:
            return lab
    raise AssertionError("unreachable")


def rolling_vote(labels, window: int) -> list:
    return [majority_vote(labels[: i + 1], window) for i in range(len(labels))]


def anomaly_map(real, gen, m: LocalizerModel, predicted: int, footprint=None) -> np.ndarray:
    """Per-patch embedding residual broadcast over bins, max-normalised.

    For a non-zero ``predicted`` class with a ``footprint`` (range, az) bin
    centre, patches touching the disc of ``highlight_radius`` bins get the
    highlight gain before re-normalising.
    """
    real = np.asarray(real, dtype=float)
    gen = np.asarray(gen, dtype=float)
    if real.shape != gen.shape:
        raise ValueError("grid mismatch")
    P = m.patch
    er, _ = encode_branch(real, m.real, P)
    eg, _ = encode_branch(gen, m.gen, P)
    score = np.sum((er - eg) ** 2, axis=1)
    grid = patchify(real, P)
    H, W = grid.shape
    nr, nc = H // P, W // P
    tile = score.reshape(nr, nc)
    if tile.max() <= 0:
        return np.zeros(real.shape, dtype=np.float32)
    tile = tile / tile.max()
    if predicted != 0 and footprint is not None:
        r0, c0 = footprint
        rad = m.hyper.highlight_radius
        # nearest bin of each tile to the footprint centre
        rr = np.clip(r0, np.arange(nr) * P, np.arange(nr) * P + P - 1)
        cc = np.clip(c0, np.arange(nc) * P, np.arange(nc) * P + P - 1)
        near = (rr[:, None] - r0) ** 2 + (cc[None, :] - c0) ** 2 <= rad ** 2
        tile = np.where(near, tile * m.hyper.highlight_gain, tile)
        tile = tile / tile.max()
    full = np.repeat(np.repeat(tile, P, axis=0), P, axis=1)
    return full[: real.shape[0], : real.shape[1]].astype(np.float32)
