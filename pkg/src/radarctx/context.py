"""Scene-context classification from RGB and conditioning-prompt construction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_model import load_bundle, save_bundle
from .scene import material_tables, wall_material

GRID_ROWS, GRID_COLS = 6, 8
HUE_BINS = 16
FEATURE_DIM = GRID_ROWS * GRID_COLS + HUE_BINS

CLOTH_TEMPLATE = ("A person is wearing {phrase}, which {effect}. The person is walking toward "
                  "the radar in an environment where {env_effect}. Generate the expected radar "
                  "spectrum assuming no anomalies.")
WALL_TEMPLATE = ("The radar is directed at a {phrase}, which {effect}. There is no human or "
                 "object present behind the wall. Generate the expected radar spectrum for this "
                 "blank scene.")


# ---------------------------------------------------------------------------
# softmax regression
# ---------------------------------------------------------------------------

def softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def cross_entropy(z, c: int) -> float:
    """log(sum_j exp(z_j)) - z_c, computed with max subtraction."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("logits must be a non-empty vector")
    if not 0 <= c < z.size:
        raise ValueError(f"class index {c} out of range for {z.size} logits")
    return float(logsumexp(z) - z[c])


def cross_entropy_grad(z, c: int) -> np.ndarray:
    g = softmax(z)
    g[c] -= 1.0
    return g


def batch_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return logsumexp(logits, axis=1) - logits[np.arange(len(labels)), labels]


def argmax_lowest(p: np.ndarray) -> int:
    """Argmax with ties resolved to the lowest index (np.argmax already does this)."""
    return int(np.argmax(p))


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def _hue(rgb: np.ndarray):
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    chroma = mx - mn
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    safe = np.where(chroma > 0, chroma, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6,
                 np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4))
    sat = np.where(mx > 0, chroma / np.where(mx > 0, mx, 1.0), 0.0)
    return h / 6.0, sat, mx


def extract_features(rgb) -> np.ndarray:
    """6x8 grid of grayscale block means followed by a 16-bin hue histogram.

    Only pixels with saturation > 0.15 and value > 0.02 vote in the histogram.
    It is normalised to sum 1 when any pixel votes and then square-rooted, so
    a small garment region still moves the features against a saturated
    background.
    """
    rgb = np.asarray(rgb, dtype=float)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an H x W x 3 image")
    h, w, _ = rgb.shape
    if h < 8 or w < 8:
        raise ValueError(f"image {h}x{w} too small; need at least 8x8")
    gray = rgb @ np.array([0.299, 0.587, 0.114])
    rows = np.array_split(np.arange(h), GRID_ROWS)
    cols = np.array_split(np.arange(w), GRID_COLS)
    blocks = np.array([[gray[np.ix_(r, c)].mean() for c in cols] for r in rows]).ravel()
    hue, sat, val = _hue(rgb)
    valid = (sat > 0.15) & (val > 0.02)
    hist = np.bincount(np.minimum((hue[valid] * HUE_BINS).astype(int), HUE_BINS - 1),
                       minlength=HUE_BINS).astype(float)
    if hist.sum() > 0:
        hist = np.sqrt(hist / hist.sum())
    return np.concatenate([blocks, hist])


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

@dataclass
class ContextModel:
    weights: np.ndarray          # C x (F + 1), bias in the last column
    class_names: list
    scenario: str = ""
    kind: str = ""               # clothing | environment | wall
    history: list = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]


def _augment(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)


def context_loss_and_grad(W: np.ndarray, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy of softmax(W [x; 1]) and its gradient wrt W."""
    Xa = _augment(X)
    logits = Xa @ W.T
    loss = batch_cross_entropy(logits, y).mean()
    g = softmax(logits, axis=1)
    g[np.arange(len(y)), y] -= 1.0
    return float(loss), g.T @ Xa / len(y)


def train_context(features, labels, class_names, step: float = 0.5, epochs: int = 500,
                  scenario: str = "", kind: str = "") -> ContextModel:
    """Full-batch gradient descent on mean cross-entropy from zero weights.

    Descent runs on standardised features (zero mean, unit variance per
    column; constant columns left unscaled) and the affine map is folded back,
    so the returned weights act on raw features.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    C = len(class_names)
    counts = np.bincount(y, minlength=C)
    missing = [class_names[i] for i in range(C) if counts[i] == 0]
    if missing:
        raise ValueError(f"no training examples for class(es): {', '.join(missing)}")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd < 1e-12] = 1.0
    Z = (X - mu) / sd
    W = np.zeros((C, X.shape[1] + 1))
    history = []
    for _ in range(epochs):
        loss, grad = context_loss_and_grad(W, Z, y)
        history.append(loss)
        W -= step * grad
    A = W[:, :-1] / sd
    W = np.concatenate([A, (W[:, -1] - A @ mu)[:, None]], axis=1)
    W = W.astype(np.float32).astype(np.float64)
    return ContextModel(W, list(class_names), scenario, kind, history)


def classify_context(f, m: ContextModel) -> tuple[int, np.ndarray]:
    f = np.asarray(f, dtype=float)
    if f.shape != (m.weights.shape[1] - 1,):
        raise ValueError(f"feature length {f.shape} != model input {m.weights.shape[1] - 1}")
    probs = softmax(m.weights @ np.append(f, 1.0))
    return argmax_lowest(probs), probs


def accuracy(m: ContextModel, X, y) -> float:
    pred = np.argmax(_augment(np.asarray(X, float)) @ m.weights.T, axis=1)
    return float(np.mean(pred == np.asarray(y)))


# ---------------------------------------------------------------------------
# prompt + material parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaterialParams:
    material: str
    transmission: float
    reflectivity: float


@dataclass(frozen=True)
class ContextDescriptor:
    scenario: str
    primary_class: str           # clothing (through_cloth) or wall type
    primary_confidence: float
    environment_class: str | None
    environment_confidence: float | None
    prompt: str
    material: MaterialParams


def material_params(scenario: str, name: str) -> MaterialParams:
    tables = material_tables()
    if scenario == "through_cloth":
        if name not in tables["clothing"]:
            raise KeyError(f"unknown clothing class {name!r}")
        return MaterialParams(name, tables["clothing"][name]["transmission"], 0.0)
    t, refl = wall_material(name)
    return MaterialParams(name, t, refl)


def build_prompt(primary: str, scenario: str, environment: str | None = None,
                 primary_confidence: float = 1.0,
                 environment_confidence: float | None = None) -> ContextDescriptor:
    """Fill the scenario's prompt template and attach material parameters."""
    tables = material_tables()
    if scenario == "through_cloth":
        if primary not in tables["clothing"]:
            raise KeyError(f"unknown clothing class {primary!r}")
        env = environment or "lab"
        if env not in tables["environments"]:
            raise KeyError(f"unknown environment class {env!r}")
        entry = tables["clothing"][primary]
        prompt = CLOTH_TEMPLATE.format(phrase=entry["phrase"], effect=entry["effect"],
                                       env_effect=tables["environments"][env]["effect"])
        environment = env
    elif scenario in ("through_wall", "fall"):
        if primary not in tables["walls"]:
            raise KeyError(f"unknown wall class {primary!r}")
        entry = tables["walls"][primary]
        prompt = WALL_TEMPLATE.format(phrase=entry["phrase"], effect=entry["effect"])
    else:
        raise ValueError(f"unknown scenario {scenario!r}")
    return ContextDescriptor(scenario, primary, float(primary_confidence), environment,
                             environment_confidence, prompt, material_params(scenario, primary))


def default_descriptor(scenario: str) -> ContextDescriptor:
    """Scenario-default context used by the no-context ablation."""
    name = material_tables()["no_context_default"][scenario]
    d = build_prompt(name, scenario)
    return ContextDescriptor(d.scenario, d.primary_class, 0.0, d.environment_class, None,
                             d.prompt, d.material)


# ---------------------------------------------------------------------------
# bundle of the per-scenario classifiers
# ---------------------------------------------------------------------------

@dataclass
class ContextBundle:
    scenario: str
    primary: ContextModel
    environment: ContextModel | None = None
    config_hash: str = ""

    def describe(self, rgb) -> ContextDescriptor:
        f = extract_features(rgb)
        return self.describe_features(f)

    def describe_features(self, f) -> ContextDescriptor:
        k, p = classify_context(f, self.primary)
        env, env_conf = None, None
        if self.environment is not None:
            ke, pe = classify_context(f, self.environment)
            env, env_conf = self.environment.class_names[ke], float(pe[ke])
        return build_prompt(self.primary.class_names[k], self.scenario, env, float(p[k]), env_conf)

    def save(self, path) -> None:
        header = {"type": "context", "scenario": self.scenario, "config_hash": self.config_hash,
                  "primary": {"classes": self.primary.class_names, "kind": self.primary.kind}}
        tensors = {"primary": self.primary.weights}
        if self.environment is not None:
            header["environment"] = {"classes": self.environment.class_names,
                                     "kind": self.environment.kind}
            tensors["environment"] = self.environment.weights
        save_bundle(path, header, tensors)

    @classmethod
    def load(cls, path) -> "ContextBundle":
        header, tensors = load_bundle(path)
        if header.get("type") != "context":
            raise ValueError(f"{path} is not a context model")
        sc = header["scenario"]
        prim = ContextModel(tensors["primary"].astype(float), header["primary"]["classes"], sc,
                            header["primary"]["kind"])
        env = None
        if "environment" in header:
            env = ContextModel(tensors["environment"].astype(float),
                               header["environment"]["classes"], sc, header["environment"]["kind"])
        return cls(sc, prim, env, header.get("config_hash", ""))
