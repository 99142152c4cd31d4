import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from radarctx.config import ScenarioConfig
from radarctx.context import (FEATURE_DIM, ContextModel, build_prompt, classify_context,
                              context_loss_and_grad, cross_entropy, cross_entropy_grad,
                              default_descriptor, extract_features, softmax, train_context)
from radarctx.scene import build_scenario, material_tables, render_depth

logits = st.lists(st.floats(-30, 30), min_size=1, max_size=10)


def rel_err(a, b):
    """Largest absolute deviation over the largest reference magnitude."""
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def test_ce_symmetric_pair():
    assert cross_entropy([0.0, 0.0], 0) == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("t,C,c", [(0.0, 3, 1), (-7.5, 9, 8), (400.0, 4, 0)])
def test_ce_constant_logits(t, C, c):
    assert cross_entropy([t] * C, c) == pytest.approx(math.log(C), abs=1e-12)


def test_ce_direct_evaluation():
    assert cross_entropy([2.0, 0.0, 0.0], 0) == pytest.approx(math.log(math.e ** 2 + 2) - 2, abs=1e-12)
    assert cross_entropy([2.0, 0.0, 0.0], 0) == pytest.approx(0.23954, abs=1e-5)


def test_ce_errors():
    with pytest.raises(ValueError):
        cross_entropy([], 0)
    with pytest.raises(ValueError):
        cross_entropy([1.0, 2.0], 2)


@given(logits, st.floats(-1e3, 1e3), st.data())
def test_ce_shift_invariance(z, k, data):
    c = data.draw(st.integers(0, len(z) - 1))
    assert cross_entropy(np.asarray(z) + k, c) == pytest.approx(cross_entropy(z, c), abs=1e-9)
    assert cross_entropy(z, c) >= 0


@given(logits)
def test_softmax_sums_to_one(z):
    assert abs(softmax(z).sum() - 1) <= 1e-6


@given(logits, st.data())
def test_ce_gradient_is_softmax_minus_onehot(z, data):
    c = data.draw(st.integers(0, len(z) - 1))
    eps = 1e-5
    z = np.asarray(z, dtype=float)
    num = np.array([(cross_entropy(z + eps * e, c) - cross_entropy(z - eps * e, c)) / (2 * eps)
                    for e in np.eye(len(z))])
    assert np.allclose(cross_entropy_grad(z, c), num, atol=1e-6)


def test_black_image_features():
    f = extract_features(np.zeros((48, 64, 3)))
    assert f.shape == (FEATURE_DIM,) == (64,)
    assert not f[:48].any() and not f[48:].any()


def test_pure_red_histogram():
    img = np.zeros((48, 64, 3))
    img[..., 0] = 1.0
    h = extract_features(img)[48:]
    assert h[0] == 1.0 and h[1:].sum() == 0


@given(st.integers(0, 2 ** 31), st.floats(0.1, 1.0))
def test_histogram_brightness_invariant_and_unit_norm(seed, scale):
    img = np.random.default_rng(seed).random((16, 16, 3))
    a = extract_features(img)[48:]
    b = extract_features(img * scale)[48:]
    if (a ** 2).sum() > 0:
        assert abs((a ** 2).sum() - 1) <= 1e-6
    # brightness scaling keeps hue and saturation; only the value gate can drop pixels
    if (img.max(axis=2) * scale > 0.02).all():
        assert np.allclose(a, b, atol=1e-12)


def test_features_reject_small_images():
    with pytest.raises(ValueError):
        extract_features(np.zeros((4, 64, 3)))


def test_clothing_renders_differ():
    feats = []
    for cloth in ("fleece", "snow_jacket"):
        cfg = ScenarioConfig.for_scenario("through_cloth", clothing=cloth)
        rgb, _ = render_depth(build_scenario(cfg, 0)[0], cfg.camera())
        feats.append(extract_features(rgb))
    assert np.linalg.norm(feats[0] - feats[1]) > 0


def test_separable_one_hot_training():
    X = np.repeat(np.eye(2), 5, axis=0)
    y = np.repeat([0, 1], 5)
    m = train_context(X, y, ["a", "b"], epochs=200)
    pred = [classify_context(x, m)[0] for x in X]
    assert pred == y.tolist()


def test_missing_class_named():
    with pytest.raises(ValueError, match="b"):
        train_context(np.eye(2), [0, 0], ["a", "b"])


def test_gradient_vs_finite_differences(rng):
    X = rng.standard_normal((7, 5))
    y = rng.integers(0, 3, 7)
    W = rng.standard_normal((3, 6)) * 0.5
    _, g = context_loss_and_grad(W, X, y)
    eps = 1e-4
    num = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        d = np.zeros_like(W)
        d[idx] = eps
        num[idx] = (context_loss_and_grad(W + d, X, y)[0] - context_loss_and_grad(W - d, X, y)[0]) / (2 * eps)
    assert rel_err(g, num) < 1e-4


def test_loss_non_increasing(rng):
    X = rng.standard_normal((30, 6))
    y = rng.integers(0, 3, 30)
    m = train_context(X, y, ["a", "b", "c"], step=0.05, epochs=300)
    assert np.all(np.diff(m.history) <= 1e-12)


def test_zero_weights_tie_to_lowest_index():
    m = ContextModel(np.zeros((4, 65)), list("abcd"))
    k, p = classify_context(np.ones(64), m)
    assert k == 0
    assert np.allclose(p, 0.25)


def test_fleece_prompt():
    d = build_prompt("fleece", "through_cloth", "lab")
    tables = material_tables()
    assert "A person is wearing" in d.prompt
    assert tables["clothing"]["fleece"]["phrase"] in d.prompt
    assert d.material.transmission == tables["clothing"]["fleece"]["transmission"] == 0.85


def test_styrofoam_prompt():
    d = build_prompt("styrofoam", "through_wall")
    assert d.prompt.endswith("Generate the expected radar spectrum for this blank scene.")
    assert "radar is directed at a" in d.prompt
    assert d.material.transmission == 0.95
    assert d.material.reflectivity == pytest.approx(0.0)


def test_prompt_deterministic():
    assert build_prompt("curtain", "fall") == build_prompt("curtain", "fall")


def test_prompt_totality():
    t = material_tables()
    for cloth in t["clothing"]:
        for env in t["environments"]:
            d = build_prompt(cloth, "through_cloth", env)
            assert d.prompt and d.prompt.endswith("assuming no anomalies.")
    for wall in t["walls"]:
        for scen in ("through_wall", "fall"):
            d = build_prompt(wall, scen)
            assert d.prompt and 0 <= d.primary_confidence <= 1
            assert d.material.transmission + d.material.reflectivity <= 1


def test_unknown_classes():
    with pytest.raises(KeyError):
        build_prompt("tuxedo", "through_cloth")
    with pytest.raises(KeyError):
        build_prompt("brick", "through_wall")


def test_no_context_defaults():
    assert default_descriptor("through_cloth").primary_class == "casual"
    assert default_descriptor("through_wall").primary_class == "curtain"
    assert default_descriptor("through_wall").primary_confidence == 0.0
