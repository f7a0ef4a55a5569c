import itertools
from math import factorial

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from icexplain.explainers import (ExplainerConfig, ExplainerError, Explanation,
                                  brute_force_shapley, explain, gauss_legendre01, grad,
                                  grad_x_input, integrated_gradients, kernel_shap,
                                  kernel_shap_values, lime, lime_text, random_explainer,
                                  relu_breakpoints, smoothgrad)
from icexplain.metrics import feature_agreement
from icexplain.models import PRESETS, BlackBoxModel, init_model, logistic_model


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def permutation_shapley(f, x, bg):
    """Average marginal contribution over all d! orderings."""
    d = len(x)
    phi = np.zeros(d)
    for perm in itertools.permutations(range(d)):
        z = bg.copy()
        prev = f(z[None])[0]
        for j in perm:
            z[j] = x[j]
            cur = f(z[None])[0]
            phi[j] += cur - prev
            prev = cur
    return phi / factorial(d)


def interacting(Z):
    Z = np.atleast_2d(Z)
    return np.sin(Z[:, 0]) * Z[:, 1] + Z[:, 2] ** 2 - 0.5 * Z[:, 0] * Z[:, 3]


X4 = np.array([0.7, -1.2, 0.4, 2.0])
BG4 = np.array([0.1, 0.3, -0.5, 0.0])


def test_brute_force_matches_permutation_oracle():
    np.testing.assert_allclose(brute_force_shapley(interacting, X4, BG4),
                               permutation_shapley(interacting, X4, BG4), atol=1e-12)


def test_exact_kernel_shap_matches_brute_force():
    phi = kernel_shap_values(interacting, X4, BG4, exact=True)
    np.testing.assert_allclose(phi, brute_force_shapley(interacting, X4, BG4), atol=1e-9)


def test_sampled_kernel_shap_is_efficient_and_close():
    phi = kernel_shap_values(interacting, X4, BG4, n_samples=2000, exact=False,
                             rng=np.random.default_rng(0))
    total = interacting(X4[None])[0] - interacting(BG4[None])[0]
    assert phi.sum() == pytest.approx(total, abs=1e-9)
    np.testing.assert_allclose(phi, brute_force_shapley(interacting, X4, BG4), atol=0.05)


def test_exact_refused_above_30():
    with pytest.raises(ExplainerError):
        kernel_shap_values(lambda Z: Z.sum(1), np.zeros(31), np.zeros(31), exact=True)


def test_shap_single_feature():
    phi = kernel_shap_values(lambda Z: Z[:, 0] ** 2, np.array([3.0]), np.array([1.0]))
    assert phi.tolist() == [8.0]


def test_shap_symmetry_and_dummy():
    f = lambda Z: Z[:, 0] * Z[:, 1] + 0 * Z[:, 2]
    phi = kernel_shap_values(f, np.array([2.0, 2.0, 5.0]), np.zeros(3), exact=True)
    assert phi[0] == pytest.approx(phi[1])
    assert phi[2] == pytest.approx(0.0, abs=1e-12)


def test_shap_on_linear_model_equals_w_times_offset():
    m = logistic_model([0.0, 0.0, 0.0])  # p is constant: all zero
    assert np.allclose(kernel_shap(m, np.ones(3), np.zeros(3)).scores, 0)


def test_gauss_legendre_exact_for_polynomials():
    t, w = gauss_legendre01(5)
    assert w.sum() == pytest.approx(1.0)
    assert w @ t ** 9 == pytest.approx(0.1)


def test_ig_closed_form_d1():
    w, b, x = 1.7, -0.3, 1.2
    m = logistic_model([w], b)
    e = integrated_gradients(m, np.array([x]), multiply_by_inputs=True, n_steps=50)
    assert e.scores[0] == pytest.approx(sigmoid(w * x + b) - sigmoid(b), abs=1e-10)


def test_ig_default_is_path_gradient():
    m = logistic_model([2.0, -0.5, 1.0])
    e = integrated_gradients(m, np.array([0.3, 0.1, -0.2]))
    assert e.ranking == (0, 2, 1)
    assert e.meta["multiply_by_inputs"] is False


def test_ig_zero_at_baseline():
    m = logistic_model([2.0, -0.5, 1.0])
    e = integrated_gradients(m, np.zeros(3), multiply_by_inputs=True)
    assert np.all(e.scores == 0)


def test_ig_completeness_on_mlp():
    m = init_model(5, PRESETS["ann-l"], seed=3)
    x = np.array([0.5, -1.0, 0.2, 1.5, -0.3])
    e = integrated_gradients(m, x, multiply_by_inputs=True, n_steps=50)
    c = m.predict(x).label
    gap = m.predict_proba(x)[c] - m.predict_proba(np.zeros(5))[c]
    assert abs(e.scores.sum() - gap) <= 1e-3


def test_relu_breakpoints_match_dense_grid():
    m = init_model(4, (6, 5), seed=2)
    a, b = np.array([-1.0, 0.5, 2.0, 0.0]), np.array([1.5, -1.0, -0.5, 1.0])
    bps = relu_breakpoints(m, a, b)
    grid = np.linspace(0, 1, 200_001)
    h, signs = a + grid[:, None] * (b - a), []
    for w, bias in zip(m.weights[:-1], m.biases[:-1]):
        z = h @ w + bias
        signs.append(z > 0)
        h = np.maximum(z, 0)
    pattern = np.hstack(signs)
    switches = grid[1:][np.any(pattern[1:] != pattern[:-1], axis=1)]
    assert len(bps) == len(switches)
    np.testing.assert_allclose(bps, switches, atol=1e-5)


def test_piecewise_ig_equals_plain_on_lr():
    m = logistic_model([2.0, -0.5, 1.0])
    x = np.array([0.3, 0.1, -0.2])
    plain = integrated_gradients(m, x, piecewise=False).scores
    assert np.array_equal(integrated_gradients(m, x).scores, plain)


def test_piecewise_rule_beats_plain_across_kinks(recidivism, recidivism_ann):
    m = recidivism_ann
    errs = {True: [], False: []}
    for x in recidivism.X_test[:20]:
        c = m.predict(x).label
        gap = m.predict_proba(x)[c] - m.predict_proba(np.zeros(len(x)))[c]
        for pw in errs:
            e = integrated_gradients(m, x, multiply_by_inputs=True, piecewise=pw)
            errs[pw].append(abs(e.scores.sum() - gap))
    assert max(errs[True]) < 1e-4 < max(errs[False])


def test_gradient_explainers_on_lr_recover_weight_order():
    m = logistic_model([0.2, -3.0, 1.0, 0.05])
    x = np.array([0.1, 0.1, 0.1, 0.1])
    assert grad(m, x).ranking == (1, 2, 0, 3)
    assert smoothgrad(m, x, rng=np.random.default_rng(0)).ranking == (1, 2, 0, 3)
    itg = grad_x_input(m, np.array([10.0, 0.1, 0.1, 0.1]))
    assert itg.ranking[0] == 0


def test_gradient_explainers_reject_text_model():
    text = BlackBoxModel("bow-text", (np.zeros((2, 2)),), (np.zeros(2),), vocabulary={"a": 0, "b": 1})
    with pytest.raises(ExplainerError):
        grad(text, np.zeros(2))


def test_lime_recovers_lr_order():
    m = logistic_model([0.2, -3.0, 1.0, 0.05, 0.6])
    x = np.array([0.3, -0.1, 0.2, 0.0, 0.4])
    e = lime(m, x, rng=np.random.default_rng(1))
    assert e.ranking[:4] == (1, 2, 4, 0)
    assert not e.meta["ill_conditioned"]


def test_lime_determinism():
    m = logistic_model([0.2, -3.0, 1.0])
    x = np.zeros(3)
    a = lime(m, x, rng=np.random.default_rng(5))
    b = lime(m, x, rng=np.random.default_rng(5))
    assert np.array_equal(a.scores, b.scores)


def test_random_fa_at_one():
    d = 4
    gt = list(range(d))
    rng = np.random.default_rng(0)
    fa = [feature_agreement(random_explainer(d, rng).ranking, gt, 1) for _ in range(4000)]
    assert np.mean(fa) == pytest.approx(1 / d, abs=0.02)


@settings(max_examples=40, deadline=None)
@given(arrays(float, st.integers(1, 12), elements=st.floats(-5, 5, allow_nan=False)))
def test_ranking_is_permutation_sorted_by_magnitude(scores):
    e = Explanation.from_scores("x", scores)
    assert sorted(e.ranking) == list(range(len(scores)))
    mags = np.abs(scores)[list(e.ranking)]
    assert np.all(np.diff(mags) <= 0)


KEYWORD = BlackBoxModel("bow-text",
                        (np.array([[-4.0, 4.0], [0.0, 0.0], [0.0, 0.0], [0.1, -0.1]]),),
                        (np.array([2.0, -2.0]),),
                        vocabulary={"wonderful": 0, "it": 1, "story": 2, "a": 3})


def test_lime_text_finds_keyword():
    toks = ["it", "was", "a", "wonderful", "story", "a"]
    e = lime_text(KEYWORD, toks, rng=np.random.default_rng(0))
    assert e.ranking[0] == "wonderful"
    assert sorted(e.ranking) == sorted(set(toks))


def test_lime_text_needs_two_tokens():
    with pytest.raises(ExplainerError):
        lime_text(KEYWORD, ["wonderful"])


def test_dispatcher():
    m = logistic_model([1.0, 2.0, 3.0])
    cfg = ExplainerConfig()
    x = np.array([0.1, 0.2, 0.3])
    for method in ("grad", "smoothgrad", "ig", "itg", "lime", "lime16", "shap", "random"):
        e = explain(method, m, x, cfg, background=np.zeros(3), rng=np.random.default_rng(0))
        assert sorted(e.ranking) == [0, 1, 2]
    with pytest.raises(ExplainerError):
        explain("shap", m, x, cfg)
    with pytest.raises(ExplainerError):
        explain("nope", m, x, cfg)
