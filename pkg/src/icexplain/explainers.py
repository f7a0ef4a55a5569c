"""Baseline post hoc explainers: gradients, LIME, KernelSHAP, random, text LIME."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from math import comb
from typing import Callable, Sequence

import numpy as np

from .models import BlackBoxModel

logger = logging.getLogger(__name__)

METHODS = ("grad", "smoothgrad", "ig", "itg", "lime", "lime16", "shap", "random")


class ExplainerError(ValueError):
    pass


@dataclass(frozen=True)
class Explanation:
    method: str
    ranking: tuple
    scores: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_scores(cls, method: str, scores: np.ndarray, ids: Sequence | None = None,
                    **meta) -> "Explanation":
        scores = np.asarray(scores, dtype=float)
        order = np.argsort(-np.abs(scores), kind="stable")
        ids = list(range(len(scores))) if ids is None else list(ids)
        return cls(method, tuple(ids[i] for i in order), scores, meta)


@dataclass(frozen=True)
class ExplainerConfig:
    lime_samples: int = 1000
    lime_kernel_width: float = 0.75
    lime_std: float = 0.1
    lime_ridge: float = 1e-6
    sg_samples: int = 100
    sg_std: float = 0.005
    ig_steps: int = 50
    ig_multiply_by_inputs: bool = False
    ig_piecewise: bool = True
    shap_samples: int = 500
    shap_exact_max_d: int = 12
    text_samples: int = 1000
    text_kernel_width: float = 25.0
    seed: int = 0


def _require_tabular(model: BlackBoxModel):
    if model.kind == "bow-text":
        raise ExplainerError("gradient explainers need a tabular model")


def _target(model: BlackBoxModel, x: np.ndarray) -> int:
    return model.predict(x).label


def grad(model: BlackBoxModel, x: np.ndarray) -> Explanation:
    _require_tabular(model)
    g = model.input_gradient(x, _target(model, x))
    return Explanation.from_scores("grad", np.abs(g))


def smoothgrad(model: BlackBoxModel, x: np.ndarray, n: int = 100, noise_std: float = 0.005,
               rng: np.random.Generator | None = None) -> Explanation:
    _require_tabular(model)
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=float)
    noisy = x + rng.normal(0.0, noise_std, size=(n, len(x)))
    g = model.input_gradient(noisy, _target(model, x))
    return Explanation.from_scores("smoothgrad", np.abs(g).mean(axis=0))


def gauss_legendre01(n: int) -> tuple[np.ndarray, np.ndarray]:
    t, w = np.polynomial.legendre.leggauss(n)
    return (t + 1.0) / 2.0, w / 2.0


def relu_breakpoints(model: BlackBoxModel, start: np.ndarray, end: np.ndarray) -> np.ndarray:
    """Interior alphas in (0, 1) where a hidden ReLU switches along start -> end.

    Pre-activations are linear in alpha between consecutive breakpoints, so each
    layer's crossings are found exactly from the segment end values.
    """
    points = np.array([0.0, 1.0])
    h_fn = lambda a: start + a[:, None] * (end - start)
    for depth in range(len(model.weights) - 1):
        h = h_fn(points)
        for w, b in zip(model.weights[:depth], model.biases[:depth]):
            h = np.maximum(h @ w + b, 0.0)
        z = h @ model.weights[depth] + model.biases[depth]
        za, zb = z[:-1], z[1:]
        cross = (za * zb) < 0
        seg, _ = np.nonzero(cross)
        t = za[cross] / (za[cross] - zb[cross])
        new = points[seg] + t * (points[seg + 1] - points[seg])
        points = np.unique(np.concatenate([points, new]))
    return points[1:-1]


def integrated_gradients(model: BlackBoxModel, x: np.ndarray, baseline: np.ndarray | None = None,
                         n_steps: int = 50, multiply_by_inputs: bool = False,
                         piecewise: bool = True) -> Explanation:
    """Gauss-Legendre path integral of the predicted-class gradient.

    With ``multiply_by_inputs`` the scores are (x - baseline) * mean gradient,
    which satisfies completeness; otherwise the bare path-averaged gradient.
    With ``piecewise`` the path is split at ReLU switch points and each smooth
    piece gets max(4, ceil(n_steps / pieces)) nodes; for a logistic model this
    is the plain n_steps rule.
    """
    _require_tabular(model)
    x = np.asarray(x, dtype=float)
    baseline = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=float)
    edges = np.array([0.0, 1.0])
    if piecewise and model.kind == "mlp":
        edges = np.concatenate([[0.0], relu_breakpoints(model, baseline, x), [1.0]])
    widths = np.diff(edges)
    t, w = gauss_legendre01(max(4, -(-n_steps // len(widths))))
    alphas = (edges[:-1, None] + widths[:, None] * t).ravel()
    weights = (widths[:, None] * w).ravel()
    path = baseline + alphas[:, None] * (x - baseline)
    g = model.input_gradient(path, _target(model, x))
    avg = weights @ g
    scores = (x - baseline) * avg if multiply_by_inputs else avg
    return Explanation.from_scores("ig", scores, multiply_by_inputs=multiply_by_inputs,
                                   pieces=len(widths))


def grad_x_input(model: BlackBoxModel, x: np.ndarray) -> Explanation:
    _require_tabular(model)
    x = np.asarray(x, dtype=float)
    return Explanation.from_scores("itg", model.input_gradient(x, _target(model, x)) * x)


def weighted_ridge(A: np.ndarray, y: np.ndarray, w: np.ndarray, lam: float
                   ) -> tuple[np.ndarray, float]:
    """Ridge on columns 1.. of A (column 0 is an unpenalised intercept)."""
    AtW = A.T * w
    M = AtW @ A
    reg = np.eye(A.shape[1]) * lam
    reg[0, 0] = 0.0
    M = M + reg
    cond = np.linalg.cond(M)
    return np.linalg.lstsq(M, AtW @ y, rcond=None)[0], float(cond)


def lime(model: BlackBoxModel, x: np.ndarray, n_samples: int = 1000, kernel_width: float = 0.75,
         noise_std: float = 0.1, ridge: float = 1e-6, rng: np.random.Generator | None = None,
         method: str = "lime") -> Explanation:
    """Local linear surrogate of p_yhat fit on Gaussian samples around x.

    The first sample is x itself; samples are weighted by
    exp(-d^2 / kernel_width^2) with Euclidean d.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=float)
    cls = _target(model, x)
    Z = x + rng.normal(0.0, noise_std, size=(n_samples, len(x)))
    Z[0] = x
    D = Z - x
    dist2 = np.sum(D * D, axis=1)
    w = np.exp(-dist2 / kernel_width ** 2)
    y = model.predict_proba(Z)[:, cls]
    A = np.hstack([np.ones((n_samples, 1)), D])
    beta, cond = weighted_ridge(A, y, w, ridge)
    if cond > 1e12:
        logger.warning("lime: weighted system badly conditioned (cond=%.3g)", cond)
    return Explanation.from_scores(method, beta[1:], condition=cond, ill_conditioned=cond > 1e12)


# -- KernelSHAP ------------------------------------------------------------------

def _coalition_values(f: Callable, x: np.ndarray, bg: np.ndarray, masks: np.ndarray) -> np.ndarray:
    return f(np.where(masks, x, bg))


def _solve_constrained(Z: np.ndarray, y: np.ndarray, w: np.ndarray, total: float) -> np.ndarray:
    d = Z.shape[1]
    K = np.zeros((d + 1, d + 1))
    K[:d, :d] = 2.0 * (Z.T * w) @ Z
    K[:d, d] = 1.0
    K[d, :d] = 1.0
    rhs = np.concatenate([2.0 * (Z.T * w) @ y, [total]])
    return np.linalg.lstsq(K, rhs, rcond=None)[0][:d]


def shapley_kernel_weight(d: int, s: int) -> float:
    return (d - 1) / (comb(d, s) * s * (d - s))


def kernel_shap_values(f: Callable, x: np.ndarray, background: np.ndarray,
                       n_samples: int = 500, exact: bool | None = None, exact_max_d: int = 12,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Shapley values of scalar f at x against a single background point."""
    x = np.asarray(x, dtype=float)
    bg = np.asarray(background, dtype=float)
    d = len(x)
    fx, f0 = f(x[None])[0], f(bg[None])[0]
    if d == 1:
        return np.array([fx - f0])
    if exact is None:
        exact = d <= exact_max_d
    if exact:
        if d > 30:
            raise ExplainerError(f"exact KernelSHAP refused for d={d} > 30")
        masks = np.array([m for m in itertools.product([False, True], repeat=d)
                          if 0 < sum(m) < d], dtype=bool)
        sizes = masks.sum(axis=1)
        w = np.array([0.0] + [shapley_kernel_weight(d, s) for s in range(1, d)] + [0.0])[sizes]
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        s_range = np.arange(1, d)
        p = (d - 1) / (s_range * (d - s_range))
        p = p / p.sum()
        sizes = rng.choice(s_range, size=n_samples, p=p)
        masks = np.zeros((n_samples, d), dtype=bool)
        for i, s in enumerate(sizes):
            masks[i, rng.choice(d, size=s, replace=False)] = True
        w = np.ones(n_samples)
    y = _coalition_values(f, x, bg, masks) - f0
    return _solve_constrained(masks.astype(float), y, w, fx - f0)


def brute_force_shapley(f: Callable, x: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Shapley values by enumerating every coalition (reference implementation)."""
    x = np.asarray(x, dtype=float)
    bg = np.asarray(background, dtype=float)
    d = len(x)
    masks = np.array(list(itertools.product([False, True], repeat=d)), dtype=bool)
    vals = dict(zip(map(lambda m: m.tobytes(), masks), f(np.where(masks, x, bg))))
    phi = np.zeros(d)
    for m in masks:
        s = int(m.sum())
        for j in np.flatnonzero(~m):
            with_j = m.copy()
            with_j[j] = True
            weight = 1.0 / (d * comb(d - 1, s))
            phi[j] += weight * (vals[with_j.tobytes()] - vals[m.tobytes()])
    return phi


def kernel_shap(model: BlackBoxModel, x: np.ndarray, background: np.ndarray,
                n_samples: int = 500, exact: bool | None = None, exact_max_d: int = 12,
                rng: np.random.Generator | None = None) -> Explanation:
    x = np.asarray(x, dtype=float)
    cls = _target(model, x)
    phi = kernel_shap_values(lambda Z: model.predict_proba(Z)[:, cls], x, background,
                             n_samples=n_samples, exact=exact, exact_max_d=exact_max_d, rng=rng)
    return Explanation.from_scores("shap", phi)


def random_explainer(d: int, rng: np.random.Generator | None = None) -> Explanation:
    rng = rng if rng is not None else np.random.default_rng(0)
    return Explanation("random", tuple(int(i) for i in rng.permutation(d)))


# -- text --------------------------------------------------------------------------

def lime_text(model: BlackBoxModel, tokens: Sequence[str], n_samples: int = 1000,
              kernel_width: float = 25.0, ridge: float = 1e-6,
              rng: np.random.Generator | None = None, method: str = "lime-text") -> Explanation:
    """Surrogate over word presence; removing a word removes all its occurrences."""
    tokens = list(tokens)
    if len(tokens) < 2:
        raise ExplainerError("lime_text needs at least 2 tokens")
    rng = rng if rng is not None else np.random.default_rng(0)
    words = list(dict.fromkeys(tokens))
    m = len(words)
    cls = model.predict_tokens(tokens).label
    masks = np.ones((n_samples, m), dtype=bool)
    for i in range(1, n_samples):
        n_off = rng.integers(1, m) if m > 1 else 1
        masks[i, rng.choice(m, size=n_off, replace=False)] = False
    kept = [[t for t in tokens if row[words.index(t)]] for row in masks]
    y = model.proba_tokens(kept)[:, cls]
    Zf = masks.astype(float)
    cos = Zf.sum(axis=1) / (np.sqrt(Zf.sum(axis=1)) * np.sqrt(m) + 1e-12)
    dist = (1.0 - cos) * 100.0
    w = np.exp(-dist ** 2 / kernel_width ** 2)
    A = np.hstack([np.ones((n_samples, 1)), Zf])
    beta, _ = weighted_ridge(A, y, w, ridge)
    return Explanation.from_scores(method, beta[1:], ids=words)


# -- dispatch ------------------------------------------------------------------------

def explain(method: str, model: BlackBoxModel, x: np.ndarray, config: ExplainerConfig,
            background: np.ndarray | None = None, rng: np.random.Generator | None = None
            ) -> Explanation:
    if method == "grad":
        return grad(model, x)
    if method == "smoothgrad":
        return smoothgrad(model, x, config.sg_samples, config.sg_std, rng)
    if method == "ig":
        return integrated_gradients(model, x, n_steps=config.ig_steps,
                                    multiply_by_inputs=config.ig_multiply_by_inputs,
                                    piecewise=config.ig_piecewise)
    if method == "itg":
        return grad_x_input(model, x)
    if method == "lime":
        return lime(model, x, config.lime_samples, config.lime_kernel_width, config.lime_std,
                    config.lime_ridge, rng)
    if method == "lime16":
        return lime(model, x, 16, config.lime_kernel_width, config.lime_std, config.lime_ridge,
                    rng, method="lime16")
    if method == "shap":
        if background is None:
            raise ExplainerError("shap needs a background vector")
        return kernel_shap(model, x, background, config.shap_samples,
                           exact_max_d=config.shap_exact_max_d, rng=rng)
    if method == "random":
        return random_explainer(len(x), rng)
    raise ExplainerError(f"unknown explainer {method!r}")
