"""Faithfulness metrics and their aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .models import BlackBoxModel


@dataclass(frozen=True)
class MetricConfig:
    k_max: int = 3
    mu: float = 0.0
    sigma: float = 0.1
    m: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.m < 1:
            raise ValueError("m must be >= 1")


def _check_k(k: int):
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")


def feature_agreement(e: Sequence, gt: Sequence, k: int) -> float:
    _check_k(k)
    return len(set(list(e)[:k]) & set(list(gt)[:k])) / k


def rank_agreement(e: Sequence, gt: Sequence, k: int) -> float:
    _check_k(k)
    return sum(a == b for a, b in zip(list(e)[:k], list(gt)[:k])) / k


def prediction_gap(model: BlackBoxModel, x: np.ndarray, ranking: Sequence[int], k: int,
                   direction: str = "important", config: MetricConfig = MetricConfig(),
                   noise: np.ndarray | None = None) -> float:
    """Mean |p_yhat(x) - p_yhat(x')| with Gaussian noise on the top-k (PGI) or
    the remaining (PGU) features.  ``noise`` may be supplied to share draws
    across rankings."""
    _check_k(k)
    x = np.asarray(x, dtype=float)
    d = len(x)
    top = [int(i) for i in list(ranking)[:k]]
    mask = np.zeros(d, dtype=bool)
    mask[top] = True
    if direction == "unimportant":
        mask = ~mask
    elif direction != "important":
        raise ValueError(f"direction must be important|unimportant, got {direction!r}")
    if not mask.any():
        return 0.0
    if noise is None:
        rng = np.random.default_rng(config.seed)
        noise = rng.normal(config.mu, config.sigma, size=(config.m, d))
    base = model.predict_proba(x)
    cls = int(np.argmax(base))
    xp = x + noise * mask
    return float(np.mean(np.abs(base[cls] - model.predict_proba(xp)[:, cls])))


def pgi(model, x, ranking, k, config=MetricConfig(), noise=None) -> float:
    return prediction_gap(model, x, ranking, k, "important", config, noise)


def pgu(model, x, ranking, k, config=MetricConfig(), noise=None) -> float:
    return prediction_gap(model, x, ranking, k, "unimportant", config, noise)


def prediction_gap_text(model: BlackBoxModel, tokens: Sequence[str], words: Sequence[str], k: int,
                        direction: str = "important") -> float:
    """|p_yhat(s) - p_yhat(s')| where s' drops every occurrence of the top-k
    words (PGI-text) or of all other words (PGU-text)."""
    _check_k(k)
    tokens = list(tokens)
    top = {w.lower() for w in list(words)[:k]}
    if direction == "important":
        kept = [t for t in tokens if t not in top]
    elif direction == "unimportant":
        if k >= len(tokens):
            return 0.0
        kept = [t for t in tokens if t in top]
    else:
        raise ValueError(f"direction must be important|unimportant, got {direction!r}")
    p = model.proba_tokens([tokens, kept])
    cls = int(np.argmax(p[0]))
    return float(abs(p[0, cls] - p[1, cls]))


def auc_over_k(values: Sequence[float]) -> float:
    values = list(values)
    if not values:
        raise ValueError("no values")
    return float(np.mean(values))


@dataclass(frozen=True)
class MetricReport:
    values: tuple[float, ...]
    mean: float | None
    se: float | None
    n: int
    n_bad: int = 0
    method: str = ""
    dataset: str = ""
    model: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def empty(self) -> bool:
        return self.n == 0

    @property
    def bad_rate(self) -> float:
        total = self.n + self.n_bad
        return self.n_bad / total if total else 0.0


def aggregate(values: Iterable[float | None], method: str = "", dataset: str = "",
              model: str = "") -> MetricReport:
    """Mean and standard error over valid values; ``None`` marks a bad reply."""
    vals = list(values)
    ok = [float(v) for v in vals if v is not None]
    n_bad = len(vals) - len(ok)
    if not ok:
        return MetricReport((), None, None, 0, n_bad, method, dataset, model)
    arr = np.asarray(ok)
    se = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return MetricReport(tuple(ok), float(arr.mean()), se, len(ok), n_bad, method, dataset, model)
