"""Local perturbation neighborhoods and ICL example selection."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .models import BlackBoxModel, Prediction

logger = logging.getLogger(__name__)

FORMATS = ("raw-delta", "perturbed-sample")
CACHE_VERSION = 1

# stream identifiers mixed into per-instance seeds
STREAMS = {"neighborhood": 0, "text": 1, "lime": 2, "smoothgrad": 3, "shap": 4,
           "random": 5, "metric": 6, "lime-text": 7, "e-icl": 8, "grad": 9, "ig": 10,
           "itg": 11}


class PerturbationError(ValueError):
    pass


def instance_rng(seed: int, index: int, stream: str | int = 0) -> np.random.Generator:
    """Independent generator for (global seed, instance index, stream)."""
    code = STREAMS[stream] if isinstance(stream, str) else int(stream)
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), code]))


@dataclass(frozen=True)
class PerturbationConfig:
    sigma: float = 0.1
    n_x: int = 10_000
    n_icl: int = 16
    format: str = "raw-delta"
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise PerturbationError("sigma must be >= 0")
        if self.n_icl < 1 or self.n_x < 1:
            raise PerturbationError("n_x and n_icl must be positive")
        if self.n_icl > self.n_x:
            raise PerturbationError(f"n_icl={self.n_icl} exceeds n_x={self.n_x}")
        if self.format not in FORMATS:
            raise PerturbationError(f"format must be one of {FORMATS}")


@dataclass(frozen=True)
class Neighborhood:
    x: np.ndarray
    base: Prediction
    deltas: np.ndarray
    perturbed: np.ndarray
    probs: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)

    @property
    def confidences(self) -> np.ndarray:
        return self.probs.max(axis=1)

    def __len__(self) -> int:
        return len(self.deltas)


@dataclass(frozen=True)
class IclSet:
    """Prompt-ordered examples.  ``rows`` are deltas or perturbed samples per ``format``."""

    format: str
    rows: np.ndarray
    outputs: np.ndarray
    base_label: int
    balanced: bool = True
    explanations: tuple[str, ...] | None = None

    def __len__(self) -> int:
        return len(self.rows)


def gen_neighborhood(model: BlackBoxModel, x: np.ndarray, config: PerturbationConfig,
                     rng: np.random.Generator | None = None) -> Neighborhood:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n_features,):
        raise PerturbationError(f"instance has shape {x.shape}, model expects ({model.n_features},)")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    deltas = rng.normal(0.0, config.sigma, size=(config.n_x, len(x)))
    perturbed = x + deltas
    return Neighborhood(x=x, base=model.predict(x), deltas=deltas, perturbed=perturbed,
                        probs=model.predict_proba(perturbed))


def select_icl(nb: Neighborhood, config: PerturbationConfig) -> IclSet:
    """Class-balanced, confidence-ranked ICL subset, interleaved by class.

    The base-prediction class receives ceil(n/2) slots.  A class short of its
    quota is backfilled from the other.  Output is label(x') - label(x) for the
    raw-delta format and label(x') for the perturbed-sample format.
    """
    n = config.n_icl
    if len(nb) < n:
        raise PerturbationError(f"neighborhood of {len(nb)} is smaller than n_icl={n}")
    labels, conf = nb.labels, nb.confidences
    base = nb.base.label
    pools = {}
    for c in (0, 1):
        idx = np.flatnonzero(labels == c)
        pools[c] = idx[np.argsort(-conf[idx], kind="stable")]
    other = 1 - base
    quota = {base: (n + 1) // 2, other: n // 2}
    take = {c: min(quota[c], len(pools[c])) for c in (0, 1)}
    short = n - take[0] - take[1]
    for c in (0, 1):
        extra = min(short, len(pools[c]) - take[c])
        take[c] += extra
        short -= extra
    balanced = abs(take[0] - take[1]) <= 1
    if not balanced:
        logger.info("ICL set unbalanced: %d vs %d", take[0], take[1])
    chosen = {c: list(pools[c][:take[c]]) for c in (0, 1)}
    order = []
    a, b = chosen[0], chosen[1]
    for i in range(max(len(a), len(b))):
        if i < len(a):
            order.append(a[i])
        if i < len(b):
            order.append(b[i])
    order = np.asarray(order, dtype=int)
    if config.format == "raw-delta":
        rows = nb.deltas[order]
        outputs = labels[order] - base
    else:
        rows = nb.perturbed[order]
        outputs = labels[order]
    return IclSet(config.format, rows, outputs.astype(int), base, balanced)


def icl_from_neighborhood(model: BlackBoxModel, x: np.ndarray, config: PerturbationConfig,
                          index: int = 0) -> IclSet:
    rng = instance_rng(config.seed, index, "neighborhood")
    return select_icl(gen_neighborhood(model, x, config, rng=rng), config)


# -- text ----------------------------------------------------------------------

@dataclass(frozen=True)
class TextNeighborhood:
    tokens: tuple[str, ...]
    base: Prediction
    masks: np.ndarray  # True where the token is removed
    changes: np.ndarray

    def removed(self, i: int) -> list[str]:
        return [t for t, m in zip(self.tokens, self.masks[i]) if m]

    def kept(self, i: int) -> list[str]:
        return [t for t, m in zip(self.tokens, self.masks[i]) if not m]

    def __len__(self) -> int:
        return len(self.masks)


def sample_masks(n_tokens: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(0.5) removal masks; all-kept and all-removed draws are resampled."""
    if n_tokens < 2:
        raise PerturbationError("sentence needs at least 2 tokens")
    out = np.empty((n, n_tokens), dtype=bool)
    for i in range(n):
        while True:
            m = rng.random(n_tokens) < 0.5
            if 0 < m.sum() < n_tokens:
                break
        out[i] = m
    return out


def gen_text_neighborhood(model: BlackBoxModel, tokens: Sequence[str],
                          config: PerturbationConfig, rng: np.random.Generator | None = None,
                          masks: np.ndarray | None = None) -> TextNeighborhood:
    tokens = tuple(tokens)
    if len(tokens) < 2:
        raise PerturbationError("sentence needs at least 2 tokens")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if masks is None:
        masks = sample_masks(len(tokens), config.n_icl, rng)
    masks = np.asarray(masks, dtype=bool)
    if masks.shape[1] != len(tokens) or not np.all((masks.sum(1) > 0) & (masks.sum(1) < len(tokens))):
        raise PerturbationError("each mask must remove a non-empty proper subset of tokens")
    n_unique = len({m.tobytes() for m in masks})
    if n_unique < len(masks):
        logger.debug("%d duplicate removal subsets", len(masks) - n_unique)
    base = model.predict_tokens(tokens)
    kept = [[t for t, m in zip(tokens, row) if not m] for row in masks]
    labels = np.argmax(model.proba_tokens(kept), axis=1)
    changes = (labels != base.label).astype(int)
    return TextNeighborhood(tokens, base, masks, changes)


# -- cache -----------------------------------------------------------------------

@dataclass
class NeighborhoodCache:
    """On-disk npz cache keyed by dataset hash, model hash, instance and config."""

    root: Path
    version: int = field(default=CACHE_VERSION)

    def key(self, dataset_hash: str, model_hash: str, index: int, config: PerturbationConfig) -> str:
        blob = json.dumps({"v": self.version, "d": dataset_hash, "m": model_hash, "i": int(index),
                           "c": asdict(config)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:24]

    def get_or_create(self, key: str, make) -> Neighborhood:
        path = Path(self.root) / f"{key}.npz"
        if path.exists():
            with np.load(path) as z:
                return Neighborhood(x=z["x"], base=Prediction.from_probabilities(z["base"]),
                                    deltas=z["deltas"], perturbed=z["perturbed"], probs=z["probs"])
        nb = make()
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, x=nb.x, base=nb.base.probabilities, deltas=nb.deltas,
                 perturbed=nb.perturbed, probs=nb.probs)
        tmp.replace(path)
        return nb
