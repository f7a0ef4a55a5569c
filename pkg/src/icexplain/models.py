"""Black-box classifiers that the explainers target.

All tabular models are stacks of dense layers with ReLU hidden activations and a
two-way softmax output; logistic regression is the zero-hidden-layer case, so a
single forward/backward path serves every kind.  The bag-of-words text model
reuses the same machinery over a binary token-presence vector.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

ANN_L = (64, 32, 16)
ANN_XL = (512, 256, 128, 64, 32, 16)
PRESETS: dict[str, tuple[int, ...]] = {"lr": (), "ann-l": ANN_L, "ann-xl": ANN_XL}

_TOKEN_RE = re.compile(r"\w+(?:'\w+)*|[^\w\s]")


class ModelError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def tokenize(sentence: str) -> list[str]:
    """Lowercase word/punctuation tokenizer shared by the text pipeline."""
    return _TOKEN_RE.findall(sentence.lower())


@dataclass(frozen=True)
class Prediction:
    probabilities: np.ndarray
    label: int
    confidence: float

    @classmethod
    def from_probabilities(cls, p: np.ndarray) -> "Prediction":
        p = np.asarray(p, dtype=float)
        label = int(np.argmax(p))
        return cls(probabilities=p, label=label, confidence=float(p[label]))


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.01
    l2: float = 0.0
    class_weight: str | None = "balanced"
    seed: int = 0


def default_training_config(kind_or_preset: str) -> TrainingConfig:
    if kind_or_preset in ("lr", "logistic"):
        return TrainingConfig(epochs=30, batch_size=128, learning_rate=0.01)
    if kind_or_preset == "bow-text":
        return TrainingConfig(epochs=40, batch_size=32, learning_rate=0.01, l2=1e-4)
    return TrainingConfig(epochs=30, batch_size=128, learning_rate=1e-3)


@dataclass(frozen=True)
class BlackBoxModel:
    kind: str  # "logistic" | "mlp" | "bow-text"
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    vocabulary: dict[str, int] | None = None
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp", "bow-text"):
            raise ModelError(f"unknown model kind {self.kind!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ModelError("weights and biases must be non-empty and of equal length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ModelError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ModelError(f"layer {i} input {w.shape[0]} != previous output "
                                 f"{self.weights[i - 1].shape[1]}")
        if self.weights[-1].shape[1] != 2:
            raise ModelError("only two-class models are supported")
        if self.kind in ("logistic", "bow-text") and len(self.weights) != 1:
            raise ModelError(f"{self.kind} model must have zero hidden layers")
        if self.kind == "bow-text":
            if not self.vocabulary:
                raise ModelError("bow-text model needs a vocabulary")
            if len(self.vocabulary) != self.weights[0].shape[0]:
                raise ModelError("vocabulary size does not match input dimension")

    @property
    def n_features(self) -> int:
        return self.weights[0].shape[0]

    @property
    def layer_sizes(self) -> list[int]:
        return [w.shape[1] for w in self.weights[:-1]]

    @property
    def linear_weights(self) -> np.ndarray:
        """Effective weights of the class-1 logit margin (logistic/bow-text only)."""
        if self.kind == "mlp":
            raise ModelError("linear weights are only defined for linear models")
        w = self.weights[0]
        return w[:, 1] - w[:, 0]

    @property
    def linear_bias(self) -> float:
        if self.kind == "mlp":
            raise ModelError("linear bias is only defined for linear models")
        return float(self.biases[0][1] - self.biases[0][0])

    # -- forward -----------------------------------------------------------

    def _forward(self, X: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        acts = [X]
        h = X
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        return acts, _softmax(h)

    def _check_dim(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.n_features:
            raise ModelError(f"expected {self.n_features} features, got {X.shape[-1]}")
        return X

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Class probabilities for one instance ``(d,)`` or a batch ``(n, d)``."""
        X = self._check_dim(X)
        single = X.ndim == 1
        _, p = self._forward(np.atleast_2d(X))
        return p[0] if single else p

    def predict(self, x: np.ndarray) -> Prediction:
        return Prediction.from_probabilities(self.predict_proba(np.asarray(x, dtype=float)))

    def input_gradient(self, X: np.ndarray, cls: int | np.ndarray) -> np.ndarray:
        """d p_cls / d x by backpropagation; accepts one instance or a batch."""
        if self.kind == "bow-text":
            raise ModelError("input gradients are not available for bow-text models")
        X = self._check_dim(X)
        single = X.ndim == 1
        X2 = np.atleast_2d(X)
        acts, p = self._forward(X2)
        cls = np.broadcast_to(np.asarray(cls), (X2.shape[0],))
        onehot = np.zeros_like(p)
        onehot[np.arange(len(p)), cls] = 1.0
        pc = p[np.arange(len(p)), cls][:, None]
        delta = pc * (onehot - p)  # d p_c / d logits
        for i in range(len(self.weights) - 1, -1, -1):
            grad_in = delta @ self.weights[i].T
            if i > 0:
                delta = grad_in * (acts[i] > 0)
            else:
                delta = grad_in
        return delta[0] if single else delta

    # -- text --------------------------------------------------------------

    def encode_tokens(self, token_lists: Iterable[Sequence[str]]) -> np.ndarray:
        if self.vocabulary is None:
            raise ModelError("model has no vocabulary")
        rows = list(token_lists)
        X = np.zeros((len(rows), len(self.vocabulary)))
        for r, toks in enumerate(rows):
            idx = [self.vocabulary[t] for t in toks if t in self.vocabulary]
            X[r, idx] = 1.0
        return X

    def predict_tokens(self, tokens: Sequence[str]) -> Prediction:
        return Prediction.from_probabilities(self.predict_proba(self.encode_tokens([tokens])[0]))

    def proba_tokens(self, token_lists: Iterable[Sequence[str]]) -> np.ndarray:
        return self.predict_proba(self.encode_tokens(token_lists))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def logistic_model(w: Sequence[float], b: float = 0.0) -> BlackBoxModel:
    """Logistic model with p(class 1) = sigmoid(w.x + b), as logits [-m/2, m/2]."""
    w = np.asarray(w, dtype=float)
    W = np.stack([-w / 2.0, w / 2.0], axis=1)
    return BlackBoxModel("logistic", (W,), (np.array([-b / 2.0, b / 2.0]),))


def init_model(n_features: int, hidden: Sequence[int] = (), seed: int = 0,
               kind: str | None = None, vocabulary: dict[str, int] | None = None
               ) -> BlackBoxModel:
    """Seeded fan-in scaled uniform initialisation."""
    rng = np.random.default_rng(seed)
    sizes = [n_features, *hidden, 2]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in) if len(sizes) > 2 else 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    if kind is None:
        kind = "mlp" if hidden else "logistic"
    if kind != "mlp" and len(sizes) == 2:
        weights[0] = np.zeros_like(weights[0])
    return BlackBoxModel(kind, tuple(weights), tuple(biases), vocabulary=vocabulary)


def _fit(model: BlackBoxModel, X: np.ndarray, y: np.ndarray, hyper: TrainingConfig
         ) -> BlackBoxModel:
    """Mini-batch Adam on class-weighted cross-entropy; fixed schedule, seeded order."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    n = len(y)
    if n == 0:
        raise TrainingError("no training rows")
    sample_w = np.ones(n)
    if hyper.class_weight == "balanced":
        counts = np.bincount(y, minlength=2).astype(float)
        present = counts > 0
        cw = np.where(present, n / (present.sum() * np.maximum(counts, 1.0)), 0.0)
        sample_w = cw[y]
    params = [a.copy() for pair in zip(model.weights, model.biases) for a in pair]
    m = [np.zeros_like(a) for a in params]
    v = [np.zeros_like(a) for a in params]
    rng = np.random.default_rng(hyper.seed)
    n_layers = len(model.weights)
    with np.errstate(over="ignore", invalid="ignore"):
        params, loss = _epochs(params, m, v, X, y, sample_w, hyper, rng, n_layers)
    return BlackBoxModel(model.kind, tuple(params[0::2]), tuple(params[1::2]),
                         vocabulary=model.vocabulary, info={"train_loss": float(loss)})


def _epochs(params, m, v, X, y, sample_w, hyper, rng, n_layers):
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    n = len(y)
    step = 0
    loss = np.nan
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            xb, yb, wb = X[idx], y[idx], sample_w[idx]
            Ws, bs = params[0::2], params[1::2]
            acts = [xb]
            h = xb
            for i in range(n_layers):
                z = h @ Ws[i] + bs[i]
                h = z if i == n_layers - 1 else np.maximum(z, 0.0)
                acts.append(h)
            p = _softmax(h)
            norm = wb.sum()
            total += -np.sum(wb * np.log(p[np.arange(len(yb)), yb] + 1e-300))
            delta = p.copy()
            delta[np.arange(len(yb)), yb] -= 1.0
            delta *= (wb / norm)[:, None]
            grads = [None] * len(params)
            for i in range(n_layers - 1, -1, -1):
                grads[2 * i] = acts[i].T @ delta + hyper.l2 * Ws[i]
                grads[2 * i + 1] = delta.sum(axis=0)
                if i > 0:
                    delta = (delta @ Ws[i].T) * (acts[i] > 0)
            step += 1
            lr_t = hyper.learning_rate * np.sqrt(1 - beta2 ** step) / (1 - beta1 ** step)
            for j, g in enumerate(grads):
                m[j] = beta1 * m[j] + (1 - beta1) * g
                v[j] = beta2 * v[j] + (1 - beta2) * g * g
                params[j] = params[j] - lr_t * m[j] / (np.sqrt(v[j]) + eps)
        loss = total / sample_w.sum()
        if not np.isfinite(loss) or not all(np.all(np.isfinite(a)) for a in params):
            raise TrainingError(f"training diverged (final loss {loss})")
    return params, loss


def accuracy(model: BlackBoxModel, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(np.argmax(model.predict_proba(X), axis=1) == np.asarray(y)))


def train(dataset, architecture: Sequence[int] | str = (), hyper: TrainingConfig | None = None
          ) -> BlackBoxModel:
    """Train a logistic (empty architecture) or MLP model on a standardized dataset.

    ``architecture`` may be a preset name ("lr", "ann-l", "ann-xl") or a list of
    hidden-layer sizes.  Test accuracy is recorded in ``model.info``.
    """
    if isinstance(architecture, str):
        preset = architecture
        if preset not in PRESETS:
            raise ModelError(f"unknown preset {preset!r}")
        architecture = PRESETS[preset]
    else:
        preset = "lr" if not architecture else "custom"
    hyper = hyper or default_training_config(preset)
    X, y = dataset.X_train, dataset.y_train
    if np.isnan(X).any():
        raise TrainingError("features contain NaN")
    if not set(np.unique(y)) <= {0, 1}:
        raise TrainingError("labels must be binary 0/1")
    model = init_model(X.shape[1], tuple(architecture), seed=hyper.seed)
    model = _fit(model, X, y, hyper)
    info = dict(model.info)
    info["train_accuracy"] = accuracy(model, X, y)
    if len(dataset.y_test):
        info["test_accuracy"] = accuracy(model, dataset.X_test, dataset.y_test)
    logger.info("trained %s on %s: %s", preset, getattr(dataset, "name", "?"), info)
    return BlackBoxModel(model.kind, model.weights, model.biases, info=info)


def train_text(dataset, hyper: TrainingConfig | None = None) -> BlackBoxModel:
    """Binary bag-of-words logistic classifier over the training vocabulary."""
    hyper = hyper or default_training_config("bow-text")
    train_idx = dataset.indices("train")
    vocab_tokens = sorted({t for i in train_idx for t in dataset.sentences[i]})
    if not vocab_tokens:
        raise TrainingError("empty vocabulary after tokenization")
    if not set(np.unique(dataset.labels)) <= {0, 1}:
        raise TrainingError("labels must be binary 0/1")
    vocab = {t: i for i, t in enumerate(vocab_tokens)}
    model = init_model(len(vocab), (), seed=hyper.seed, kind="bow-text", vocabulary=vocab)
    X = model.encode_tokens(dataset.sentences[i] for i in train_idx)
    y = dataset.labels[train_idx]
    model = _fit(model, X, y, hyper)
    info = dict(model.info)
    info["train_accuracy"] = accuracy(model, X, y)
    test_idx = dataset.indices("test")
    if len(test_idx):
        Xt = model.encode_tokens(dataset.sentences[i] for i in test_idx)
        info["test_accuracy"] = accuracy(model, Xt, dataset.labels[test_idx])
    return BlackBoxModel(model.kind, model.weights, model.biases, vocabulary=vocab, info=info)


# -- checkpoints -------------------------------------------------------------

def save_model(model: BlackBoxModel, path: str | Path) -> None:
    meta = {"version": CHECKPOINT_VERSION, "kind": model.kind, "n_layers": len(model.weights),
            "vocabulary": model.vocabulary, "info": model.info}
    arrays = {f"W{i}": w for i, w in enumerate(model.weights)}
    arrays.update({f"b{i}": b for i, b in enumerate(model.biases)})
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_model(path: str | Path) -> BlackBoxModel:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ModelError(f"unsupported checkpoint version {meta.get('version')}")
        n = meta["n_layers"]
        weights = tuple(z[f"W{i}"] for i in range(n))
        biases = tuple(z[f"b{i}"] for i in range(n))
    return BlackBoxModel(meta["kind"], weights, biases, vocabulary=meta["vocabulary"],
                         info=meta.get("info") or {})


def model_hash(model: BlackBoxModel) -> str:
    import hashlib

    h = hashlib.sha256(model.kind.encode())
    for w, b in zip(model.weights, model.biases):
        h.update(np.ascontiguousarray(w).tobytes())
        h.update(np.ascontiguousarray(b).tobytes())
    if model.vocabulary:
        h.update(json.dumps(model.vocabulary, sort_keys=True).encode())
    return h.hexdigest()[:16]
