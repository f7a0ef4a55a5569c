"""Tabular and text dataset loading, standardization and splitting."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import yaml

from .models import tokenize

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "ICEXPLAIN_DATA_DIR"
TEXT_DATASETS = {
    "amazon": "amazon_cells_labelled.txt",
    "imdb": "imdb_labelled.txt",
    "yelp": "yelp_labelled.txt",
}
FEATURE_TYPES = ("numeric", "ordinal", "onehot")


class DataError(ValueError):
    pass


class EmptyDatasetError(DataError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    type: str = "numeric"
    categories: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.type not in FEATURE_TYPES:
            raise DataError(f"feature {self.name!r}: unknown type {self.type!r}")


@dataclass(frozen=True)
class Schema:
    name: str
    label: str
    features: tuple[FeatureSpec, ...]
    positive: tuple[str, ...] = ("1",)
    file: str | None = None
    split_column: str | None = None
    na_values: tuple[str, ...] = ()
    delimiter: str = ","

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        try:
            feats = tuple(
                FeatureSpec(f["name"], f.get("type", "numeric"),
                            tuple(str(c) for c in f["categories"]) if f.get("categories") else None)
                for f in d["features"])
            return cls(name=d["name"], label=d["label"], features=feats,
                       positive=tuple(str(p) for p in d.get("positive", ["1"])),
                       file=d.get("file"), split_column=d.get("split_column"),
                       na_values=tuple(d.get("na_values", ())),
                       delimiter=d.get("delimiter", ","))
        except KeyError as exc:
            raise DataError(f"schema is missing key {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "Schema":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def to_dict(self) -> dict:
        return {
            "name": self.name, "label": self.label, "positive": list(self.positive),
            "file": self.file, "split_column": self.split_column,
            "na_values": list(self.na_values), "delimiter": self.delimiter,
            "features": [{"name": f.name, "type": f.type,
                          **({"categories": list(f.categories)} if f.categories else {})}
                         for f in self.features],
        }


@dataclass(frozen=True)
class TabularDataset:
    """Rows, binary labels and a per-row split tag (train | icl | test | pool)."""

    name: str
    feature_names: tuple[str, ...]
    X: np.ndarray
    y: np.ndarray
    split: np.ndarray
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    constant: np.ndarray | None = None
    dataset_hash: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def standardized(self) -> bool:
        return self.mean is not None

    def indices(self, part: str) -> np.ndarray:
        return np.flatnonzero(self.split == part)

    def _part(self, part):
        idx = self.indices(part)
        return self.X[idx], self.y[idx]

    @property
    def X_train(self):
        return self._part("train")[0]

    @property
    def y_train(self):
        return self._part("train")[1]

    @property
    def X_icl(self):
        return self._part("icl")[0]

    @property
    def y_icl(self):
        return self._part("icl")[1]

    @property
    def X_test(self):
        return self._part("test")[0]

    @property
    def y_test(self):
        return self._part("test")[1]

    def inverse_transform(self, Z: np.ndarray) -> np.ndarray:
        if not self.standardized:
            return np.asarray(Z, dtype=float)
        return np.asarray(Z) * self.std + self.mean


@dataclass(frozen=True)
class TextDataset:
    name: str
    texts: tuple[str, ...]
    sentences: tuple[tuple[str, ...], ...]
    labels: np.ndarray
    split: np.ndarray
    dataset_hash: str = ""

    def indices(self, part: str) -> np.ndarray:
        return np.flatnonzero(self.split == part)

    def __len__(self) -> int:
        return len(self.labels)


def from_arrays(X, y, feature_names: Sequence[str] | None = None, split=None,
                name: str = "array") -> TabularDataset:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DataError("X must be 2-dimensional")
    y = np.asarray(y, dtype=int)
    if feature_names is None:
        feature_names = [f"x{i}" for i in range(X.shape[1])]
    split = np.asarray(split if split is not None else ["train"] * len(y), dtype=object)
    h = hashlib.sha256(X.tobytes() + y.tobytes()).hexdigest()[:16]
    return TabularDataset(name, tuple(feature_names), X, y, split, dataset_hash=h)


def _hash_bytes(data: bytes, schema: Schema) -> str:
    h = hashlib.sha256(data)
    h.update(json.dumps(schema.to_dict(), sort_keys=True).encode())
    return h.hexdigest()[:16]


def load_tabular(path: str | Path, schema: Schema) -> TabularDataset:
    """Read a delimited file with header into a TabularDataset.

    Rows containing any of ``schema.na_values`` in a used column are dropped.
    Ordinal columns map categories (sorted, unless listed in the schema) to
    0..n-1; one-hot columns expand into ``name=value`` indicators.
    """
    path = Path(path)
    raw = path.read_bytes()
    df = pd.read_csv(path, dtype=str, sep=schema.delimiter, skipinitialspace=True,
                     keep_default_na=False, compression="infer")
    df.columns = [c.strip() for c in df.columns]
    needed = [f.name for f in schema.features] + [schema.label]
    if schema.split_column:
        needed.append(schema.split_column)
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise DataError(f"{path.name}: missing columns {missing}")
    if df.empty:
        raise EmptyDatasetError(f"{path.name}: no data rows")
    df = df[needed].apply(lambda s: s.str.strip())
    bad = df.isin(list(schema.na_values)) | (df == "")
    drop = bad.any(axis=1)
    if drop.any():
        logger.info("%s: dropped %d rows with missing values", schema.name, int(drop.sum()))
        df = df[~drop].reset_index(drop=True)
    if df.empty:
        raise EmptyDatasetError(f"{path.name}: no rows left after dropping missing values")

    columns, names = [], []
    for spec in schema.features:
        col = df[spec.name]
        if spec.type == "numeric":
            vals = pd.to_numeric(col, errors="coerce")
            if vals.isna().any():
                row = int(np.flatnonzero(vals.isna().to_numpy())[0])
                raise DataError(f"{path.name}: unparseable numeric {col.iloc[row]!r} "
                                f"in column {spec.name!r} at data row {row}")
            columns.append(vals.to_numpy(dtype=float))
            names.append(spec.name)
            continue
        cats = list(spec.categories) if spec.categories else sorted(col.unique())
        unknown = sorted(set(col.unique()) - set(cats))
        if unknown:
            raise DataError(f"{path.name}: column {spec.name!r} has undeclared categories {unknown}")
        if spec.type == "ordinal":
            lookup = {c: i for i, c in enumerate(cats)}
            columns.append(col.map(lookup).to_numpy(dtype=float))
            names.append(spec.name)
        else:
            for c in cats:
                columns.append((col == c).to_numpy(dtype=float))
                names.append(f"{spec.name}={c}")
    X = np.column_stack(columns)
    y = df[schema.label].isin(schema.positive).to_numpy(dtype=int)
    if schema.split_column:
        split = df[schema.split_column].map(
            lambda s: "test" if s.lower() == "test" else "train").to_numpy(dtype=object)
    else:
        split = np.full(len(y), "pool", dtype=object)
    return TabularDataset(schema.name, tuple(names), X, y, split,
                          dataset_hash=_hash_bytes(raw, schema),
                          meta={"source": str(path), "source_test": bool(schema.split_column)})


def split(dataset: TabularDataset, seed: int = 0, test_fraction: float = 0.2,
          icl_fraction: float = 0.2, min_test: int = 100) -> TabularDataset:
    """Assign train/icl/test.

    A test split supplied by the source is kept; otherwise ``test_fraction`` of
    the rows are carved off with a seeded shuffle.  The remaining train portion
    is divided (1 - icl_fraction) / icl_fraction into train and ICL rows.
    """
    rng = np.random.default_rng(seed)
    n = len(dataset.y)
    out = np.empty(n, dtype=object)
    has_test = bool(np.any(dataset.split == "test"))
    if has_test:
        test_idx = np.flatnonzero(dataset.split == "test")
        rest = np.flatnonzero(dataset.split != "test")
        rest = rest[rng.permutation(len(rest))]
    else:
        perm = rng.permutation(n)
        n_test = int(round(test_fraction * n))
        test_idx, rest = np.sort(perm[:n_test]), perm[n_test:]
    n_icl = int(round(icl_fraction * len(rest)))
    icl_idx, train_idx = rest[:n_icl], rest[n_icl:]
    if len(test_idx) < min_test or len(train_idx) == 0 or len(icl_idx) == 0:
        raise DataError(f"{dataset.name}: {n} rows give {len(train_idx)} train / "
                        f"{len(icl_idx)} icl / {len(test_idx)} test; need >= {min_test} test "
                        "and non-empty train and icl")
    out[test_idx] = "test"
    out[icl_idx] = "icl"
    out[train_idx] = "train"
    return replace(dataset, split=out)


def standardize(dataset: TabularDataset) -> TabularDataset:
    """Z-score every feature with train-split mean and population std.

    Constant features are flagged and left untouched.  Applying this to an
    already standardized dataset returns it unchanged.
    """
    if dataset.standardized:
        return dataset
    train = dataset.X_train
    if len(train) == 0:
        raise DataError(f"{dataset.name}: standardization needs a non-empty train split")
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    constant = std == 0
    if constant.any():
        logger.warning("%s: constant features left unscaled: %s", dataset.name,
                       [n for n, c in zip(dataset.feature_names, constant) if c])
    mean = np.where(constant, 0.0, mean)
    std = np.where(constant, 1.0, std)
    X = (dataset.X - mean) / std
    return replace(dataset, X=X, mean=mean, std=std, constant=constant)


# -- text --------------------------------------------------------------------

def load_text(path: str | Path, name: str | None = None) -> TextDataset:
    path = Path(path)
    raw = path.read_bytes()
    texts, sentences, labels = [], [], []
    dropped = 0
    # split on \n only: the corpora contain U+0085 inside sentences
    for i, line in enumerate(raw.decode("utf-8").split("\n")):
        if not line.strip():
            continue
        parts = line.rstrip("\r\n").rsplit("\t", 1)
        if len(parts) != 2:
            raise DataError(f"{path.name}: malformed line {i} (expected sentence<TAB>label)")
        text, lab = parts[0].strip(), parts[1].strip()
        if lab not in ("0", "1"):
            raise DataError(f"{path.name}: line {i} has label {lab!r} outside {{0,1}}")
        toks = tokenize(text)
        if not toks:
            dropped += 1
            continue
        texts.append(text)
        sentences.append(tuple(toks))
        labels.append(int(lab))
    if dropped:
        logger.info("%s: dropped %d sentences that tokenize to nothing", path.name, dropped)
    if not labels:
        raise EmptyDatasetError(f"{path.name}: no sentences")
    h = hashlib.sha256(raw).hexdigest()[:16]
    return TextDataset(name or path.stem, tuple(texts), tuple(sentences),
                       np.asarray(labels, dtype=int),
                       np.full(len(labels), "pool", dtype=object), dataset_hash=h)


def split_text(dataset: TextDataset, seed: int = 0, test_fraction: float = 0.2,
               min_test: int = 100) -> TextDataset:
    rng = np.random.default_rng(seed)
    n = len(dataset)
    perm = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    if n_test < min_test or n_test == n:
        raise DataError(f"{dataset.name}: {n} sentences give {n_test} test rows; "
                        f"need >= {min_test} and a non-empty train split")
    out = np.full(n, "train", dtype=object)
    out[perm[:n_test]] = "test"
    return replace(dataset, split=out)


# -- registry ------------------------------------------------------------------

def _bundled_dir() -> Path:
    return Path(str(resources.files("icexplain") / "datasets"))


def data_dirs() -> list[Path]:
    dirs = []
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        dirs.append(Path(env))
    dirs.append(_bundled_dir())
    return dirs


def _find(filename: str) -> Path:
    for d in data_dirs():
        p = d / filename
        if p.exists():
            return p
    raise DataError(f"data file {filename!r} not found in {[str(d) for d in data_dirs()]} "
                    f"(set {DATA_DIR_ENV} to add a directory)")


def tabular_names() -> list[str]:
    names = set()
    for d in data_dirs():
        if d.is_dir():
            names.update(p.stem for p in d.glob("*.yaml"))
    return sorted(names)


def load_schema(name: str) -> Schema:
    return Schema.load(_find(f"{name}.yaml"))


def load_dataset(name: str, seed: int = 0, min_test: int = 100) -> TabularDataset:
    """Load a registered tabular dataset, split and standardized."""
    schema = load_schema(name)
    ds = load_tabular(_find(schema.file or f"{name}.csv"), schema)
    return standardize(split(ds, seed=seed, min_test=min_test))


def load_text_dataset(name: str, seed: int = 0) -> TextDataset:
    if name not in TEXT_DATASETS:
        raise DataError(f"unknown text dataset {name!r}; choose from {sorted(TEXT_DATASETS)}")
    return split_text(load_text(_find(TEXT_DATASETS[name]), name=name), seed=seed)


def is_text_dataset(name: str) -> bool:
    return name in TEXT_DATASETS
