"""Experiment orchestration: config, per-instance pipeline, ablations, reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import yaml

from . import data as data_mod
from . import explainers as ex
from . import metrics as mt
from . import models as md
from .llm import LlmClient, LlmConfig, mock_oracle
from .parser import parse_topk, parse_words
from .perturb import (PerturbationConfig, gen_neighborhood, gen_text_neighborhood,
                      instance_rng, select_icl)
from .prompts import (PromptSpec, Triplet, build_e_icl, build_p_icl, build_pg_icl,
                      build_text_prompt, letter, letters)

logger = logging.getLogger(__name__)

LLM_METHODS = ("p-icl", "pg-icl", "e-icl")
TABULAR_BASELINES = ("grad", "smoothgrad", "ig", "itg", "lime", "lime16", "shap", "random")
TEXT_METHODS = ("p-icl", "lime-text", "lime-text16", "random")
MODEL_PRESETS = ("lr", "ann-l", "ann-xl", "bow-text")
ABLATION_AXES = ("format", "cot", "context", "n-icl", "llm-model")
N_ICL_PRESETS = {"default": (4, 8, 12, 16, 32), "extended": (4, 8, 12, 16, 64)}

RESULTS_FILE = "results.jsonl"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PromptFlags:
    include_context: bool = True
    include_cot: bool = True
    top_k: int | None = None
    e_icl_source: str = "lime"
    e_icl_n: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "recidivism"
    model: str = "lr"
    methods: tuple[str, ...] = ("p-icl", "pg-icl", "grad", "smoothgrad", "ig", "itg", "lime",
                                "shap", "random")
    n_instances: int = 100
    seed: int = 0
    output_dir: str = "runs/default"
    workers: int = 1
    model_path: str | None = None
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    prompt: PromptFlags = field(default_factory=PromptFlags)
    llm: LlmConfig = field(default_factory=LlmConfig)
    metrics: mt.MetricConfig = field(default_factory=mt.MetricConfig)
    explainer: ex.ExplainerConfig = field(default_factory=ex.ExplainerConfig)

    def __post_init__(self):
        if self.model not in MODEL_PRESETS:
            raise ConfigError(f"model must be one of {MODEL_PRESETS}")
        text = data_mod.is_text_dataset(self.dataset)
        if text != (self.model == "bow-text"):
            raise ConfigError("text datasets pair with bow-text and tabular ones with lr/ann-*")
        allowed = TEXT_METHODS if text else LLM_METHODS + TABULAR_BASELINES
        bad = [m for m in self.methods if m not in allowed]
        if bad:
            raise ConfigError(f"methods {bad} not available for {self.dataset}; "
                              f"choose from {allowed}")
        if len(set(self.methods)) != len(self.methods) or not self.methods:
            raise ConfigError("methods must be a non-empty list without duplicates")
        if self.n_instances < 1 or self.workers < 1:
            raise ConfigError("n_instances and workers must be >= 1")
        if self.prompt.e_icl_source not in TABULAR_BASELINES:
            raise ConfigError(f"e_icl_source must be a baseline explainer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        nested = {"perturbation": PerturbationConfig, "prompt": PromptFlags, "llm": LlmConfig,
                  "metrics": mt.MetricConfig, "explainer": ex.ExplainerConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            for key, typ in nested.items():
                if key in d and not isinstance(d[key], typ):
                    sub = d[key] or {}
                    allowed = {f.name for f in fields(typ)}
                    if set(sub) - allowed:
                        raise ConfigError(f"unknown {key} keys {sorted(set(sub) - allowed)}")
                    d[key] = typ(**sub)
            if "methods" in d:
                d["methods"] = tuple(d["methods"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        text = Path(path).read_text()
        try:
            raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return cls.from_dict(raw)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @property
    def is_text(self) -> bool:
        return data_mod.is_text_dataset(self.dataset)


_RUNTIME_KEYS = ("output_dir", "workers")
_LLM_RUNTIME_KEYS = ("mode", "cache_path", "timeout", "max_attempts", "backoff",
                     "requests_per_minute", "api_key_env")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def config_hash(config: ExperimentConfig) -> str:
    """Hash of everything that can change results; runtime knobs are excluded."""
    d = config.to_dict()
    for k in _RUNTIME_KEYS:
        d.pop(k)
    for k in _LLM_RUNTIME_KEYS:
        d["llm"].pop(k)
    return _digest(d)


def eval_hash(config: ExperimentConfig) -> str:
    """Hash of what makes two runs' metrics comparable (data, model, instances, metric)."""
    return _digest({"dataset": config.dataset, "model": config.model, "seed": config.seed,
                    "n_instances": config.n_instances, "model_path": config.model_path,
                    "metrics": asdict(config.metrics)})


# -- context ---------------------------------------------------------------------

@dataclass
class RunContext:
    config: ExperimentConfig
    dataset: object
    model: md.BlackBoxModel
    instances: list[int]
    client: LlmClient | None
    background: np.ndarray | None = None
    ground_truth: tuple | None = None
    hash: str = ""


def load_or_train(config: ExperimentConfig, dataset, out: Path | None) -> md.BlackBoxModel:
    if config.model_path:
        return md.load_model(config.model_path)
    path = out / "model.npz" if out else None
    if path is not None and path.exists():
        return md.load_model(path)
    if config.model == "bow-text":
        model = md.train_text(dataset, md.TrainingConfig(**{**asdict(
            md.default_training_config("bow-text")), "seed": config.seed}))
    else:
        hyper = replace(md.default_training_config(config.model), seed=config.seed)
        model = md.train(dataset, config.model, hyper)
    if path is not None:
        md.save_model(model, path)
    return model


def prepare(config: ExperimentConfig, responder=None, transport=None,
            out: Path | None = None) -> RunContext:
    if config.is_text:
        ds = data_mod.load_text_dataset(config.dataset, seed=config.seed)
        eligible = [int(i) for i in ds.indices("test") if len(ds.sentences[i]) >= 2]
    else:
        ds = data_mod.load_dataset(config.dataset, seed=config.seed)
        eligible = [int(i) for i in ds.indices("test")]
    model = load_or_train(config, ds, out)
    instances = eligible[:config.n_instances]
    client = None
    if any(m in LLM_METHODS for m in config.methods):
        if config.llm.mode == "mock" and responder is None:
            responder = mock_oracle(model)
        client = LlmClient(config.llm, responder=responder, transport=transport)
    ctx = RunContext(config, ds, model, instances, client, hash=config_hash(config))
    if not config.is_text:
        ctx.background = ds.X_train.mean(axis=0)
        if model.kind == "logistic":
            from .llm import importance_order
            ctx.ground_truth = tuple(int(i) for i in importance_order(model))
    return ctx


# -- per-instance pipeline ---------------------------------------------------------

def _tabular_llm(ctx: RunContext, method: str, pos: int, x: np.ndarray):
    cfg = ctx.config
    d = len(x)
    pcfg = replace(cfg.perturbation, seed=cfg.seed)
    k = cfg.prompt.top_k if cfg.prompt.top_k is not None else min(5, d)
    if method == "e-icl":
        rng = instance_rng(cfg.seed, pos, "e-icl")
        X_icl = ctx.dataset.X_icl
        picks = rng.choice(len(X_icl), size=min(cfg.prompt.e_icl_n, len(X_icl)), replace=False)
        triplets = []
        for j in picks:
            xi = X_icl[j]
            e = ex.explain(cfg.prompt.e_icl_source, ctx.model, xi, cfg.explainer, ctx.background,
                           instance_rng(cfg.seed, 10_000_000 + int(j), cfg.prompt.e_icl_source))
            triplets.append(Triplet(xi, ctx.model.predict(xi).label, [letter(i) for i in e.ranking]))
        prompt = build_e_icl(triplets, x, ctx.model.predict(x).label, instance_id=pos)
    else:
        nb = gen_neighborhood(ctx.model, x, pcfg, rng=instance_rng(cfg.seed, pos, "neighborhood"))
        spec = PromptSpec(method, select_icl(nb, pcfg), d, top_k=k,
                          include_context=cfg.prompt.include_context,
                          include_cot=cfg.prompt.include_cot, instance_id=pos)
        prompt = build_p_icl(spec) if method == "p-icl" else build_pg_icl(spec)
    t = ctx.client.complete(prompt)
    parsed = parse_topk(t.reply, letters(d), None if method == "e-icl" else k)
    ranking = tuple(letters(d).index(c) for c in parsed.ranking)
    return parsed.status, ranking, t.key


def _tabular_record(ctx: RunContext, method: str, pos: int, noise: np.ndarray) -> dict:
    cfg = ctx.config
    row = ctx.instances[pos]
    x = ctx.dataset.X[row]
    transcript = None
    status = "ok"
    if method in LLM_METHODS:
        status, ranking, transcript = _tabular_llm(ctx, method, pos, x)
    else:
        e = ex.explain(method, ctx.model, x, cfg.explainer, ctx.background,
                       instance_rng(cfg.seed, pos, "lime" if method == "lime16" else method))
        ranking = e.ranking
    rec = {"instance": pos, "row": row, "method": method, "status": status,
           "ranking": [letter(i) for i in ranking], "transcript": transcript,
           "config_hash": ctx.hash, "eval_hash": eval_hash(cfg)}
    if status != "ok":
        rec["metrics"] = None
        rec["auc"] = None
        return rec
    ks = range(1, cfg.metrics.k_max + 1)
    vals = {"pgi": [mt.pgi(ctx.model, x, ranking, k, cfg.metrics, noise) for k in ks],
            "pgu": [mt.pgu(ctx.model, x, ranking, k, cfg.metrics, noise) for k in ks]}
    if ctx.ground_truth is not None:
        vals["fa"] = [mt.feature_agreement(ranking, ctx.ground_truth, k) for k in ks]
        vals["ra"] = [mt.rank_agreement(ranking, ctx.ground_truth, k) for k in ks]
    rec["metrics"] = vals
    rec["auc"] = {name: mt.auc_over_k(v) for name, v in vals.items()}
    return rec


def _text_record(ctx: RunContext, method: str, pos: int) -> dict:
    cfg = ctx.config
    row = ctx.instances[pos]
    tokens = list(ctx.dataset.sentences[row])
    transcript = None
    status = "ok"
    if method == "p-icl":
        nb = gen_text_neighborhood(ctx.model, tokens, replace(cfg.perturbation, seed=cfg.seed),
                                   rng=instance_rng(cfg.seed, pos, "text"))
        prompt = build_text_prompt(ctx.dataset.texts[row], nb, k=3, instance_id=pos)
        t = ctx.client.complete(prompt)
        transcript = t.key
        parsed = parse_words(t.reply, tokens, k=3)
        status, ranking = parsed.status, list(parsed.ranking)
    elif method == "random":
        words = list(dict.fromkeys(tokens))
        perm = instance_rng(cfg.seed, pos, "random").permutation(len(words))
        ranking = [words[i] for i in perm]
    else:
        n = 16 if method == "lime-text16" else cfg.explainer.text_samples
        e = ex.lime_text(ctx.model, tokens, n, cfg.explainer.text_kernel_width,
                         rng=instance_rng(cfg.seed, pos, "lime-text"), method=method)
        ranking = list(e.ranking)
    rec = {"instance": pos, "row": row, "method": method, "status": status, "ranking": ranking,
           "transcript": transcript, "config_hash": ctx.hash, "eval_hash": eval_hash(cfg)}
    if status != "ok":
        rec["metrics"] = None
        rec["auc"] = None
        return rec
    ks = range(1, cfg.metrics.k_max + 1)
    vals = {"pgi": [mt.prediction_gap_text(ctx.model, tokens, ranking, k, "important") for k in ks],
            "pgu": [mt.prediction_gap_text(ctx.model, tokens, ranking, k, "unimportant")
                    for k in ks]}
    rec["metrics"] = vals
    rec["auc"] = {name: mt.auc_over_k(v) for name, v in vals.items()}
    return rec


def instance_records(ctx: RunContext, pos: int, methods: Sequence[str]) -> list[dict]:
    if ctx.config.is_text:
        return [_text_record(ctx, m, pos) for m in methods]
    d = ctx.model.n_features
    mc = ctx.config.metrics
    noise = instance_rng(ctx.config.seed, pos, "metric").normal(mc.mu, mc.sigma, size=(mc.m, d))
    return [_tabular_record(ctx, m, pos, noise) for m in methods]


# -- results file --------------------------------------------------------------------

def _dumps(rec: dict) -> str:
    return json.dumps(_plain(rec), sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def read_results(path: str | Path, repair: bool = False) -> list[dict]:
    """Load records; a truncated final line is dropped (and cut from the file if ``repair``)."""
    path = Path(path)
    if not path.exists():
        return []
    raw = path.read_bytes()
    records, good_end, pos = [], 0, 0
    for line in raw.splitlines(keepends=True):
        pos += len(line)
        if not line.strip():
            good_end = pos
            continue
        try:
            if not line.endswith(b"\n"):
                raise ValueError("unterminated")
            records.append(json.loads(line))
            good_end = pos
        except ValueError:
            if pos != len(raw):
                raise ConfigError(f"{path}: corrupt record before end of file") from None
            logger.warning("%s: dropping truncated last line", path)
    if repair and good_end != len(raw):
        with open(path, "r+b") as fh:
            fh.truncate(good_end)
    return records


def run_experiment(config: ExperimentConfig, responder=None, transport=None,
                   force: bool = False, progress: Callable[[int], None] | None = None) -> Path:
    """Run every (instance, method) pair, append to results.jsonl, write reports."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = prepare(config, responder, transport, out)
    config.dump(out / "config.yaml")
    results = out / RESULTS_FILE
    existing = read_results(results, repair=True)
    hashes = {r["config_hash"] for r in existing}
    if hashes and hashes != {ctx.hash} and not force:
        raise ConfigError(f"{results} was produced by a different config ({sorted(hashes)}); "
                          "use a new output_dir or force")
    done = {(r["instance"], r["method"]) for r in existing}
    todo = []
    for pos in range(len(ctx.instances)):
        missing = [m for m in config.methods if (pos, m) not in done]
        if missing:
            todo.append((pos, missing))
    logger.info("%s: %d instances pending (%d records present)", out, len(todo), len(existing))

    def work(item):
        return instance_records(ctx, *item)

    with open(results, "a", encoding="utf-8") as fh:
        if config.workers > 1:
            with ThreadPoolExecutor(config.workers) as pool:
                batches = pool.map(work, todo)
                for (pos, _), recs in zip(todo, batches):
                    _write(fh, recs)
                    if progress:
                        progress(pos)
        else:
            for item in todo:
                _write(fh, work(item))
                if progress:
                    progress(item[0])
    write_reports([results], out, force=force)
    return results


def _write(fh, recs: Iterable[dict]) -> None:
    for rec in recs:
        fh.write(_dumps(rec) + "\n")
    fh.flush()


# -- reporting ----------------------------------------------------------------------

METRIC_ORDER = ("fa", "ra", "pgi", "pgu")


@dataclass
class Report:
    rows: list[dict]
    bad: list[dict]
    empty: bool = False

    def markdown(self) -> str:
        if self.empty:
            return "No results to report.\n"
        metrics = [m for m in METRIC_ORDER if any(m in r for r in self.rows)]
        head = ["run", "method", *(m.upper() for m in metrics), "n"]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for r in self.rows:
            cells = [r["run"], r["method"]]
            for m in metrics:
                v = r.get(m)
                cells.append("-" if not v or v["mean"] is None
                             else f"{v['mean']:.3f}±{v['se']:.3f}")
            cells.append(str(r["n"]))
            lines.append("| " + " | ".join(cells) + " |")
        lines += ["", "| run | method | bad replies |", "|---|---|---|"]
        lines += [f"| {b['run']} | {b['method']} | {b['bad_pct']} |" for b in self.bad]
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", "dataset", "model", "method", "metric", "mean", "se", "n", "n_bad"])
        for r in self.rows:
            for m in METRIC_ORDER:
                if m in r:
                    v = r[m]
                    w.writerow([r["run"], r["dataset"], r["model"], r["method"], m,
                                "" if v["mean"] is None else f"{v['mean']:.6f}",
                                "" if v["se"] is None else f"{v['se']:.6f}", v["n"], v["n_bad"]])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "bad_replies": self.bad, "empty": self.empty},
                          sort_keys=True, indent=2)


def pct(rate: float) -> str:
    return f"{round(100 * rate)}%"


def report(paths: Sequence[str | Path], force: bool = False) -> Report:
    """Aggregate AUC-over-k metrics per (run, method) across results files."""
    groups: dict[tuple, list[dict]] = {}
    evals = set()
    meta = {}
    for p in paths:
        p = Path(p)
        run = p.parent.name or str(p)
        cfg_path = p.parent / "config.yaml"
        info = {"dataset": "", "model": ""}
        if cfg_path.exists():
            raw = yaml.safe_load(cfg_path.read_text()) or {}
            info = {"dataset": raw.get("dataset", ""), "model": raw.get("model", "")}
        for rec in read_results(p):
            evals.add(rec.get("eval_hash"))
            groups.setdefault((run, rec["method"]), []).append(rec)
            meta[run] = info
    if len(evals) > 1 and not force:
        raise ConfigError(f"results come from incompatible evaluations {sorted(map(str, evals))}; "
                          "pass force to merge anyway")
    if not groups:
        return Report([], [], empty=True)
    rows, bad = [], []
    for (run, method), recs in groups.items():
        row = {"run": run, "method": method, **meta[run]}
        n_ok = sum(r["status"] == "ok" for r in recs)
        row["n"] = n_ok
        names = sorted({k for r in recs if r.get("auc") for k in r["auc"]})
        for name in names:
            rep = mt.aggregate([r["auc"][name] if r.get("auc") else None for r in recs])
            row[name] = {"mean": rep.mean, "se": rep.se, "n": rep.n, "n_bad": rep.n_bad}
        rows.append(row)
        rate = (len(recs) - n_ok) / len(recs)
        bad.append({"run": run, "method": method, "bad_rate": rate, "bad_pct": pct(rate)})
    return Report(rows, bad)


def write_reports(paths: Sequence[Path], out: Path, force: bool = False,
                  stem: str = "report") -> Report:
    rep = report(paths, force=force)
    (out / f"{stem}.json").write_text(rep.to_json() + "\n")
    (out / f"{stem}.csv").write_text(rep.csv())
    (out / f"{stem}.md").write_text(rep.markdown())
    return rep


# -- ablations ----------------------------------------------------------------------

def ablation_configs(config: ExperimentConfig, axis: str, values: Sequence | None = None
                     ) -> list[tuple[str, ExperimentConfig]]:
    if axis not in ABLATION_AXES:
        raise ConfigError(f"axis must be one of {ABLATION_AXES}")
    base = Path(config.output_dir)
    if axis == "format":
        values = values or ("raw-delta", "perturbed-sample")
        make = lambda v: replace(config, perturbation=replace(config.perturbation, format=v))
    elif axis == "cot":
        values = values or (True, False)
        make = lambda v: replace(config, prompt=replace(config.prompt, include_cot=_bool(v)))
    elif axis == "context":
        values = values or (True, False)
        make = lambda v: replace(config, prompt=replace(config.prompt, include_context=_bool(v)))
    elif axis == "n-icl":
        values = values or N_ICL_PRESETS["default"]
        for v in values:
            if int(v) > config.perturbation.n_x:
                raise ConfigError(f"n_icl={v} exceeds n_x={config.perturbation.n_x}")
        make = lambda v: replace(config, perturbation=replace(config.perturbation, n_icl=int(v)))
    else:
        if not values:
            raise ConfigError("llm-model axis needs explicit model names")
        make = lambda v: replace(config, llm=replace(config.llm, model=str(v)))
    out = []
    for v in values:
        label = f"{axis}={v}"
        try:
            cfg = make(v)
        except ValueError as exc:
            raise ConfigError(f"{label}: {exc}") from None
        out.append((label, replace(cfg, output_dir=str(base / label))))
    return out


def _bool(v) -> bool:
    if isinstance(v, str):
        if v.lower() in ("1", "true", "on", "yes"):
            return True
        if v.lower() in ("0", "false", "off", "no"):
            return False
        raise ConfigError(f"not a boolean: {v!r}")
    return bool(v)


def run_ablation(config: ExperimentConfig, axis: str, values: Sequence | None = None,
                 responder=None, transport=None) -> Report:
    runs = ablation_configs(config, axis, values)
    paths = [run_experiment(cfg, responder=responder, transport=transport) for _, cfg in runs]
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return write_reports(paths, out, stem=f"ablation_{axis}")
