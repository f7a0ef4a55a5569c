"""Command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import data as data_mod
from . import models as md
from .llm import AuthError, CacheMiss, LlmError, TransportError, verify_cache
from .runner import (ABLATION_AXES, N_ICL_PRESETS, ConfigError, ExperimentConfig,
                     instance_records, prepare, report, run_ablation, run_experiment)

EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_TRANSPORT = 1, 2, 3, 4


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = {}
    if getattr(args, "dataset", None):
        over["dataset"] = args.dataset
    if getattr(args, "model", None):
        over["model"] = args.model
    if getattr(args, "output_dir", None):
        over["output_dir"] = args.output_dir
    if getattr(args, "workers", None):
        over["workers"] = args.workers
    if getattr(args, "instances", None):
        over["n_instances"] = args.instances
    if getattr(args, "methods", None):
        over["methods"] = tuple(args.methods.split(","))
    llm = cfg.llm
    if getattr(args, "llm_mode", None):
        llm = replace(llm, mode=args.llm_mode)
    if getattr(args, "cache", None):
        llm = replace(llm, cache_path=args.cache)
    if over or llm is not cfg.llm:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), **over, "llm": llm.__dict__})
    return cfg


def cmd_train(args) -> int:
    if data_mod.is_text_dataset(args.dataset):
        ds = data_mod.load_text_dataset(args.dataset, seed=args.seed)
        model = md.train_text(ds, replace(md.default_training_config("bow-text"), seed=args.seed))
    else:
        ds = data_mod.load_dataset(args.dataset, seed=args.seed)
        hyper = replace(md.default_training_config(args.model), seed=args.seed)
        model = md.train(ds, args.model, hyper)
    md.save_model(model, args.out)
    print(json.dumps({"dataset": args.dataset, "model": args.model, "path": args.out,
                      "dataset_hash": ds.dataset_hash, **model.info}, sort_keys=True))
    return 0


def cmd_explain(args) -> int:
    cfg = _load_config(args)
    ctx = prepare(cfg)
    if not 0 <= args.instance < len(ctx.instances):
        raise ConfigError(f"instance must be in 0..{len(ctx.instances) - 1}")
    for rec in instance_records(ctx, args.instance, cfg.methods):
        print(json.dumps(rec, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    path = run_experiment(cfg, force=args.force)
    print((path.parent / "report.md").read_text(), end="")
    print(f"results: {path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    values = args.values.split(",") if args.values else None
    if args.axis == "n-icl" and args.preset:
        values = N_ICL_PRESETS[args.preset]
    rep = run_ablation(cfg, args.axis, values)
    print(rep.markdown(), end="")
    return 0


def cmd_report(args) -> int:
    rep = report(args.results, force=args.force)
    text = rep.csv() if args.format == "csv" else rep.markdown()
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return 0


def cmd_cache(args) -> int:
    summary = verify_cache(args.path)
    print(json.dumps(summary, sort_keys=True))
    return 0 if summary["ok"] else EXIT_OTHER


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icexplain", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train and checkpoint a model")
    t.add_argument("--dataset", required=True)
    t.add_argument("--model", default="lr", choices=["lr", "ann-l", "ann-xl", "bow-text"])
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    def common(sp):
        sp.add_argument("--config", help="YAML or JSON experiment config")
        sp.add_argument("--dataset")
        sp.add_argument("--model")
        sp.add_argument("--methods", help="comma-separated method list")
        sp.add_argument("--instances", type=int)
        sp.add_argument("--output-dir")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--llm-mode", choices=["live", "record", "replay", "mock"])
        sp.add_argument("--cache", help="transcript cache (JSON lines)")

    e = sub.add_parser("explain", help="explain one test instance and print records")
    common(e)
    e.add_argument("--instance", type=int, default=0)
    e.set_defaults(func=cmd_explain)

    ev = sub.add_parser("evaluate", help="run a full experiment")
    common(ev)
    ev.add_argument("--force", action="store_true", help="append to results from another config")
    ev.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="sweep one configuration axis")
    common(a)
    a.add_argument("--axis", required=True, choices=ABLATION_AXES)
    a.add_argument("--values", help="comma-separated axis values")
    a.add_argument("--preset", choices=sorted(N_ICL_PRESETS), help="n-icl value preset")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="tabulate results files")
    r.add_argument("results", nargs="+")
    r.add_argument("--format", choices=["md", "csv"], default="md")
    r.add_argument("--out")
    r.add_argument("--force", action="store_true", help="merge incompatible evaluations")
    r.set_defaults(func=cmd_report)

    c = sub.add_parser("cache", help="transcript cache utilities")
    csub = c.add_subparsers(dest="cache_command", required=True)
    cv = csub.add_parser("verify", help="check cache keys against stored prompts")
    cv.add_argument("path")
    cv.set_defaults(func=cmd_cache)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except data_mod.DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TransportError, AuthError, CacheMiss) as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (LlmError, md.ModelError, md.TrainingError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
