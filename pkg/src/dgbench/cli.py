"""Command line entry point: ``dgbench {generate,shift,train,search,sweep,report}``.

Exit codes: 0 success, 1 validation error, 2 finished with failed runs.
The output root defaults to ``$DGBENCH_OUTPUT_ROOT`` (else ``results``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .envdata import SyntheticConfig, generate_synthetic_suite, load_suite, save_suite
from .exceptions import DGBenchError
from .harness import (OUTPUT_ROOT_ENV, PENALIZED, RecordStore, build_suite, emit_plot_data,
                      emit_table, exit_code, parse_config, rows_from_records, run_experiment,
                      sweep_cmnist, sweep_lambda)
from .shifts import SHIFT_KINDS, apply_shift, make_plan


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "results"))


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise DGBenchError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


def _load_config(args, extra: dict | None = None):
    overrides = {**_overrides(args.set), **(extra or {})}
    if getattr(args, "output_dir", None):
        overrides["output_dir"] = args.output_dir
    return parse_config(args.config, overrides)


def cmd_generate(args) -> int:
    out = Path(args.out) if args.out else _output_root() / "suite"
    if args.config:
        cfg = _load_config(args, {"shift": {"kind": "Base"}})
        suite, _, _ = build_suite(cfg)
    else:
        suite = generate_synthetic_suite(SyntheticConfig(n_per_env=args.n_per_env),
                                         np.random.default_rng(args.seed))
    save_suite(suite, out)
    print(f"wrote {len(suite.environments)} environments to {out}")
    return 0


def cmd_shift(args) -> int:
    suite = load_suite(args.suite)
    params = _overrides(args.param)
    if "targets" in params:
        params["targets"] = {k: tuple(v) for k, v in params["targets"].items()}
    plan = make_plan(args.kind, suite, **params)
    shifted, report = apply_shift(suite, plan, np.random.default_rng(args.seed))
    out = Path(args.out)
    save_suite(shifted, out)
    (out / "shift_report.json").write_text(json.dumps(
        {"plan": plan.to_dict(), "report": report.to_dict()}, indent=2, default=str))
    print(f"applied {args.kind} to {len(shifted.environments)} environments; wrote {out}")
    return 0


def _print_summaries(result) -> None:
    metric = result.config.selection.metric
    metric = "auroc" if metric == "mean_auroc" else metric
    flag = " [unrealistic: test-domain selection]" if result.config.selection.unrealistic else ""
    for name, s in result.summaries.items():
        print(f"{name:14s} {metric} {s.cell(metric)}{flag}")


def cmd_train(args) -> int:
    extra = {"search": {"n_iters": 1, "repeats": 1}}
    if args.algorithm:
        extra["algorithms"] = [args.algorithm]
    cfg = _load_config(args, extra)
    result = run_experiment(cfg)
    _print_summaries(result)
    return exit_code(result)


def cmd_search(args) -> int:
    cfg = _load_config(args)
    result = run_experiment(cfg)
    _print_summaries(result)
    print(f"records: {Path(cfg.output_dir) / 'records.jsonl'}")
    return exit_code(result)


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    store = RecordStore(Path(cfg.output_dir) / "records.jsonl")
    grid = [float(g) for g in args.grid]
    if args.kind == "lambda":
        rows = sweep_lambda(cfg, grid, args.methods or PENALIZED, store=store,
                            metric=args.metric or "auroc")
    else:
        rows = sweep_cmnist(cfg, args.kind, grid, store=store,
                            metric=args.metric or "accuracy")
    path = Path(cfg.output_dir) / f"sweep_{args.kind}.csv"
    emit_plot_data(rows, path)
    print(f"wrote {len(rows)} series points to {path}")
    failed = sum(1 for d in store.load() if d.get("status") == "failed")
    return 2 if failed else 0


def cmd_report(args) -> int:
    records = []
    for p in args.records:
        records += RecordStore(p).load()
    rows = rows_from_records(records, args.metric)
    text = emit_table(rows, args.layout)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgbench", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=True):
        sp.add_argument("--config", required=required, help="YAML experiment config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (dotted path, YAML value)")
        sp.add_argument("--output-dir", help="override output_dir")

    g = sub.add_parser("generate", help="write an unshifted suite to disk")
    with_config(g, required=False)
    g.add_argument("--out")
    g.add_argument("--n-per-env", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("shift", help="apply a synthetic shift to a saved suite")
    s.add_argument("--suite", required=True)
    s.add_argument("--kind", required=True, choices=[k for k in SHIFT_KINDS
                                                     if k != "ColoredMNIST"])
    s.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="plan parameter, e.g. beta=0.3 or targets={A: [0.8, 0.1]}")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_shift)

    t = sub.add_parser("train", help="one run with fixed hyperparameters (hparams.fixed)")
    with_config(t)
    t.add_argument("--algorithm")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("search", help="random search for every configured algorithm")
    with_config(r)
    r.set_defaults(func=cmd_search)

    w = sub.add_parser("sweep", help="penalty-weight or Colored MNIST parameter sweep")
    with_config(w)
    w.add_argument("--kind", required=True, choices=["lambda", "eta", "beta", "delta"])
    w.add_argument("--grid", nargs="+", required=True)
    w.add_argument("--methods", nargs="*")
    w.add_argument("--metric")
    w.set_defaults(func=cmd_sweep)

    o = sub.add_parser("report", help="aggregate stored records into a table")
    o.add_argument("records", nargs="+", help="records.jsonl files")
    o.add_argument("--metric", default="auroc")
    o.add_argument("--layout", choices=["base", "augmented"], default="base")
    o.add_argument("--out")
    o.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DGBenchError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
