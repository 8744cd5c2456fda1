"""Experiment orchestration: configs, resumable record store, sweeps and tables.

Config files are YAML mappings::

    name: base-erm
    suite:
      source: synthetic            # synthetic | path | cmnist | adapter
      synthetic: {n_per_env: 2000}
    shift: {kind: Base}
    algorithms: [ERM, IRM]
    hparams: {fixed: {}, space: {lr: [log_uniform, 1.0e-4, 1.0e-2]}}
    selection: {kind: training_domains, metric: auroc}
    seeds: {data_seed: 0, model_seed: 0, search_seed: 0}
    run: {steps: 1000, checkpoint_every: 100, batch_size: 128}
    search: {n_iters: 10, repeats: 5}
    output_dir: results/base-erm

Records are appended one JSON object per line to ``records.jsonl`` in the
output directory; each carries the config hash, algorithm, strategy,
repeat and iteration, which together form its resume key.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import fcntl
import hashlib
import io
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .envdata import (DEFAULT_FRACTIONS, EnvironmentSuite, SeedBundle, SyntheticConfig,
                      generate_synthetic_suite, load_suite)
from .evalmetrics import aggregate_runs, format_mean_std
from .exceptions import ConfigurationError, DGBenchError, RangeError
from .models import ModelSpec
from .objectives import ALGORITHMS, ORACLES
from .selection import RunRecord, RunSettings, SelectionStrategy, TrialSummary, random_search
from .shifts import (CMNIST_BASELINE, SHIFT_KINDS, ShiftPlan, ShiftReport, apply_shift,
                     generate_colored_mnist, load_mnist_digits, make_plan)

OUTPUT_ROOT_ENV = "DGBENCH_OUTPUT_ROOT"
SUITE_SOURCES = ("synthetic", "path", "cmnist", "adapter")
PENALIZED = ("IRM", "VREx", "RVP", "IGA", "CORAL")
UNAUG = "ERM Unaug"
TABLE_COLUMNS = ("OracleID", "OracleMerged", UNAUG, "ERM", "GroupDRO", "IRM", "VREx", "RVP",
                 "IGA", "CORAL", "MLDG")
CMNIST_DEFAULTS = {"n_train": 25_000, "n_test": 10_000, "p_test": 0.9, "mnist_path": None,
                   "downsample": 2, **CMNIST_BASELINE}


class ConfigValidationError(ConfigurationError):
    """Invalid experiment config; ``path`` names the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# Config -----------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    name: str
    suite: dict
    shift: dict
    algorithms: list
    selection: SelectionStrategy
    seeds: SeedBundle
    settings: RunSettings
    n_iters: int = 10
    repeats: int = 5
    fixed_hparams: dict = field(default_factory=dict)
    space: dict = field(default_factory=dict)
    unaugmented: bool = False
    output_dir: str = "results"

    def snapshot(self) -> dict:
        """Plain-data view with every default filled in."""
        return {
            "name": self.name,
            "suite": copy.deepcopy(self.suite),
            "shift": copy.deepcopy(self.shift),
            "algorithms": list(self.algorithms),
            "hparams": {"fixed": dict(self.fixed_hparams),
                        "space": {k: list(v) if isinstance(v, (list, tuple)) else v
                                  for k, v in self.space.items()}},
            "selection": {"kind": self.selection.kind, "metric": self.selection.metric},
            "seeds": self.seeds.to_dict(),
            "run": self.settings.to_dict(),
            "search": {"n_iters": self.n_iters, "repeats": self.repeats},
            "unaugmented": self.unaugmented,
            "output_dir": self.output_dir,
        }

    def config_hash(self) -> str:
        snap = self.snapshot()
        snap.pop("output_dir")
        snap.pop("name")
        blob = json.dumps(snap, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _section(raw: Mapping, key: str, default=None) -> dict:
    val = raw.get(key, default if default is not None else {})
    if val is None:
        val = {}
    if not isinstance(val, Mapping):
        raise ConfigValidationError(key, f"expected a mapping, got {type(val).__name__}")
    return dict(val)


def _int(d: Mapping, key: str, path: str, default: int, minimum: int = 0) -> int:
    v = d.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
        raise ConfigValidationError(f"{path}.{key}", f"expected an integer, got {v!r}")
    if v < minimum:
        raise ConfigValidationError(f"{path}.{key}", f"must be >= {minimum}, got {v}")
    return int(v)


def _parse_suite(raw: Mapping, base_dir: Path) -> dict:
    suite = _section(raw, "suite")
    if not suite:
        raise ConfigValidationError("suite", "missing suite source")
    source = suite.get("source")
    if source not in SUITE_SOURCES:
        raise ConfigValidationError("suite.source",
                                    f"unknown source {source!r}; valid: {SUITE_SOURCES}")
    if source == "synthetic":
        params = dict(suite.get("synthetic") or {})
        try:
            cfg = SyntheticConfig.from_dict(params)
        except TypeError as exc:
            raise ConfigValidationError("suite.synthetic", str(exc)) from None
        return {"source": source, "synthetic": cfg.to_dict()}
    if source == "path":
        if "path" not in suite:
            raise ConfigValidationError("suite.path", "missing")
        p = Path(suite["path"])
        p = p if p.is_absolute() else base_dir / p
        if not (p / "schema.json").exists():
            raise ConfigValidationError("suite.path", f"no serialized suite at {p}")
        return {"source": source, "path": str(p)}
    if source == "cmnist":
        params = {**CMNIST_DEFAULTS, **dict(suite.get("cmnist") or {})}
        unknown = set(params) - set(CMNIST_DEFAULTS)
        if unknown:
            raise ConfigValidationError(f"suite.cmnist.{sorted(unknown)[0]}", "unknown key")
        for k in ("eta", "beta", "delta", "p_test"):
            if not 0.0 <= float(params[k]) <= 1.0:
                raise ConfigValidationError(f"suite.cmnist.{k}",
                                            f"must lie in [0, 1], got {params[k]}")
        p1, p2 = params["beta"] + params["delta"] / 2, params["beta"] - params["delta"] / 2
        if not (0.0 <= p2 and p1 <= 1.0):
            raise ConfigValidationError("suite.cmnist.delta",
                                        "beta +/- delta/2 must stay inside [0, 1]")
        if params["mnist_path"] is not None and not Path(params["mnist_path"]).exists():
            raise ConfigValidationError("suite.cmnist.mnist_path",
                                        f"file not found: {params['mnist_path']}")
        return {"source": source, "cmnist": params}
    raise ConfigValidationError("suite.source",
                                "clinical adapters are interfaces only; no loader is bundled")


def _parse_shift(raw: Mapping, suite_source: str) -> dict:
    shift = _section(raw, "shift", {"kind": "Base"})
    kind = shift.get("kind", "Base")
    if kind not in SHIFT_KINDS:
        raise ConfigValidationError("shift.kind", f"unknown kind {kind!r}; valid: {SHIFT_KINDS}")
    if suite_source == "cmnist" and kind not in ("Base", "ColoredMNIST"):
        raise ConfigValidationError("shift.kind", "Colored MNIST suites take no further shift")
    if kind == "ColoredMNIST" and suite_source != "cmnist":
        raise ConfigValidationError("shift.kind",
                                    "ColoredMNIST shifts go with suite.source: cmnist")
    params = {k: v for k, v in shift.items() if k != "kind"}
    if kind in ("BiasSampUnobs", "BiasSampObs") and "targets" in params:
        for env, pair in params["targets"].items():
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise ConfigValidationError(f"shift.targets.{env}", "expected [mu1, mu0]")
            for j, name in enumerate(("mu1", "mu0")):
                if not 0.0 < float(pair[j]) < 1.0:
                    raise RangeError(
                        f"shift.targets.{env}.{name}: must lie strictly inside (0, 1), "
                        f"got {pair[j]}")
    if kind == "CorrLabel":
        beta, delta = params.get("beta", 0.3), params.get("delta", 0.1)
        for key, v in (("beta", beta - delta), ("beta", beta + delta),
                       ("val", params.get("val", 0.5)), ("test", params.get("test", 0.9))):
            if not 0.0 <= v <= 1.0:
                raise RangeError(f"shift.{key}: flip probability {v} outside [0, 1]")
    if kind == "CorrNoise" and "sigma" in params and not float(params["sigma"]) > 0:
        raise RangeError(f"shift.sigma: must be positive, got {params['sigma']}")
    return {"kind": kind, **params}


def set_dotted(raw: dict, dotted: str, value) -> None:
    """Set ``raw[a][b][c] = value`` for ``dotted == 'a.b.c'``."""
    keys = dotted.split(".")
    node = raw
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def parse_config(source: str | Path | Mapping,
                 overrides: Mapping[str, object] | None = None) -> ExperimentConfig:
    """Validate a YAML file (or an already-loaded mapping) into a config.

    ``overrides`` maps dotted key paths to values applied before validation.
    """
    if isinstance(source, Mapping):
        raw, base_dir = copy.deepcopy(dict(source)), Path.cwd()
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigValidationError("<file>", f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigValidationError("<file>", f"malformed YAML: {exc}") from None
        base_dir = path.parent
    if not isinstance(raw, Mapping):
        raise ConfigValidationError("<root>", "config must be a mapping")
    raw = dict(raw)
    for k, v in (overrides or {}).items():
        set_dotted(raw, k, v)
    known = {"name", "suite", "shift", "algorithm", "algorithms", "hparams", "selection",
             "seeds", "run", "search", "unaugmented", "output_dir"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigValidationError(sorted(unknown)[0], f"unknown key; valid keys: {sorted(known)}")

    suite = _parse_suite(raw, base_dir)
    shift = _parse_shift(raw, suite["source"])

    algos = raw.get("algorithms", raw.get("algorithm", ["ERM"]))
    if isinstance(algos, str):
        algos = [algos]
    valid = ALGORITHMS + ORACLES
    for i, a in enumerate(algos):
        if a not in valid:
            raise ConfigValidationError(f"algorithms[{i}]",
                                        f"unknown algorithm {a!r}; valid ids: {list(valid)}")
    if not algos:
        raise ConfigValidationError("algorithms", "at least one algorithm is required")

    hp = _section(raw, "hparams")
    fixed = dict(hp.get("fixed") or {})
    space = dict(hp.get("space") or {})
    for k, v in space.items():
        if isinstance(v, (list, tuple)) and v and v[0] not in (
                "log_uniform", "uniform", "int", "choice", "fixed", "anneal"):
            raise ConfigValidationError(f"hparams.space.{k}", f"unknown distribution {v[0]!r}")
    if "lr" in fixed and not float(fixed["lr"]) > 0:
        raise RangeError(f"hparams.fixed.lr: must be positive, got {fixed['lr']}")

    sel = _section(raw, "selection")
    try:
        selection = SelectionStrategy(sel.get("kind", "training_domains"),
                                      sel.get("metric", "accuracy" if suite["source"] == "cmnist"
                                              else "auroc"))
    except ConfigurationError as exc:
        raise ConfigValidationError("selection", str(exc)) from None

    sd = _section(raw, "seeds")
    seeds = SeedBundle(_int(sd, "data_seed", "seeds", 0), _int(sd, "model_seed", "seeds", 0),
                       _int(sd, "search_seed", "seeds", 0))

    run = _section(raw, "run")
    model = dict(run.pop("model", {}) or {})
    try:
        spec = ModelSpec.from_dict(model)
    except (TypeError, ConfigurationError) as exc:
        raise ConfigValidationError("run.model", str(exc)) from None
    fractions = run.get("fractions", DEFAULT_FRACTIONS)
    fr_list = fractions.values() if isinstance(fractions, Mapping) else [fractions]
    for fr in fr_list:
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigValidationError("run.fractions",
                                        f"need three non-negative fractions summing to 1, got {fr}")
    try:
        settings = RunSettings(
            steps=_int(run, "steps", "run", 1000),
            checkpoint_every=_int(run, "checkpoint_every", "run", 100, minimum=1),
            batch_size=_int(run, "batch_size", "run", 128, minimum=1),
            model=spec,
            fractions=({k: tuple(v) for k, v in fractions.items()}
                       if isinstance(fractions, Mapping) else tuple(fractions)),
            standardize=bool(run.get("standardize", suite["source"] != "cmnist")),
            threshold_on=run.get("threshold_on", "selection"),
        )
    except ConfigValidationError:
        raise
    except ConfigurationError as exc:
        raise ConfigValidationError("run", str(exc)) from None
    unknown = set(run) - {"steps", "checkpoint_every", "batch_size", "fractions",
                          "standardize", "threshold_on"}
    if unknown:
        raise ConfigValidationError(f"run.{sorted(unknown)[0]}", "unknown key")

    search = _section(raw, "search")
    out = raw.get("output_dir")
    if out is None:
        out = str(Path(os.environ.get(OUTPUT_ROOT_ENV, "results")) / raw.get("name", "experiment"))
    return ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        suite=suite, shift=shift, algorithms=list(algos), selection=selection, seeds=seeds,
        settings=settings,
        n_iters=_int(search, "n_iters", "search", 10, minimum=1),
        repeats=_int(search, "repeats", "search", 5, minimum=1),
        fixed_hparams=fixed, space=space,
        unaugmented=bool(raw.get("unaugmented", False)),
        output_dir=str(out),
    )


def config_from_snapshot(snapshot: Mapping) -> ExperimentConfig:
    """Inverse of :meth:`ExperimentConfig.snapshot`."""
    return parse_config(snapshot)


# Suite construction ---------------------------------------------------------------

def build_suite(config: ExperimentConfig) -> tuple[EnvironmentSuite, ShiftReport, ShiftPlan]:
    """Generate or load the suite and apply the configured shift."""
    src = config.suite
    seeds = config.seeds
    if src["source"] == "synthetic":
        cfg = SyntheticConfig.from_dict(src["synthetic"])
        suite = generate_synthetic_suite(cfg, np.random.SeedSequence([seeds.data_seed, 0]))
    elif src["source"] == "path":
        suite = load_suite(src["path"])
    elif src["source"] == "cmnist":
        p = src["cmnist"]
        images, digits = load_mnist_digits(p["mnist_path"], p["downsample"])
        suite, report = generate_colored_mnist(
            p["eta"], p["beta"], p["delta"], images, digits,
            rng=np.random.SeedSequence([seeds.data_seed, 0]),
            n_train=p["n_train"], n_test=p["n_test"], p_test=p["p_test"])
        plan = make_plan("ColoredMNIST", eta=p["eta"], beta=p["beta"], delta=p["delta"])
        return suite.with_seeds(seeds), report, plan
    else:  # pragma: no cover - rejected by parse_config
        raise ConfigurationError("no clinical adapter is bundled")
    suite = suite.with_seeds(seeds)
    shift = dict(config.shift)
    kind = shift.pop("kind")
    if kind in ("BiasSampUnobs", "BiasSampObs") and "targets" in shift:
        shift["targets"] = {k: tuple(v) for k, v in shift["targets"].items()}
    plan = make_plan(kind, suite, **shift)
    shifted, report = apply_shift(suite, plan, np.random.SeedSequence([seeds.data_seed, 1]))
    return shifted, report, plan


# Record store ----------------------------------------------------------------------

class RecordStore:
    """Append-only JSON-lines file; each append is one locked write."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: Mapping) -> None:
        line = json.dumps(record, sort_keys=True, default=_json_default) + "\n"
        with open(self.path, "a", encoding="utf-8") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def load(self) -> list[dict]:
        if not self.path.exists():
            return []
        out = []
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                warnings.warn(f"skipping truncated record in {self.path}", RuntimeWarning,
                              stacklevel=2)
        return out


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def record_key(config_hash: str, label: str, strategy_kind: str, repeat: int,
               iteration: int) -> str:
    return f"{config_hash}/{label}/{strategy_kind}/{repeat}/{iteration}"


# Experiment execution -------------------------------------------------------------------

@dataclass
class ExperimentResult:
    config: ExperimentConfig
    summaries: dict
    shift_report: ShiftReport
    n_failed_runs: int = 0

    def to_dict(self) -> dict:
        return {
            "config": self.config.snapshot(),
            "config_hash": self.config.config_hash(),
            "shift_report": self.shift_report.to_dict(),
            "n_failed_runs": self.n_failed_runs,
            "summaries": {k: s.to_dict() for k, s in self.summaries.items()},
        }


def _search(config: ExperimentConfig, suite: EnvironmentSuite, label: str, algorithm: str,
            store: RecordStore | None, existing: Mapping, chash: str, report: ShiftReport,
            fixed: Mapping | None = None) -> TrialSummary:
    strategy = config.selection
    snap = config.snapshot()

    def lookup(r, i, hp):
        d = existing.get(record_key(chash, label, strategy.kind, r, i))
        return RunRecord.from_dict(d) if d is not None else None

    def on_record(rec: RunRecord):
        if store is None:
            return
        d = rec.to_dict()
        d.update(key=record_key(chash, label, strategy.kind, rec.repeat, rec.iteration),
                 config_hash=chash, label=label, config=snap,
                 shift_report=report.to_dict(), unrealistic_selection=strategy.unrealistic)
        store.append(d)

    return random_search(suite, algorithm, strategy, config.settings, config.seeds,
                         n_iters=config.n_iters, repeats=config.repeats,
                         space_overrides=config.space,
                         fixed_hparams={**config.fixed_hparams, **(fixed or {})},
                         on_record=on_record, lookup=lookup)


def run_experiment(config: ExperimentConfig, store: RecordStore | None = None,
                   persist: bool = True) -> ExperimentResult:
    """Build the suite, apply the shift, search every algorithm, persist records.

    Completed runs already present in the store are reused, so an
    interrupted experiment resumes where it stopped.
    """
    out = Path(config.output_dir)
    if persist and store is None:
        store = RecordStore(out / "records.jsonl")
    existing = {d["key"]: d for d in store.load()} if store is not None else {}
    chash = config.config_hash()
    suite, report, _ = build_suite(config)
    summaries = {}
    for algo in config.algorithms:
        summaries[algo] = _search(config, suite, algo, algo, store, existing, chash, report)
    if config.unaugmented and config.shift["kind"] != "Base":
        base_cfg = config.replace(shift={"kind": "Base"})
        base_suite, base_report, _ = build_suite(base_cfg)
        summaries[UNAUG] = _search(base_cfg, base_suite, UNAUG, "ERM", store, existing, chash,
                                   base_report)
    n_failed = sum(1 for s in summaries.values() for r in s.all_records if r.status == "failed")
    result = ExperimentResult(config, summaries, report, n_failed)
    if persist:
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(
            json.dumps(result.to_dict(), indent=2, default=_json_default))
    return result


# Sweeps -----------------------------------------------------------------------------

def sweep_lambda(config: ExperimentConfig, lambdas: Sequence[float],
                 algorithms: Sequence[str] = PENALIZED, metric: str = "auroc",
                 store: RecordStore | None = None) -> list[dict]:
    """Test metric versus fixed penalty weight for each penalized method.

    The weight is applied from the first step (no annealing); the other
    hyperparameters are still searched.
    """
    for a in algorithms:
        if a not in PENALIZED:
            raise ConfigurationError(f"{a!r} has no penalty weight; choose from {PENALIZED}")
    existing = {d["key"]: d for d in store.load()} if store is not None else {}
    suite, report, _ = build_suite(config)
    chash = config.config_hash()
    rows = []
    for algo in algorithms:
        for lam in sorted(float(x) for x in lambdas):
            label = f"{algo}@lambda={lam:g}"
            summ = _search(config, suite, label, algo, store, existing, chash, report,
                           fixed={"lambda": lam, "anneal_steps": 0})
            mean, std = summ.aggregate(metric)
            rows.append({"method": algo, "lambda": lam, "metric": metric, "mean": mean,
                         "std": std, "n": len(summ.values(metric)),
                         "values": summ.values(metric)})
    return rows


def sweep_cmnist(config: ExperimentConfig, param: str, grid: Sequence[float],
                 strategies: Sequence[str] = ("training_domains", "test_domain"),
                 store: RecordStore | None = None, metric: str = "accuracy") -> list[dict]:
    """Vary one Colored MNIST parameter with the others at their baseline.

    The baseline value is always included in the grid.
    """
    if config.suite["source"] != "cmnist":
        raise ConfigurationError("sweep_cmnist needs suite.source: cmnist")
    if param not in CMNIST_BASELINE:
        raise ConfigurationError(f"param must be one of {tuple(CMNIST_BASELINE)}")
    grid = sorted(set(float(g) for g in grid) | {CMNIST_BASELINE[param]})
    existing = {d["key"]: d for d in store.load()} if store is not None else {}
    rows = []
    for value in grid:
        cm = {**config.suite["cmnist"], **CMNIST_BASELINE, param: value}
        point = config.replace(suite={"source": "cmnist", "cmnist": cm})
        suite, report, _ = build_suite(point)
        for kind in strategies:
            cfg = point.replace(selection=SelectionStrategy(kind, config.selection.metric))
            chash = cfg.config_hash()
            for algo in cfg.algorithms:
                summ = _search(cfg, suite, algo, algo, store, existing, chash, report)
                mean, std = summ.aggregate(metric)
                rows.append({"param": param, "value": value, "strategy": kind,
                             "unrealistic": kind == "test_domain", "method": algo,
                             "metric": metric, "mean": mean, "std": std,
                             "values": summ.values(metric),
                             "test_reads_before_final": sum(
                                 r.test_reads_before_final for r in summ.all_records)})
    return rows


# Output ------------------------------------------------------------------------------

def summaries_to_rows(setting: str, summaries: Mapping[str, TrialSummary],
                      metric: str = "auroc") -> list[dict]:
    rows = []
    for method, s in summaries.items():
        rows.append({"setting": setting, "method": method, "metric": metric,
                     "values": s.values(metric),
                     "unrealistic": bool(s.strategy.get("unrealistic"))})
    return rows


def rows_from_records(records: Iterable[Mapping], metric: str = "auroc") -> list[dict]:
    """Re-aggregate stored run records: best selection score per (setting, method, repeat)."""
    best: dict = {}
    for d in records:
        if d.get("status") != "ok" or d.get("selection_score") is None:
            continue
        setting = d.get("config", {}).get("name", d.get("config_hash", "?"))
        key = (setting, d["label"], d["strategy"]["kind"], d["repeat"])
        if key not in best or d["selection_score"] > best[key]["selection_score"]:
            best[key] = d
    grouped: dict = {}
    for (setting, label, kind, _), d in sorted(best.items(), key=lambda kv: kv[0]):
        v = d.get("test_metrics", {}).get(metric)
        g = grouped.setdefault((setting, label, kind), [])
        if v is not None:
            g.append(v)
    return [{"setting": s if k != "test_domain" else f"{s} [test-domain selection]",
             "method": m, "metric": metric, "values": v, "unrealistic": k == "test_domain"}
            for (s, m, k), v in grouped.items()]


def emit_table(rows: Sequence[Mapping], layout: str = "base") -> str:
    """Markdown table with settings as rows and methods as columns.

    ``layout='base'`` has 10 method columns; ``'augmented'`` adds ERM Unaug.
    The best non-oracle mean per row is marked with ``*``.
    """
    if layout not in ("base", "augmented"):
        raise ConfigurationError("layout must be 'base' or 'augmented'")
    cols = [c for c in TABLE_COLUMNS if layout == "augmented" or c != UNAUG]
    lines = ["| Setting | " + " | ".join(cols) + " |",
             "|" + "---|" * (len(cols) + 1)]
    settings: dict = {}
    for r in rows:
        settings.setdefault(r["setting"], {})[r["method"]] = r["values"]
    for setting, per_method in settings.items():
        stats = {}
        for m in cols:
            vals = per_method.get(m) or []
            if vals:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    stats[m] = aggregate_runs(vals)
        candidates = {m: s[0] for m, s in stats.items() if m not in ORACLES and m != UNAUG
                      and math.isfinite(s[0])}
        best = max(candidates, key=candidates.get) if candidates else None
        cells = []
        for m in cols:
            if m not in stats:
                cells.append("")
                continue
            cell = format_mean_std(*stats[m])
            cells.append(f"*{cell}*" if m == best else cell)
        lines.append(f"| {setting} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_plot_data(rows: Sequence[Mapping], path: str | Path | None = None) -> str:
    """Columnar CSV of sweep rows (list-valued fields dropped)."""
    rows = [{k: v for k, v in r.items() if not isinstance(v, (list, dict))} for r in rows]
    fields: list = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


def exit_code(result: ExperimentResult | None = None, failed: int = 0) -> int:
    n = failed + (result.n_failed_runs if result is not None else 0)
    return 2 if n else 0


__all__ = [
    "ConfigValidationError", "ExperimentConfig", "ExperimentResult", "RecordStore",
    "build_suite", "config_from_snapshot", "emit_plot_data", "emit_table", "exit_code",
    "parse_config", "record_key", "rows_from_records", "run_experiment", "set_dotted",
    "summaries_to_rows", "sweep_cmnist", "sweep_lambda", "DGBenchError",
]
