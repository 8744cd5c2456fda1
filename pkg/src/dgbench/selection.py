"""Model selection strategies, oracle baselines and the random-search protocol.

Every data read during a run goes through :class:`AuditedData`, which logs
the environment, split, role and phase. Runs under ``training_domains`` or
``validation_domain`` selection must show no test-role read before the
``final`` phase.
"""
from __future__ import annotations

import dataclasses
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .envdata import (DEFAULT_FRACTIONS, EnvironmentSuite, SeedBundle, SuiteStandardizer,
                      apply_standardizer, fit_standardizer, split_suite)
from .evalmetrics import (accuracy, aggregate_runs, auroc, fairness_report, format_mean_std,
                          max_f1_threshold, mean_auroc_multilabel)
from .exceptions import ConfigurationError, UndefinedMetricError
from .models import (ModelSpec, OptimizerConfig, TensorSet, build_model, concat_tensor_sets,
                     predict_proba, to_tensors, train_model)
from .objectives import ALGORITHMS, ORACLES, make_objective, sample_hparams, search_space

STRATEGY_KINDS = ("training_domains", "validation_domain", "test_domain")
METRICS = ("auroc", "mean_auroc", "accuracy")
PHASES = ("train", "select", "final")
# hyperparameters that reshape the model rather than the objective
ARCH_KEYS = ("hidden_sizes", "dropout", "gru_hidden", "gru_layers", "embedding_dim")


@dataclass(frozen=True)
class SelectionStrategy:
    kind: str = "training_domains"
    metric: str = "auroc"

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigurationError(
                f"unknown selection strategy {self.kind!r}; valid: {STRATEGY_KINDS}")
        if self.metric not in METRICS:
            raise ConfigurationError(f"unknown selection metric {self.metric!r}; valid: {METRICS}")

    @property
    def unrealistic(self) -> bool:
        """Selecting on test-environment data is not possible in deployment."""
        return self.kind == "test_domain"

    def validate(self, suite: EnvironmentSuite) -> None:
        if self.kind == "validation_domain" and suite.validation_name is None:
            raise ConfigurationError(
                "validation_domain selection needs an environment with the validation role")

    def to_dict(self) -> dict:
        return {**dataclasses.asdict(self), "unrealistic": self.unrealistic}


# Access audit ---------------------------------------------------------------

@dataclass
class AccessLog:
    entries: list = field(default_factory=list)

    def record(self, env: str, split: str, role: str, phase: str) -> None:
        self.entries.append({"env": env, "split": split, "role": role, "phase": phase})

    def reads(self, role: str | None = None, phase: str | None = None) -> list[dict]:
        return [e for e in self.entries
                if (role is None or e["role"] == role) and (phase is None or e["phase"] == phase)]

    def test_reads_before_final(self) -> list[dict]:
        return [e for e in self.entries if e["role"] == "test" and e["phase"] != "final"]

    def summary(self) -> list[dict]:
        """Distinct (env, split, role, phase) tuples in first-access order."""
        seen, out = set(), []
        for e in self.entries:
            key = tuple(e.values())
            if key not in seen:
                seen.add(key)
                out.append(e)
        return out


class AuditedData:
    """Split suite with lazily standardized, cached tensors and an access log.

    The standardizer is fitted on the train splits of the training-role
    environments only, and applied to other environments on first access.
    """

    def __init__(self, suite: EnvironmentSuite, standardize: bool = True,
                 log: AccessLog | None = None, fit_roles: Sequence[str] = ("train",)):
        self.suite = suite
        self.log = log if log is not None else AccessLog()
        self._standardizer: SuiteStandardizer | None = None
        if standardize:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                self._standardizer = fit_standardizer(suite, on_roles=fit_roles)
            for name in suite.names:
                if suite.roles[name] in fit_roles:
                    self.log.record(name, "train", suite.roles[name], "train")
        self._cache: dict = {}

    def with_log(self, log: AccessLog) -> "AuditedData":
        """Same data and cache, fresh log (one log per run)."""
        other = object.__new__(AuditedData)
        other.suite, other.log = self.suite, log
        other._standardizer, other._cache = self._standardizer, self._cache
        return other

    def role(self, name: str) -> str:
        return self.suite.roles[name]

    def get(self, name: str, split: str | None, phase: str) -> TensorSet:
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        self.log.record(name, split or "all", self.role(name), phase)
        key = (name, split)
        if key not in self._cache:
            env = self.suite[name]
            if self._standardizer is not None:
                env = apply_standardizer(self._standardizer, env)
            self._cache[key] = to_tensors(env, split)
        return self._cache[key]


# Selection data and scores ------------------------------------------------------

def _metric_value(metric: str, scores: np.ndarray, labels: np.ndarray) -> float:
    if metric == "accuracy":
        return accuracy(scores, labels)
    if metric == "mean_auroc" or labels.ndim == 2 and labels.shape[1] > 1:
        return mean_auroc_multilabel(scores, labels)[0]
    return auroc(scores, labels)


def _labels(ts: TensorSet) -> np.ndarray:
    y = ts.y.numpy().astype(np.int64)
    return y[:, 0] if y.shape[1] == 1 else y


def selection_set(data: AuditedData, strategy: SelectionStrategy,
                  algorithm: str = "ERM") -> TensorSet:
    """Held-out data the strategy scores checkpoints on.

    Oracles select on validation splits of the environments they train on.
    """
    suite = data.suite
    strategy.validate(suite)
    if algorithm == "OracleID":
        names, split = [suite.test_name], "val"
    elif algorithm == "OracleMerged":
        names, split = suite.names, "val"
    elif strategy.kind == "training_domains":
        names, split = suite.train_names, "val"
    elif strategy.kind == "validation_domain":
        names, split = [suite.validation_name], None
    else:
        names, split = [suite.test_name], "val"
    sets = []
    for n in names:
        if split is not None and split not in suite[n].splits:
            raise ConfigurationError(f"environment {n!r} has no {split!r} split")
        sets.append(data.get(n, split, "select"))
    if sum(len(s) for s in sets) == 0:
        raise ConfigurationError(f"selection data for strategy {strategy.kind!r} is empty")
    return sets[0] if len(sets) == 1 else concat_tensor_sets(sets, "selection")


def selection_score(model, selection: TensorSet, strategy: SelectionStrategy) -> float:
    scores = predict_proba(model, selection.inputs)
    try:
        return _metric_value(strategy.metric, scores, _labels(selection))
    except UndefinedMetricError:
        return float("nan")


def training_sets(data: AuditedData, algorithm: str) -> list[TensorSet]:
    suite = data.suite
    if algorithm == "OracleID":
        if "train" not in suite[suite.test_name].splits or \
                len(suite[suite.test_name].splits["train"]) == 0:
            raise ConfigurationError("OracleID needs a non-empty train split in the test environment")
        return [data.get(suite.test_name, "train", "train")]
    if algorithm == "OracleMerged":
        return [concat_tensor_sets([data.get(n, "train", "train") for n in suite.names], "merged")]
    return [data.get(n, "train", "train") for n in suite.train_names]


# Single run --------------------------------------------------------------------

@dataclass
class RunSettings:
    """Everything about a run that is not searched over."""

    steps: int = 1000
    checkpoint_every: int = 100
    batch_size: int = 128
    model: ModelSpec = field(default_factory=ModelSpec)
    fractions: tuple | dict = DEFAULT_FRACTIONS
    standardize: bool = True
    threshold_on: str = "selection"  # or "test" (reproduction only)

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigurationError("steps must be non-negative")
        if self.checkpoint_every <= 0:
            raise ConfigurationError("checkpoint_every must be positive")
        if self.threshold_on not in ("selection", "test"):
            raise ConfigurationError("threshold_on must be 'selection' or 'test'")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        d["fractions"] = ({k: list(v) for k, v in self.fractions.items()}
                          if isinstance(self.fractions, Mapping) else list(self.fractions))
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunSettings":
        d = dict(d)
        if "model" in d and not isinstance(d["model"], ModelSpec):
            d["model"] = ModelSpec.from_dict(d["model"])
        if "fractions" in d:
            fr = d["fractions"]
            d["fractions"] = ({k: tuple(v) for k, v in fr.items()} if isinstance(fr, Mapping)
                              else tuple(fr))
        return cls(**d)


@dataclass
class RunRecord:
    algorithm: str
    hparams: dict
    strategy: dict
    seeds: dict
    repeat: int = 0
    iteration: int = 0
    status: str = "ok"
    selection_score: float | None = None
    checkpoints: list = field(default_factory=list)
    best_step: int | None = None
    test_metrics: dict = field(default_factory=dict)
    threshold: float | None = None
    audit: list = field(default_factory=list)
    test_reads_before_final: int = 0
    wall_clock: float = 0.0
    error: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunRecord":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _test_metrics(scores: np.ndarray, labels: np.ndarray, group: np.ndarray,
                  threshold: float | None) -> dict:
    out: dict = {}
    try:
        if labels.ndim == 2:
            out["auroc"], skipped = mean_auroc_multilabel(scores, labels)
            out["skipped_labels"] = skipped
        else:
            out["auroc"] = auroc(scores, labels)
    except UndefinedMetricError:
        out["auroc"] = None
    out["accuracy"] = accuracy(scores, labels)
    if labels.ndim == 1 and threshold is not None:
        rep = fairness_report(scores, labels, group, threshold)
        out.update(tpr_gap=rep.tpr_gap, tnr_gap=rep.tnr_gap, mcc=rep.mcc_pred_attr,
                   confusion=rep.to_dict()["confusion"])
    return out


def _nan_to_none(x):
    return None if x is None or not np.isfinite(x) else float(x)


def run_single(data: AuditedData, algorithm: str, hparams: Mapping,
               strategy: SelectionStrategy, settings: RunSettings, model_seed: int,
               repeat: int = 0, iteration: int = 0) -> RunRecord:
    """Train one configuration, select its best checkpoint, evaluate on the test split."""
    if algorithm not in ALGORITHMS + ORACLES:
        raise ConfigurationError(
            f"unknown algorithm {algorithm!r}; valid ids: {ALGORITHMS + ORACLES}")
    t0 = time.perf_counter()
    log = data.log
    hp = dict(hparams)
    rec = RunRecord(algorithm, hp, strategy.to_dict(), {"model_seed": int(model_seed)},
                    repeat=repeat, iteration=iteration)
    try:
        suite = data.suite
        train = training_sets(data, algorithm)
        selection = selection_set(data, strategy, algorithm)
        spec = settings.model
        arch = {k: hp[k] for k in ARCH_KEYS if k in hp}
        if arch:
            spec = ModelSpec.from_dict({**spec.to_dict(), **arch})
        model = build_model(spec, suite.schema, seed=model_seed)
        objective = make_objective(algorithm, len(train), hp)
        opt = OptimizerConfig(lr=float(hp.get("lr", 1e-3)),
                              weight_decay=float(hp.get("weight_decay", 0.0)),
                              batch_size=int(hp.get("batch_size", settings.batch_size)))
        model, trace = train_model(model, train, objective, opt, settings.steps,
                                   seed=model_seed, checkpoint_every=settings.checkpoint_every,
                                   score_fn=lambda m: selection_score(m, selection, strategy),
                                   log_every=0)
        rec.status, rec.error = trace.status, trace.error
        rec.checkpoints, rec.best_step = trace.checkpoints, trace.best_step
        rec.selection_score = _nan_to_none(trace.best_score)
        if settings.steps == 0:
            rec.selection_score = _nan_to_none(selection_score(model, selection, strategy))
        if rec.status == "ok":
            sel_labels = _labels(selection)
            threshold = None
            if sel_labels.ndim == 1 and settings.threshold_on == "selection" \
                    and sel_labels.sum() > 0:
                threshold = max_f1_threshold(predict_proba(model, selection.inputs),
                                             sel_labels)[0]
            test = data.get(suite.test_name, "test", "final")
            scores = predict_proba(model, test.inputs)
            labels = _labels(test)
            if labels.ndim == 1 and settings.threshold_on == "test" and labels.sum() > 0:
                threshold = max_f1_threshold(scores, labels)[0]
            rec.threshold = threshold
            rec.test_metrics = _test_metrics(scores, labels, test.group.numpy(), threshold)
    except (ConfigurationError, UndefinedMetricError):
        raise
    except Exception as exc:  # recorded as a failed run
        rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
    rec.audit = log.summary()
    if algorithm not in ORACLES and not strategy.unrealistic:
        rec.test_reads_before_final = len(log.test_reads_before_final())
    rec.wall_clock = time.perf_counter() - t0
    return rec


def train_oracle(kind: str, data: AuditedData, hparams: Mapping, settings: RunSettings,
                 model_seed: int = 0, strategy: SelectionStrategy | None = None) -> RunRecord:
    if kind not in ORACLES:
        raise ConfigurationError(f"oracle kind must be one of {ORACLES}, got {kind!r}")
    return run_single(data, kind, hparams, strategy or SelectionStrategy(), settings, model_seed)


# Random search ------------------------------------------------------------------

@dataclass
class TrialSummary:
    algorithm: str
    strategy: dict
    best_records: list
    all_records: list = field(default_factory=list)
    failed_repeats: list = field(default_factory=list)

    def values(self, metric: str) -> list[float]:
        return [r.test_metrics.get(metric) for r in self.best_records
                if r.test_metrics.get(metric) is not None]

    def aggregate(self, metric: str) -> tuple[float, float]:
        vals = self.values(metric)
        if len(vals) == 1:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                return aggregate_runs(vals)
        return aggregate_runs(vals)

    def cell(self, metric: str) -> str:
        return format_mean_std(*self.aggregate(metric))

    def to_dict(self) -> dict:
        metrics = sorted({k for r in self.best_records for k, v in r.test_metrics.items()
                          if isinstance(v, (int, float))})
        return {
            "algorithm": self.algorithm,
            "strategy": self.strategy,
            "unrealistic": bool(self.strategy.get("unrealistic")),
            "n_best": len(self.best_records),
            "failed_repeats": self.failed_repeats,
            "aggregate": {m: list(self.aggregate(m)) for m in metrics},
            "best_records": [r.to_dict() for r in self.best_records],
        }


def random_search(suite: EnvironmentSuite, algorithm: str, strategy: SelectionStrategy,
                  settings: RunSettings, seeds: SeedBundle | None = None, n_iters: int = 10,
                  repeats: int = 5, space_overrides: Mapping | None = None,
                  fixed_hparams: Mapping | None = None,
                  on_record: Callable[[RunRecord], None] | None = None,
                  lookup: Callable[[int, int, dict], RunRecord | None] | None = None
                  ) -> TrialSummary:
    """``repeats`` independent searches of ``n_iters`` sampled configurations.

    Each repeat draws fresh data splits and its own configurations; each
    configuration gets a fresh initialization. The best run per repeat (by
    selection score) is kept. ``lookup`` returns a stored record to skip a
    completed run; ``on_record`` receives every new record.
    """
    if n_iters < 1 or repeats < 1:
        raise ConfigurationError("n_iters and repeats must be positive")
    seeds = seeds or suite.seeds or SeedBundle()
    strategy.validate(suite)
    space = search_space(algorithm, space_overrides)
    summary = TrialSummary(algorithm, strategy.to_dict(), [])
    for r in range(repeats):
        split = split_suite(suite, settings.fractions, seed=seeds.derive("data", r))
        base = AuditedData(split, standardize=settings.standardize)
        rng = np.random.default_rng(seeds.derive("search", r))
        best = None
        for i in range(n_iters):
            hp = sample_hparams(space, rng, settings.steps)
            hp.update(fixed_hparams or {})
            model_seed = seeds.derive("model", r, i)
            rec = lookup(r, i, hp) if lookup is not None else None
            if rec is None:
                rec = run_single(base.with_log(AccessLog(list(base.log.entries))), algorithm, hp,
                                 strategy, settings, model_seed, repeat=r, iteration=i)
                rec.seeds.update(data_seed=seeds.derive("data", r),
                                 search_seed=seeds.derive("search", r))
                if on_record is not None:
                    on_record(rec)
            summary.all_records.append(rec)
            if rec.status != "ok" or rec.selection_score is None:
                continue
            if best is None or rec.selection_score > best.selection_score:
                best = rec
        if best is None:
            summary.failed_repeats.append(r)
            warnings.warn(f"{algorithm}: every run of repeat {r} failed", RuntimeWarning,
                          stacklevel=2)
        else:
            summary.best_records.append(best)
    return summary
