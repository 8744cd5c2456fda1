"""Multi-environment datasets: schema, splitting, standardization, synthetic
generation and on-disk serialization.

Examples are stored column-wise inside each :class:`Environment` (one array
per field, first axis indexes examples). :class:`Example` is the row view used
when building environments by hand or iterating over them.
"""
from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigurationError, DataError, SchemaError

ROLES = ("train", "validation", "test")
SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)

# Channel layout of the eICU mortality cohort (10 + 4 time series, 3 + 2 static).
EICU_SEQ_CONTINUOUS = (
    "heart_rate", "mean_bp", "diastolic_bp", "systolic_bp", "resp_rate",
    "o2_saturation", "temperature", "glucose", "fio2", "ph",
)
EICU_SEQ_CATEGORICAL = (
    "gcs_eye", "gcs_motor", "gcs_verbal", "gcs_total",
)
EICU_STATIC_CONTINUOUS = ("admission_height", "admission_weight", "age")
EICU_STATIC_CATEGORICAL = ("ethnicity", "gender")
EICU_ENVIRONMENTS = {
    "Midwest": "train", "West": "train", "Northeast": "train",
    "Missing": "validation", "South": "test",
}


@dataclass(frozen=True)
class SeedBundle:
    data_seed: int = 0
    model_seed: int = 0
    search_seed: int = 0

    def derive(self, kind: str, *keys: int) -> int:
        """Deterministic child seed for ``kind`` ('data', 'model' or 'search')."""
        base = {"data": self.data_seed, "model": self.model_seed,
                "search": self.search_seed}[kind]
        ss = np.random.SeedSequence([base, *[int(k) for k in keys]])
        return int(ss.generate_state(1, dtype=np.uint32)[0])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class FeatureSchema:
    """Names and types of every model input channel.

    ``n_labels == 1`` means binary label mode; larger values select
    multi-label mode with one binary label per task.
    """

    seq_len: int = 0
    seq_continuous: tuple[str, ...] = ()
    seq_categorical: tuple[str, ...] = ()
    seq_cardinalities: tuple[int, ...] = ()
    static_continuous: tuple[str, ...] = ()
    static_categorical: tuple[str, ...] = ()
    static_cardinalities: tuple[int, ...] = ()
    n_labels: int = 1
    label_names: tuple[str, ...] = ("label",)

    def __post_init__(self):
        for name in ("seq_continuous", "seq_categorical", "seq_cardinalities",
                     "static_continuous", "static_categorical",
                     "static_cardinalities", "label_names"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.seq_categorical) != len(self.seq_cardinalities):
            raise SchemaError("seq_categorical and seq_cardinalities differ in length")
        if len(self.static_categorical) != len(self.static_cardinalities):
            raise SchemaError("static_categorical and static_cardinalities differ in length")
        if self.n_labels < 1 or len(self.label_names) != self.n_labels:
            raise SchemaError("label_names must have n_labels entries")

    @property
    def multilabel(self) -> bool:
        return self.n_labels > 1

    def with_static_categorical(self, name: str, cardinality: int) -> "FeatureSchema":
        if name in self.static_categorical:
            raise SchemaError(f"static categorical channel {name!r} already exists")
        return dataclasses.replace(
            self,
            static_categorical=self.static_categorical + (name,),
            static_cardinalities=self.static_cardinalities + (int(cardinality),),
        )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSchema":
        return cls(**d)


@dataclass(frozen=True)
class Example:
    """One labelled example. ``group`` is metadata, never a model input."""

    static_continuous: np.ndarray
    static_categoricals: np.ndarray
    label: np.ndarray | int
    group: int
    sequence_features: np.ndarray | None = None
    sequence_categoricals: np.ndarray | None = None


_ARRAY_FIELDS = ("seq", "seq_cat", "static", "static_cat", "y", "group")


@dataclass(frozen=True, eq=False)
class Environment:
    """All examples of one environment, stored column-wise.

    Shapes: ``seq`` (N, T, C_cont), ``seq_cat`` (N, T, C_cat), ``static``
    (N, S_cont), ``static_cat`` (N, S_cat), ``y`` (N,) or (N, L), ``group`` (N,).
    """

    name: str
    seq: np.ndarray
    seq_cat: np.ndarray
    static: np.ndarray
    static_cat: np.ndarray
    y: np.ndarray
    group: np.ndarray
    splits: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.y)
        for name in _ARRAY_FIELDS:
            arr = np.asarray(getattr(self, name))
            if len(arr) != n:
                raise SchemaError(
                    f"environment {self.name!r}: field {name} has {len(arr)} rows, expected {n}")
            arr = arr.copy() if arr.flags.writeable else arr
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        splits = {}
        for k, idx in dict(self.splits).items():
            if k not in SPLITS:
                raise ConfigurationError(f"unknown split {k!r}")
            idx = np.asarray(idx, dtype=np.int64).copy()
            idx.setflags(write=False)
            splits[k] = idx
        object.__setattr__(self, "splits", splits)
        if self.y.size and not np.isin(self.y, (0, 1)).all():
            raise SchemaError(f"environment {self.name!r}: labels must be 0/1")
        if self.group.size and not np.isin(self.group, (0, 1)).all():
            raise SchemaError(f"environment {self.name!r}: group attribute must be 0/1")

    def __len__(self) -> int:
        return len(self.y)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Environment):
            return NotImplemented
        if self.name != other.name or set(self.splits) != set(other.splits):
            return False
        same_arrays = all(
            getattr(self, f).shape == getattr(other, f).shape
            and getattr(self, f).dtype == getattr(other, f).dtype
            and np.array_equal(getattr(self, f), getattr(other, f))
            for f in _ARRAY_FIELDS)
        return same_arrays and all(
            np.array_equal(self.splits[k], other.splits[k]) for k in self.splits)

    __hash__ = None

    @property
    def multilabel(self) -> bool:
        return self.y.ndim == 2

    @classmethod
    def from_examples(cls, name: str, examples: Sequence[Example], seq_len: int = 0):
        if not examples:
            raise DataError(f"environment {name!r} has no examples")

        def stack(get, shape_tail, dtype):
            rows = [get(e) for e in examples]
            if any(r is None for r in rows):
                return np.zeros((len(rows), *shape_tail), dtype=dtype)
            return np.stack([np.asarray(r, dtype=dtype) for r in rows])

        static = stack(lambda e: e.static_continuous, (0,), np.float32)
        static_cat = stack(lambda e: e.static_categoricals, (0,), np.int64)
        seq = stack(lambda e: e.sequence_features, (seq_len, 0), np.float32)
        seq_cat = stack(lambda e: e.sequence_categoricals, (seq_len, 0), np.int64)
        y = np.stack([np.asarray(e.label, dtype=np.int8) for e in examples])
        group = np.asarray([e.group for e in examples], dtype=np.int8)
        return cls(name, seq, seq_cat, static, static_cat, y, group)

    def example(self, i: int) -> Example:
        return Example(
            static_continuous=self.static[i],
            static_categoricals=self.static_cat[i],
            label=self.y[i],
            group=int(self.group[i]),
            sequence_features=self.seq[i],
            sequence_categoricals=self.seq_cat[i],
        )

    def examples(self) -> Iterator[Example]:
        return (self.example(i) for i in range(len(self)))

    def replace(self, **changes) -> "Environment":
        return dataclasses.replace(self, **changes)

    def take(self, idx: np.ndarray) -> "Environment":
        """Rows ``idx`` as a new environment; splits are dropped."""
        idx = np.asarray(idx, dtype=np.int64)
        return Environment(self.name, *(getattr(self, f)[idx] for f in _ARRAY_FIELDS))

    def split(self, name: str) -> "Environment":
        if name not in self.splits:
            raise ConfigurationError(f"environment {self.name!r} has no {name!r} split")
        return self.take(self.splits[name])

    def shape_signature(self) -> tuple:
        return (self.seq.shape[1:], self.seq_cat.shape[1:], self.static.shape[1:],
                self.static_cat.shape[1:], self.y.shape[1:])


@dataclass(frozen=True, eq=False)
class EnvironmentSuite:
    environments: tuple[Environment, ...]
    roles: Mapping[str, str]
    schema: FeatureSchema
    seeds: SeedBundle | None = None

    def __post_init__(self):
        object.__setattr__(self, "environments", tuple(self.environments))
        object.__setattr__(self, "roles", dict(self.roles))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EnvironmentSuite):
            return NotImplemented
        return (self.environments == other.environments and self.roles == other.roles
                and self.schema == other.schema and self.seeds == other.seeds)

    __hash__ = None

    def __getitem__(self, name: str) -> Environment:
        for env in self.environments:
            if env.name == name:
                return env
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.environments]

    def names_with_role(self, role: str) -> list[str]:
        return [e.name for e in self.environments if self.roles[e.name] == role]

    @property
    def train_names(self) -> list[str]:
        return self.names_with_role("train")

    @property
    def validation_name(self) -> str | None:
        names = self.names_with_role("validation")
        return names[0] if names else None

    @property
    def test_name(self) -> str:
        return self.names_with_role("test")[0]

    def replace_environments(self, envs: Iterable[Environment],
                             schema: FeatureSchema | None = None) -> "EnvironmentSuite":
        return build_environment_suite(list(envs), self.roles, schema or self.schema,
                                       seeds=self.seeds)

    def with_seeds(self, seeds: SeedBundle) -> "EnvironmentSuite":
        return dataclasses.replace(self, seeds=seeds)


def _check_schema(env: Environment, schema: FeatureSchema) -> None:
    expected = {
        "seq": (schema.seq_len, len(schema.seq_continuous)),
        "seq_cat": (schema.seq_len, len(schema.seq_categorical)),
        "static": (len(schema.static_continuous),),
        "static_cat": (len(schema.static_categorical),),
        "y": () if schema.n_labels == 1 else (schema.n_labels,),
    }
    for name, tail in expected.items():
        got = getattr(env, name).shape[1:]
        if got != tail:
            raise SchemaError(
                f"environment {env.name!r}: {name} has per-example shape {got}, schema says {tail}")
    for name, cards in (("seq_cat", schema.seq_cardinalities),
                        ("static_cat", schema.static_cardinalities)):
        arr = getattr(env, name)
        if arr.size:
            flat = arr.reshape(-1, arr.shape[-1])
            if (flat < 0).any() or (flat >= np.asarray(cards)).any():
                raise SchemaError(f"environment {env.name!r}: {name} index out of range")


def infer_schema(env: Environment, **names) -> FeatureSchema:
    """Schema with generated channel names matching ``env``'s shapes."""
    t = env.seq.shape[1]
    def cards(arr):
        if arr.size == 0:
            return tuple(2 for _ in range(arr.shape[-1]))
        flat = arr.reshape(-1, arr.shape[-1])
        return tuple(max(int(flat[:, j].max()) + 1, 2) for j in range(flat.shape[1]))
    n_labels = 1 if env.y.ndim == 1 else env.y.shape[1]
    kwargs = dict(
        seq_len=t,
        seq_continuous=tuple(f"seq{i}" for i in range(env.seq.shape[-1])),
        seq_categorical=tuple(f"seqcat{i}" for i in range(env.seq_cat.shape[-1])),
        seq_cardinalities=cards(env.seq_cat),
        static_continuous=tuple(f"x{i}" for i in range(env.static.shape[1])),
        static_categorical=tuple(f"cat{i}" for i in range(env.static_cat.shape[1])),
        static_cardinalities=cards(env.static_cat),
        n_labels=n_labels,
        label_names=("label",) if n_labels == 1 else tuple(f"label{i}" for i in range(n_labels)),
    )
    kwargs.update(names)
    return FeatureSchema(**kwargs)


def build_environment_suite(envs: Sequence[Environment], roles: Mapping[str, str],
                            schema: FeatureSchema | None = None,
                            seeds: SeedBundle | None = None) -> EnvironmentSuite:
    """Validate roles and feature shapes and assemble a suite."""
    if not envs:
        raise ConfigurationError("no environments given")
    names = [e.name for e in envs]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate environment names: {names}")
    missing = [n for n in names if n not in roles]
    if missing:
        raise ConfigurationError(f"no role assigned to environments {missing}")
    bad = {n: r for n, r in roles.items() if r not in ROLES}
    if bad:
        raise ConfigurationError(f"unknown roles {bad}; valid roles are {ROLES}")
    counts = {r: sum(roles[n] == r for n in names) for r in ROLES}
    if counts["train"] < 2:
        raise ConfigurationError(
            f"need at least 2 training environments, got {counts['train']}")
    if counts["test"] != 1:
        raise ConfigurationError(f"need exactly one test environment, got {counts['test']}")
    if counts["validation"] > 1:
        raise ConfigurationError(
            f"at most one validation environment allowed, got {counts['validation']}")

    sig = envs[0].shape_signature()
    for env in envs[1:]:
        if env.shape_signature() != sig:
            raise SchemaError(
                f"environment {env.name!r} feature shapes {env.shape_signature()} "
                f"differ from {envs[0].name!r} {sig}")
    if schema is None:
        schema = infer_schema(envs[0])
    for env in envs:
        _check_schema(env, schema)
    return EnvironmentSuite(tuple(envs), {n: roles[n] for n in names}, schema, seeds)


def split_environment(env: Environment, fractions: Sequence[float] = DEFAULT_FRACTIONS,
                      rng: np.random.Generator | int | None = None) -> Environment:
    """Assign disjoint train/val/test index sets by a uniform shuffle.

    Split sizes are ``floor(n * f)`` for train and val, the remainder goes to test.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigurationError(f"fractions must be three non-negative numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must sum to 1, got {sum(fractions)}")
    n = len(env)
    if n == 0:
        raise DataError(f"environment {env.name!r} is empty")
    if n < 3:
        raise DataError(f"environment {env.name!r} has {n} examples, need at least 3")
    rng = np.random.default_rng(rng)
    perm = rng.permutation(n)
    n_train = int(np.floor(n * fractions[0] + 1e-9))
    n_val = int(np.floor(n * fractions[1] + 1e-9))
    splits = {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }
    return env.replace(splits=splits)


def split_suite(suite: EnvironmentSuite,
                fractions: Sequence[float] | Mapping[str, Sequence[float]] = DEFAULT_FRACTIONS,
                seed: int = 0) -> EnvironmentSuite:
    """Split every environment; ``fractions`` may be given per role."""
    out = []
    for i, env in enumerate(suite.environments):
        role = suite.roles[env.name]
        fr = fractions[role] if isinstance(fractions, Mapping) else fractions
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        split_env = split_environment(env, fr, rng)
        if role == "train" and any(len(v) == 0 for v in split_env.splits.values()):
            raise DataError(f"training environment {env.name!r} has an empty split")
        out.append(split_env)
    return dataclasses.replace(suite, environments=tuple(out))


class Standardizer(TransformerMixin, BaseEstimator):
    """Per-channel zero-mean / unit-variance scaling of continuous features.

    ``fit`` accepts a 2-D array (rows are observations). Channels with zero
    variance keep their mean shift but get unit scale, with a warning.
    """

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {X.shape}")
        self.mean_ = X.mean(axis=0) if len(X) else np.zeros(X.shape[1])
        std = X.std(axis=0) if len(X) else np.ones(X.shape[1])
        degenerate = ~(std > 0)
        if degenerate.any():
            warnings.warn(
                f"zero-variance channels {np.flatnonzero(degenerate).tolist()}; using unit scale",
                RuntimeWarning, stacklevel=2)
        self.scale_ = np.where(degenerate, 1.0, std)
        self.degenerate_ = np.flatnonzero(degenerate)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = np.asarray(X)
        out = (X - self.mean_) / self.scale_
        return out.astype(X.dtype if np.issubdtype(X.dtype, np.floating) else np.float64)


@dataclass
class SuiteStandardizer:
    """Standardizers for the static and per-timestep continuous channels."""

    static: Standardizer
    seq: Standardizer


def fit_standardizer(suite: EnvironmentSuite, on_roles: Iterable[str] = ("train",)
                     ) -> SuiteStandardizer:
    """Fit on the train splits of the environments holding ``on_roles``."""
    on_roles = set(on_roles)
    parts = []
    for env in suite.environments:
        if suite.roles[env.name] in on_roles:
            if "train" not in env.splits:
                raise ConfigurationError(f"environment {env.name!r} has not been split")
            parts.append(env.split("train"))
    if not parts:
        raise ConfigurationError(f"no environment has a role in {sorted(on_roles)}")
    static = np.concatenate([p.static for p in parts])
    seq = np.concatenate([p.seq.reshape(-1, p.seq.shape[-1]) for p in parts])
    return SuiteStandardizer(Standardizer().fit(static), Standardizer().fit(seq))


def apply_standardizer(standardizer: SuiteStandardizer, env: Environment) -> Environment:
    static = standardizer.static.transform(env.static).astype(np.float32)
    seq = env.seq
    if seq.size:
        seq = standardizer.seq.transform(seq.reshape(-1, seq.shape[-1]))
        seq = seq.reshape(env.seq.shape).astype(np.float32)
    return env.replace(static=static, seq=seq)


def standardize_suite(suite: EnvironmentSuite) -> tuple[EnvironmentSuite, SuiteStandardizer]:
    st = fit_standardizer(suite)
    envs = tuple(apply_standardizer(st, e) for e in suite.environments)
    return dataclasses.replace(suite, environments=envs), st


# Synthetic stand-in data ----------------------------------------------------

@dataclass
class SyntheticConfig:
    """Generator settings for a suite with a known invariant mechanism.

    The label depends only on the time-mean of sequence channel 0 and on
    static continuous channel ``invariant_static`` (both distributed
    identically in every environment):

        P(Y=1 | x) = sigmoid(w0 * mean_t seq[:, t, 0] + w1 * static[inv] + intercept)

    Every other channel is nuisance: environment ``k`` adds a mean offset
    ``nuisance_strength * env_offsets[k]`` and sequence channel 1 carries a
    spurious term ``nuisance_strength * spurious[k] * (2y - 1)``. Static
    channel 0 acts as a group proxy (shifted by ``group_proxy * (2g - 1)``)
    and is the default target for correlated-noise shifts.
    """

    env_names: tuple[str, ...] = tuple(EICU_ENVIRONMENTS)
    roles: dict = field(default_factory=lambda: dict(EICU_ENVIRONMENTS))
    n_per_env: int | dict = 2000
    seq_len: int = 8
    n_seq_continuous: int = 3
    n_seq_categorical: int = 1
    seq_cardinality: int = 4
    n_static_continuous: int = 3
    n_static_categorical: int = 1
    static_cardinality: int = 3
    invariant_weights: tuple[float, float] = (2.0, 1.5)
    intercept: float = 0.0
    invariant_static: int = 1
    nuisance_strength: float = 1.0
    env_offsets: tuple[float, ...] | None = None
    spurious: tuple[float, ...] | None = None
    group_base_rate: float = 0.5
    group_proxy: float = 1.0
    n_labels: int = 1
    seq_noise: float = 0.5

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticConfig":
        d = dict(d)
        for k in ("env_names", "invariant_weights", "env_offsets", "spurious"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        if "env_names" in d and "roles" not in d:
            raise ConfigurationError("synthetic config with env_names must also give roles")
        return cls(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


def _synthetic_schema(cfg: SyntheticConfig) -> FeatureSchema:
    # static channel 0 plays the role of admission weight: a group proxy
    # that does not enter the labelling rule
    seq_c = tuple(f"seq{i}" for i in range(cfg.n_seq_continuous))
    seq_k = tuple(f"seqcat{i}" for i in range(cfg.n_seq_categorical))
    stat_c = ("admission_weight",) + tuple(f"x{i}" for i in range(1, cfg.n_static_continuous))
    return FeatureSchema(
        seq_len=cfg.seq_len,
        seq_continuous=seq_c,
        seq_categorical=seq_k,
        seq_cardinalities=(cfg.seq_cardinality,) * cfg.n_seq_categorical,
        static_continuous=stat_c,
        static_categorical=tuple(f"cat{i}" for i in range(cfg.n_static_categorical)),
        static_cardinalities=(cfg.static_cardinality,) * cfg.n_static_categorical,
        n_labels=cfg.n_labels,
        label_names=("label",) if cfg.n_labels == 1
        else tuple(f"label{i}" for i in range(cfg.n_labels)),
    )


def invariant_logit(env: Environment, cfg: SyntheticConfig) -> np.ndarray:
    """Ground-truth logit of P(Y=1 | invariant features); (N,) or (N, L)."""
    w0, w1 = cfg.invariant_weights
    m = env.seq[:, :, 0].mean(axis=1).astype(np.float64)
    s = env.static[:, cfg.invariant_static].astype(np.float64)
    base = w0 * m + w1 * s + cfg.intercept
    if cfg.n_labels == 1:
        return base
    # Task j uses a rotated mix of the two invariant features.
    angles = np.linspace(0.0, np.pi / 2, cfg.n_labels)
    return np.stack([np.cos(a) * w0 * m + np.sin(a) * w1 * s + cfg.intercept
                     for a in angles], axis=1)


def generate_synthetic_suite(cfg: SyntheticConfig,
                             rng: np.random.Generator | int | None = None) -> EnvironmentSuite:
    """Sample a suite whose invariant mechanism is known exactly."""
    if cfg.n_seq_continuous < 2 or cfg.n_static_continuous < 2 or cfg.seq_len < 1:
        raise ConfigurationError(
            "synthetic generator needs >=2 sequence channels, >=2 static channels and seq_len >= 1")
    if not 0 < cfg.invariant_static < cfg.n_static_continuous:
        raise ConfigurationError("invariant_static must index a non-proxy static channel")
    rng = np.random.default_rng(rng)
    n_env = len(cfg.env_names)
    offsets = (np.linspace(-1.0, 1.0, n_env) if cfg.env_offsets is None
               else np.asarray(cfg.env_offsets, dtype=float))
    spurious = (np.linspace(1.0, -1.0, n_env) if cfg.spurious is None
                else np.asarray(cfg.spurious, dtype=float))
    if len(offsets) != n_env or len(spurious) != n_env:
        raise ConfigurationError("env_offsets and spurious need one entry per environment")
    schema = _synthetic_schema(cfg)
    s = cfg.nuisance_strength
    envs = []
    for k, name in enumerate(cfg.env_names):
        n = cfg.n_per_env[name] if isinstance(cfg.n_per_env, Mapping) else cfg.n_per_env
        if n <= 0:
            raise ConfigurationError(f"environment {name!r}: number of examples must be positive")
        T = cfg.seq_len
        group = (rng.random(n) < cfg.group_base_rate).astype(np.int8)
        seq = rng.normal(0.0, 1.0, size=(n, T, cfg.n_seq_continuous))
        # invariant channel: per-patient level plus per-timestep jitter
        level = rng.normal(0.0, 1.0, size=n)
        seq[:, :, 0] = level[:, None] + cfg.seq_noise * rng.normal(size=(n, T))
        seq[:, :, 0] -= seq[:, :, 0].mean(axis=1, keepdims=True) - level[:, None]
        seq[:, :, 1:] += s * offsets[k]
        static = rng.normal(0.0, 1.0, size=(n, cfg.n_static_continuous))
        static[:, 0] += cfg.group_proxy * (2.0 * group - 1.0) + s * offsets[k]
        others = [j for j in range(1, cfg.n_static_continuous) if j != cfg.invariant_static]
        static[:, others] += s * offsets[k]
        seq_cat = rng.integers(0, cfg.seq_cardinality, size=(n, T, cfg.n_seq_categorical))
        static_cat = rng.integers(0, cfg.static_cardinality, size=(n, cfg.n_static_categorical))
        tmp = Environment(name, seq.astype(np.float32), seq_cat, static.astype(np.float32),
                          static_cat, np.zeros(n, np.int8), group)
        logit = invariant_logit(tmp, cfg)
        y = (rng.random(logit.shape) < 1.0 / (1.0 + np.exp(-logit))).astype(np.int8)
        ysign = (2.0 * (y if y.ndim == 1 else y[:, 0]) - 1.0)
        seq[:, :, 1] += (s * spurious[k] * ysign)[:, None]
        envs.append(Environment(name, seq.astype(np.float32), seq_cat.astype(np.int64),
                                static.astype(np.float32), static_cat.astype(np.int64),
                                y, group))
    return build_environment_suite(envs, cfg.roles, schema)


# Serialization --------------------------------------------------------------

MANIFEST = "schema.json"


def save_suite(suite: EnvironmentSuite, directory: str | Path) -> Path:
    """Write one ``.npz`` per environment plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for i, env in enumerate(suite.environments):
        fname = f"env{i:02d}.npz"
        arrays = {f: getattr(env, f) for f in _ARRAY_FIELDS}
        arrays.update({f"split_{k}": v for k, v in env.splits.items()})
        with open(directory / fname, "wb") as fh:
            np.savez(fh, **arrays)
        files[env.name] = fname
    manifest = {
        "format": "dgbench-suite/1",
        "environments": suite.names,
        "files": files,
        "roles": suite.roles,
        "schema": suite.schema.to_dict(),
        "seeds": suite.seeds.to_dict() if suite.seeds else None,
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return directory


def load_suite(directory: str | Path) -> EnvironmentSuite:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise DataError(f"no suite manifest at {path}")
    manifest = json.loads(path.read_text())
    envs = []
    for name in manifest["environments"]:
        with np.load(directory / manifest["files"][name]) as data:
            splits = {k[len("split_"):]: data[k] for k in data.files if k.startswith("split_")}
            envs.append(Environment(name, *(data[f] for f in _ARRAY_FIELDS), splits=splits))
    seeds = SeedBundle(**manifest["seeds"]) if manifest.get("seeds") else None
    return build_environment_suite(envs, manifest["roles"],
                                   FeatureSchema.from_dict(manifest["schema"]), seeds)


# Clinical adapter contract --------------------------------------------------

class ClinicalAdapter:
    """Interface for loaders of credentialed clinical cohorts.

    No implementation ships with the package. An adapter for the eICU
    mortality cohort must return a suite whose schema follows
    :func:`eicu_schema` (10 continuous + 4 categorical hourly series over
    the first 48 hours, 3 continuous + 2 categorical static features),
    one environment per region with roles as in ``EICU_ENVIRONMENTS``,
    and ``group`` set to patient gender (1 = male). Hourly binning and
    forward-fill imputation are the adapter's responsibility.
    """

    name: str = "abstract"

    def load(self, **options) -> EnvironmentSuite:
        raise NotImplementedError(
            f"{type(self).__name__} is an interface; clinical data loading is not provided")


def eicu_schema(seq_len: int = 48) -> FeatureSchema:
    return FeatureSchema(
        seq_len=seq_len,
        seq_continuous=EICU_SEQ_CONTINUOUS,
        seq_categorical=EICU_SEQ_CATEGORICAL,
        seq_cardinalities=(5, 7, 6, 14),
        static_continuous=EICU_STATIC_CONTINUOUS,
        static_categorical=EICU_STATIC_CATEGORICAL,
        static_cardinalities=(6, 2),
    )
