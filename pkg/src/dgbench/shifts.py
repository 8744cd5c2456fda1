"""Synthetic distribution shifts and the Colored MNIST generator.

Every injector is a pure function of its inputs and a random generator.
Shifted features that the model may see are appended as binary static
categorical channels (``corrupted_label`` for CorrLabel, ``group_attr`` for
observed biased subsampling); the protected attribute itself always stays
in ``Environment.group``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .envdata import Environment, EnvironmentSuite, FeatureSchema, build_environment_suite
from .exceptions import (
    ConfigurationError,
    DataError,
    FeatureTypeError,
    InfeasibilityError,
    RangeError,
    UnsupportedModeError,
)

SHIFT_KINDS = ("Base", "CorrLabel", "CorrNoise", "BiasSampUnobs", "BiasSampObs", "ColoredMNIST")

CORRUPTED_LABEL_CHANNEL = "corrupted_label"
GROUP_CHANNEL = "group_attr"

# Default targets (P(Y=1 | male), P(Y=1 | female)) for the eICU regions.
EICU_SUBSAMPLE_TARGETS = {
    "Midwest": (0.8, 0.05),
    "West": (0.7, 0.1),
    "Northeast": (0.6, 0.15),
    "Missing": (0.3, 0.3),
    "South": (0.1, 0.5),
}
CXR_SUBSAMPLE_TARGETS = {
    "MIMIC-CXR": (0.2, 0.02),
    "CheXpert": (0.1, 0.03),
    "Chest-Xray8": (0.07, 0.04),
    "PadChest": (0.05, 0.05),
}


@dataclass
class ShiftPlan:
    """One synthetic shift with its per-environment parameters.

    ``per_env_params`` values by kind:
      CorrLabel      {"p": flip probability}
      CorrNoise      {"lam": noise mean scale}; plan-level ``sigma``, ``feature``
      BiasSamp*      {"mu1": P(Y=1|attr=1), "mu0": P(Y=1|attr=0)}
      ColoredMNIST   plan-level ``eta``, ``beta``, ``delta`` (see ``extra``)
    """

    kind: str = "Base"
    per_env_params: dict = field(default_factory=dict)
    sigma: float = 0.5
    feature: str | int = "admission_weight"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ConfigurationError(f"unknown shift kind {self.kind!r}; valid kinds: {SHIFT_KINDS}")

    def validate(self, suite: EnvironmentSuite | None = None) -> None:
        if self.kind == "Base":
            return
        if self.kind == "ColoredMNIST":
            for k in ("eta", "beta", "delta"):
                if k not in self.extra:
                    raise ConfigurationError(f"ColoredMNIST plan needs {k!r}")
            return
        if suite is not None:
            missing = [n for n in suite.names if n not in self.per_env_params]
            if missing:
                raise ConfigurationError(f"{self.kind} plan has no parameters for {missing}")
        for env, params in self.per_env_params.items():
            if self.kind == "CorrLabel":
                _check_prob(params["p"], f"per_env_params.{env}.p")
            elif self.kind == "CorrNoise":
                if not np.isfinite(params["lam"]):
                    raise RangeError(f"per_env_params.{env}.lam must be finite")
            else:
                for k in ("mu1", "mu0"):
                    _check_open_prob(params[k], f"per_env_params.{env}.{k}")
        if self.kind == "CorrNoise" and not self.sigma > 0:
            raise RangeError(f"sigma must be positive, got {self.sigma}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ShiftPlan":
        return cls(**dict(d))


@dataclass
class ShiftReport:
    """Achieved per-environment statistics of an applied shift."""

    kind: str
    per_env: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "per_env": self.per_env}


def _check_prob(p: float, name: str) -> None:
    if not 0.0 <= p <= 1.0:
        raise RangeError(f"{name} must lie in [0, 1], got {p}")


def _check_open_prob(p: float, name: str) -> None:
    if not 0.0 < p < 1.0:
        raise RangeError(f"{name} must lie strictly inside (0, 1), got {p}")


def expand_beta_delta(beta: float, delta: float, n_train_envs: int = 3,
                      p_val: float | None = None, p_test: float | None = None,
                      probability: bool = True) -> dict:
    """Symmetric training-environment parameters around ``beta``.

    Training environment ``i`` gets ``beta + (i - (n-1)/2) * delta``, so three
    environments get (beta - delta, beta, beta + delta).
    """
    if n_train_envs < 1 or n_train_envs % 2 == 0:
        raise ConfigurationError(
            f"symmetric spacing needs an odd number of training environments, got {n_train_envs}")
    centre = (n_train_envs - 1) / 2
    train = [beta + (i - centre) * delta for i in range(n_train_envs)]
    if probability:
        for v in train + [v for v in (p_val, p_test) if v is not None]:
            if not -1e-12 <= v <= 1 + 1e-12:
                raise RangeError(
                    f"beta={beta}, delta={delta} gives probability {v} outside [0, 1]")
        train = [min(max(v, 0.0), 1.0) for v in train]
    return {"train": train, "validation": p_val, "test": p_test}


def assign_by_role(suite: EnvironmentSuite, expanded: Mapping, key: str) -> dict:
    """Map the output of :func:`expand_beta_delta` onto suite environment names."""
    train = suite.train_names
    if len(train) != len(expanded["train"]):
        raise ConfigurationError(
            f"suite has {len(train)} training environments, parameters given for "
            f"{len(expanded['train'])}")
    out = {n: {key: v} for n, v in zip(train, expanded["train"])}
    for role in ("validation", "test"):
        for n in suite.names_with_role(role):
            if expanded[role] is None:
                raise ConfigurationError(f"no {key} value given for the {role} environment")
            out[n] = {key: expanded[role]}
    return out


def corrupt_label_feature(env: Environment, p: float,
                          rng: np.random.Generator | int | None = None
                          ) -> tuple[Environment, dict]:
    """Append X' = Y xor Bernoulli(p) as a binary static categorical channel."""
    if env.multilabel:
        raise UnsupportedModeError("corrupted-label feature requires binary label mode")
    _check_prob(p, "p")
    rng = np.random.default_rng(rng)
    flip = rng.random(len(env)) < p
    x_prime = np.where(flip, 1 - env.y, env.y).astype(np.int64)
    static_cat = np.concatenate([env.static_cat, x_prime[:, None]], axis=1)
    stats = {"p": float(p), "n": len(env),
             "flip_rate": float(flip.mean()) if len(env) else 0.0}
    return env.replace(static_cat=static_cat), stats


def _resolve_static_feature(feature: str | int, schema: FeatureSchema | None,
                            n_static: int) -> int:
    if isinstance(feature, (int, np.integer)):
        idx = int(feature)
    else:
        if schema is None:
            raise ConfigurationError("a schema is needed to resolve feature names")
        if feature in schema.static_categorical or feature in schema.seq_categorical:
            raise FeatureTypeError(f"feature {feature!r} is categorical, expected continuous")
        if feature in schema.seq_continuous:
            raise FeatureTypeError(f"feature {feature!r} is a time series, expected static")
        if feature not in schema.static_continuous:
            raise ConfigurationError(f"unknown feature {feature!r}")
        idx = schema.static_continuous.index(feature)
    if not 0 <= idx < n_static:
        raise ConfigurationError(f"static feature index {idx} out of range")
    return idx


def correlated_noise(env: Environment, feature: str | int, lam: float, sigma: float,
                     rng: np.random.Generator | int | None = None,
                     schema: FeatureSchema | None = None) -> tuple[Environment, dict]:
    """Replace static feature X~ by X~ + eps with eps ~ N(lam * y, sigma^2), y in {-1, +1}."""
    if env.multilabel:
        raise UnsupportedModeError("correlated noise requires binary label mode")
    if not sigma > 0:
        raise RangeError(f"sigma must be positive, got {sigma}")
    idx = _resolve_static_feature(feature, schema, env.static.shape[1])
    rng = np.random.default_rng(rng)
    ysign = 2.0 * env.y.astype(np.float64) - 1.0
    eps = rng.normal(lam * ysign, sigma)
    static = env.static.astype(np.float64).copy()
    static[:, idx] += eps
    stats = {"lam": float(lam), "sigma": float(sigma), "n": len(env)}
    for label in (0, 1):
        sel = env.y == label
        stats[f"noise_mean_y{label}"] = float(eps[sel].mean()) if sel.any() else None
        stats[f"noise_var_y{label}"] = float(eps[sel].var()) if sel.sum() > 1 else None
    return env.replace(static=static.astype(env.static.dtype)), stats


def subsample_probability(y, mu: float, tau: float):
    """Probability of dropping an example with label ``y``.

    ``tau`` is the current prevalence of Y=1 within the example's group and
    ``mu`` the target prevalence. Positives are thinned when tau > mu,
    negatives when tau < mu; keeping the other class intact makes the
    expected post-sample prevalence exactly ``mu``.
    """
    if not 0.0 < mu < 1.0:
        raise RangeError(f"target prevalence mu must lie in (0, 1), got {mu}")
    if not 0.0 < tau < 1.0:
        raise RangeError(f"current prevalence tau must lie in (0, 1), got {tau}")
    y = np.asarray(y)
    drop = np.zeros(y.shape, dtype=np.float64)
    if tau > mu:
        drop = np.where(y == 1, 1.0 - (1.0 - tau) / tau * mu / (1.0 - mu), drop)
    elif tau < mu:
        drop = np.where(y == 0, 1.0 - tau / (1.0 - tau) * (1.0 - mu) / mu, drop)
    drop = np.clip(drop, 0.0, 1.0)
    return float(drop) if drop.ndim == 0 else drop


def biased_subsample(env: Environment, mu1: float, mu0: float, observed: bool = False,
                     rng: np.random.Generator | int | None = None
                     ) -> tuple[Environment, dict]:
    """Thin each attribute group so that P(Y=1 | attr=g) hits its target.

    Drops are independent Bernoulli decisions; only examples are removed.
    With ``observed`` the attribute is also appended as a model-visible
    binary static channel (the caller must extend the schema accordingly).
    """
    if env.multilabel:
        raise UnsupportedModeError("biased subsampling requires binary label mode")
    _check_open_prob(mu1, "mu1")
    _check_open_prob(mu0, "mu0")
    rng = np.random.default_rng(rng)
    u = rng.random(len(env))
    keep = np.ones(len(env), dtype=bool)
    stats: dict = {"n_before": len(env)}
    for g, mu in ((1, mu1), (0, mu0)):
        in_g = env.group == g
        for label in (0, 1):
            if not (in_g & (env.y == label)).any():
                raise InfeasibilityError(
                    f"environment {env.name!r}: cell (group={g}, label={label}) is empty; "
                    f"target prevalence {mu} is unreachable")
        tau = float(env.y[in_g].mean())
        p_drop = subsample_probability(env.y[in_g], mu, tau)
        keep[in_g] = u[in_g] >= p_drop
        kept_y = env.y[in_g & keep]
        stats[f"group{g}"] = {
            "target": float(mu), "tau": tau,
            "n_before": int(in_g.sum()), "n_after": int(len(kept_y)),
            "prevalence_after": float(kept_y.mean()) if len(kept_y) else None,
        }
    out = env.take(np.flatnonzero(keep))
    stats["n_after"] = len(out)
    stats["frac_group1_after"] = float(out.group.mean()) if len(out) else None
    if observed:
        out = _append_group_channel(out)
    return out, stats


def _append_group_channel(env: Environment) -> Environment:
    static_cat = np.concatenate([env.static_cat, env.group.astype(np.int64)[:, None]], axis=1)
    return env.replace(static_cat=static_cat)


def apply_shift(suite: EnvironmentSuite, plan: ShiftPlan,
                rng: np.random.Generator | int | None = None
                ) -> tuple[EnvironmentSuite, ShiftReport]:
    """Apply ``plan`` environment by environment; Base returns ``suite`` itself."""
    plan.validate(suite)
    report = ShiftReport(plan.kind)
    if plan.kind == "Base":
        return suite, report
    if plan.kind == "ColoredMNIST":
        raise ConfigurationError(
            "ColoredMNIST plans build a new suite; use generate_colored_mnist instead of apply_shift")
    if suite.schema.multilabel:
        raise UnsupportedModeError(f"{plan.kind} requires binary label mode")
    rng = np.random.default_rng(rng)
    env_seeds = rng.integers(0, 2**63 - 1, size=len(suite.environments))
    schema = suite.schema
    envs = []
    for env, seed in zip(suite.environments, env_seeds):
        params = plan.per_env_params[env.name]
        env_rng = np.random.default_rng(int(seed))
        if plan.kind == "CorrLabel":
            new, stats = corrupt_label_feature(env, params["p"], env_rng)
        elif plan.kind == "CorrNoise":
            new, stats = correlated_noise(env, plan.feature, params["lam"], plan.sigma,
                                          env_rng, schema)
        else:
            new, stats = biased_subsample(env, params["mu1"], params["mu0"],
                                          plan.kind == "BiasSampObs", env_rng)
        envs.append(new)
        report.per_env[env.name] = stats
    if plan.kind == "CorrLabel":
        schema = schema.with_static_categorical(CORRUPTED_LABEL_CHANNEL, 2)
    elif plan.kind == "BiasSampObs":
        schema = schema.with_static_categorical(GROUP_CHANNEL, 2)
    return build_environment_suite(envs, suite.roles, schema, suite.seeds), report


def make_plan(kind: str, suite: EnvironmentSuite | None = None, **kw) -> ShiftPlan:
    """Build a plan from the usual (beta, delta, val, test) parameterization.

    CorrLabel defaults to the fixed p_val = 0.5, p_test = 0.9;
    CorrNoise uses lambda_val = 0, lambda_test = -1, sigma = 0.5; biased
    subsampling takes ``targets`` {env: (mu1, mu0)} and defaults to the
    eICU region targets.
    """
    if kind == "Base":
        return ShiftPlan("Base")
    if kind in ("CorrLabel", "CorrNoise"):
        if suite is None:
            raise ConfigurationError(f"{kind} plan needs the suite to assign parameters")
        if kind == "CorrLabel":
            exp = expand_beta_delta(kw.get("beta", 0.3), kw.get("delta", 0.1),
                                    len(suite.train_names), kw.get("val", 0.5),
                                    kw.get("test", 0.9), probability=True)
            return ShiftPlan(kind, assign_by_role(suite, exp, "p"))
        exp = expand_beta_delta(kw.get("beta", 1.0), kw.get("delta", 0.5),
                                len(suite.train_names), kw.get("val", 0.0),
                                kw.get("test", -1.0), probability=False)
        return ShiftPlan(kind, assign_by_role(suite, exp, "lam"),
                         sigma=kw.get("sigma", 0.5),
                         feature=kw.get("feature", "admission_weight"))
    if kind in ("BiasSampUnobs", "BiasSampObs"):
        targets = kw.get("targets", EICU_SUBSAMPLE_TARGETS)
        return ShiftPlan(kind, {n: {"mu1": float(v[0]), "mu0": float(v[1])}
                                for n, v in targets.items()})
    if kind == "ColoredMNIST":
        return ShiftPlan(kind, extra={k: kw[k] for k in ("eta", "beta", "delta") if k in kw})
    raise ConfigurationError(f"unknown shift kind {kind!r}; valid kinds: {SHIFT_KINDS}")


# Colored MNIST ---------------------------------------------------------------

CMNIST_BASELINE = {"eta": 0.25, "beta": 0.15, "delta": 0.1}


def load_mnist_digits(path: str | None = None, downsample: int = 2
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Grayscale digits in [0, 1] with shape (N, 28/downsample, 28/downsample).

    ``path`` may point to an ``mnist.npz`` with ``x_train, y_train, x_test,
    y_test`` arrays (the Keras layout). Without it the 5,000-image MNIST
    subset bundled with mlxtend is used.
    """
    if path is not None:
        with np.load(path) as data:
            images = np.concatenate([data["x_train"], data["x_test"]])
            digits = np.concatenate([data["y_train"], data["y_test"]])
    else:
        try:
            from mlxtend.data import mnist_data
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise DataError("no MNIST path given and mlxtend is not installed") from exc
        images, digits = mnist_data()
    images = np.asarray(images, dtype=np.float32).reshape(-1, 28, 28)
    if images.max() > 1.0:
        images = images / 255.0
    images = images[:, ::downsample, ::downsample]
    return np.ascontiguousarray(images), np.asarray(digits, dtype=np.int64)


def colored_mnist_flip_probabilities(beta: float, delta: float, p_test: float = 0.9
                                     ) -> tuple[float, float, float]:
    return beta + delta / 2, beta - delta / 2, p_test


def generate_colored_mnist(eta: float, beta: float, delta: float,
                           base_images: np.ndarray, digits: np.ndarray,
                           rng: np.random.Generator | int | None = None,
                           n_train: int = 25_000, n_test: int = 10_000,
                           p_test: float = 0.9) -> tuple[EnvironmentSuite, ShiftReport]:
    """Two-channel Colored MNIST with two training and one test environment.

    Binary label 1[digit >= 5] is flipped with probability ``eta``; the colour
    bit copies the noisy label and is flipped with probability
    beta + delta/2, beta - delta/2 and ``p_test`` in e1, e2 and test. The
    image goes to channel 0 when the colour bit is 0 and to channel 1 otherwise.
    """
    p1, p2, pt = colored_mnist_flip_probabilities(beta, delta, p_test)
    for name, p in (("eta", eta), ("beta + delta/2", p1), ("beta - delta/2", p2),
                    ("p_test", pt)):
        _check_prob(p, name)
    base_images = np.asarray(base_images, dtype=np.float32)
    digits = np.asarray(digits)
    need = 2 * n_train + n_test
    if len(base_images) < need:
        raise DataError(f"Colored MNIST needs {need} base images, got {len(base_images)}")
    if len(digits) != len(base_images):
        raise DataError("base_images and digits differ in length")
    rng = np.random.default_rng(rng)
    perm = rng.permutation(len(base_images))
    parts = {"e1": perm[:n_train], "e2": perm[n_train:2 * n_train],
             "test": perm[2 * n_train:need]}
    probs = {"e1": p1, "e2": p2, "test": pt}
    hw = base_images.shape[1:]
    n_pix = int(np.prod(hw))
    envs, report = [], ShiftReport("ColoredMNIST")
    for name, idx in parts.items():
        n = len(idx)
        y_clean = (digits[idx] >= 5).astype(np.int8)
        label_flip = rng.random(n) < eta
        y = np.where(label_flip, 1 - y_clean, y_clean).astype(np.int8)
        color_flip = rng.random(n) < probs[name]
        color = np.where(color_flip, 1 - y, y).astype(np.int8)
        img = base_images[idx].reshape(n, n_pix)
        c = color[:, None].astype(np.float32)
        X = np.concatenate([img * (1.0 - c), img * c], axis=1)
        envs.append(Environment(
            name,
            seq=np.zeros((n, 0, 0), np.float32), seq_cat=np.zeros((n, 0, 0), np.int64),
            static=X, static_cat=np.zeros((n, 0), np.int64), y=y, group=color))
        report.per_env[name] = {
            "n": n, "label_flip_rate": float(label_flip.mean()),
            "color_flip_rate": float(color_flip.mean()), "color_flip_prob": probs[name],
            "color_label_agreement": float((color == y).mean()),
            "label_rate": float(y.mean()),
        }
    schema = FeatureSchema(
        static_continuous=tuple(f"c{ch}_{i}" for ch in range(2) for i in range(n_pix)))
    roles = {"e1": "train", "e2": "train", "test": "test"}
    return build_environment_suite(envs, roles, schema), report
