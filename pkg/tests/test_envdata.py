import dataclasses
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgbench.envdata import (EICU_ENVIRONMENTS, ClinicalAdapter, Environment, Example,
                             FeatureSchema, SeedBundle, Standardizer, SyntheticConfig,
                             apply_standardizer, build_environment_suite, eicu_schema,
                             fit_standardizer, generate_synthetic_suite, infer_schema,
                             invariant_logit, load_suite, save_suite, split_environment,
                             split_suite)
from dgbench.evalmetrics import auroc
from dgbench.exceptions import ConfigurationError, DataError, SchemaError


def make_env(name, n=20, n_static=3, seed=0, mean=0.0):
    rng = np.random.default_rng(seed)
    return Environment(
        name,
        seq=rng.normal(mean, 1, size=(n, 4, 2)).astype(np.float32),
        seq_cat=rng.integers(0, 3, size=(n, 4, 1)),
        static=rng.normal(mean, 1, size=(n, n_static)).astype(np.float32),
        static_cat=rng.integers(0, 2, size=(n, 1)),
        y=rng.integers(0, 2, size=n).astype(np.int8),
        group=rng.integers(0, 2, size=n).astype(np.int8))


def eicu_layout(n=20, **kw):
    envs = [make_env(name, n, seed=i, **kw) for i, name in enumerate(EICU_ENVIRONMENTS)]
    return build_environment_suite(envs, EICU_ENVIRONMENTS)


class TestSuite:
    def test_eicu_layout_valid(self):
        suite = eicu_layout()
        assert suite.train_names == ["Midwest", "West", "Northeast"]
        assert suite.validation_name == "Missing"
        assert suite.test_name == "South"

    def test_single_train_env_rejected(self):
        envs = [make_env("a"), make_env("b")]
        with pytest.raises(ConfigurationError):
            build_environment_suite(envs, {"a": "train", "b": "test"})

    def test_two_test_envs_rejected(self):
        envs = [make_env(n) for n in "abcd"]
        with pytest.raises(ConfigurationError):
            build_environment_suite(envs, {"a": "train", "b": "train", "c": "test", "d": "test"})

    def test_roles_must_cover_envs(self):
        envs = [make_env(n) for n in "abc"]
        with pytest.raises(ConfigurationError):
            build_environment_suite(envs, {"a": "train", "b": "train"})

    def test_schema_mismatch(self):
        envs = [make_env("a"), make_env("b", n_static=4), make_env("c")]
        with pytest.raises(SchemaError):
            build_environment_suite(envs, {"a": "train", "b": "train", "c": "test"})

    def test_inconsistent_row_counts(self):
        env = make_env("a")
        with pytest.raises(SchemaError):
            env.replace(group=env.group[:-1])

    def test_non_binary_labels(self):
        env = make_env("a")
        with pytest.raises(SchemaError):
            env.replace(y=np.full(len(env), 2, np.int8))

    def test_environment_is_read_only(self):
        env = make_env("a")
        with pytest.raises(ValueError):
            env.static[0, 0] = 1.0

    def test_example_round_trip(self):
        env = make_env("a", n=5)
        again = Environment.from_examples("a", list(env.examples()), seq_len=4)
        assert again == env
        assert isinstance(env.example(0), Example)


class TestSplit:
    def test_exact_sizes(self):
        env = split_environment(make_env("a", n=100), (0.8, 0.1, 0.1), 0)
        assert [len(env.splits[k]) for k in ("train", "val", "test")] == [80, 10, 10]

    def test_deterministic(self):
        a = split_environment(make_env("a", n=50), rng=3)
        b = split_environment(make_env("a", n=50), rng=3)
        assert all(np.array_equal(a.splits[k], b.splits[k]) for k in a.splits)

    def test_bad_fractions(self):
        with pytest.raises(ConfigurationError):
            split_environment(make_env("a"), (0.5, 0.5, 0.5), 0)

    def test_too_small(self):
        with pytest.raises(DataError):
            split_environment(make_env("a", n=2), rng=0)

    @given(n=st.integers(3, 300), seed=st.integers(0, 10_000),
           f=st.tuples(st.floats(0.05, 1), st.floats(0, 1), st.floats(0, 1)))
    @settings(max_examples=60, deadline=None)
    def test_partition(self, n, seed, f):
        fr = np.array(f) / sum(f)
        fr[2] = max(0.0, 1.0 - fr[0] - fr[1])
        env = split_environment(make_env("a", n=n), tuple(fr), seed)
        idx = np.concatenate([env.splits[k] for k in ("train", "val", "test")])
        assert sorted(idx.tolist()) == list(range(n))

    def test_split_suite_per_role(self):
        suite = split_suite(eicu_layout(n=40), {"train": (0.5, 0.25, 0.25),
                                                 "validation": (0.7, 0.1, 0.2),
                                                 "test": (0.2, 0.4, 0.4)}, seed=1)
        assert len(suite["Midwest"].splits["train"]) == 20
        assert len(suite["South"].splits["val"]) == 16


class TestStandardizer:
    def test_constant_channel(self):
        X = np.column_stack([np.full(50, 5.0), np.arange(50.0)])
        with pytest.warns(RuntimeWarning, match="zero-variance"):
            st_ = Standardizer().fit(X)
        out = st_.transform(X)
        assert np.allclose(out[:, 0], 0.0)

    def test_moments(self):
        X = np.random.default_rng(0).normal(10, 2, size=(10_000, 1))
        out = Standardizer().fit_transform(X)
        assert abs(out.mean()) < 0.05 and abs(out.var() - 1) < 0.1

    def test_sklearn_params(self):
        assert Standardizer().get_params() == {}

    def test_uses_training_statistics_only(self):
        envs = [make_env(n, n=400, seed=i, mean=(5.0 if n == "South" else 0.0))
                for i, n in enumerate(EICU_ENVIRONMENTS)]
        suite = split_suite(build_environment_suite(envs, EICU_ENVIRONMENTS), seed=0)
        st_ = fit_standardizer(suite)
        train = np.concatenate([suite[n].split("train").static for n in suite.train_names])
        assert np.allclose(st_.static.transform(train).mean(axis=0), 0, atol=1e-6)
        test = apply_standardizer(st_, suite["South"])
        assert test.static.mean() > 3.0
        assert np.array_equal(test.static_cat, suite["South"].static_cat)


class TestSynthetic:
    def test_deterministic(self):
        cfg = SyntheticConfig(n_per_env=200)
        assert generate_synthetic_suite(cfg, 5) == generate_synthetic_suite(cfg, 5)

    def test_zero_examples(self):
        with pytest.raises(ConfigurationError):
            generate_synthetic_suite(SyntheticConfig(n_per_env=0), 0)

    def test_layout_and_schema(self):
        suite = generate_synthetic_suite(SyntheticConfig(n_per_env=50), 0)
        assert suite.roles == EICU_ENVIRONMENTS
        assert suite.schema.static_continuous[0] == "admission_weight"
        assert infer_schema(suite.environments[0]).seq_len == 8

    def test_bayes_rule_auroc_matches_across_envs(self):
        cfg = SyntheticConfig(n_per_env=2000)
        suite = generate_synthetic_suite(cfg, 1)
        scores = [auroc(invariant_logit(e, cfg), e.y) for e in suite.environments]
        # standard error of AUROC at n=2000 is about 0.01
        assert max(scores) - min(scores) < 0.05

    def test_invariant_mechanism_agrees_across_envs(self):
        cfg = SyntheticConfig(n_per_env=10_000, seq_len=2)
        suite = generate_synthetic_suite(cfg, 2)
        edges = [-np.inf, -1.0, 0.0, 1.0, np.inf]
        for b in range(4):
            rates, ns = [], []
            for env in suite.environments:
                z = invariant_logit(env, cfg)
                sel = (z >= edges[b]) & (z < edges[b + 1])
                rates.append(env.y[sel].mean())
                ns.append(sel.sum())
            pooled = np.average(rates, weights=ns)
            for r, n in zip(rates, ns):
                half = 2.576 * np.sqrt(pooled * (1 - pooled) / n)
                assert abs(r - pooled) <= half + 1e-3

    def test_zero_nuisance_identical_distributions(self):
        cfg = SyntheticConfig(n_per_env=5000, nuisance_strength=0.0, seq_len=2)
        suite = generate_synthetic_suite(cfg, 3)
        means = np.array([e.static.mean(axis=0) for e in suite.environments])
        seq = np.array([e.seq.mean(axis=(0, 1)) for e in suite.environments])
        assert np.ptp(means, axis=0).max() < 0.15
        assert np.ptp(seq, axis=0).max() < 0.15

    def test_config_round_trip(self):
        cfg = SyntheticConfig(n_per_env=10, env_offsets=(0, 1, 2, 3, 4))
        assert SyntheticConfig.from_dict(cfg.to_dict()) == cfg

    def test_multilabel(self):
        suite = generate_synthetic_suite(SyntheticConfig(n_per_env=50, n_labels=3), 0)
        assert suite.schema.multilabel
        assert suite.environments[0].y.shape == (50, 3)


def test_save_load_round_trip(tmp_path):
    suite = split_suite(generate_synthetic_suite(SyntheticConfig(n_per_env=30), 0), seed=2)
    suite = suite.with_seeds(SeedBundle(1, 2, 3))
    save_suite(suite, tmp_path / "s")
    assert load_suite(tmp_path / "s") == suite


def test_load_missing(tmp_path):
    with pytest.raises(DataError):
        load_suite(tmp_path)


def test_seed_bundle_derive():
    s = SeedBundle(1, 2, 3)
    assert s.derive("data", 0) == SeedBundle(1, 9, 9).derive("data", 0)
    assert s.derive("data", 0) != s.derive("data", 1)
    assert s.derive("model", 0, 1) != s.derive("model", 1, 0)


def test_schema_round_trip():
    schema = eicu_schema()
    assert FeatureSchema.from_dict(schema.to_dict()) == schema
    assert len(schema.seq_continuous) == 10 and len(schema.seq_categorical) == 4
    assert len(schema.static_continuous) == 3 and len(schema.static_categorical) == 2


def test_adapter_is_interface_only():
    with pytest.raises(NotImplementedError):
        ClinicalAdapter().load()
