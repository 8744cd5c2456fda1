import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgbench.envdata import (EICU_ENVIRONMENTS, Environment, SyntheticConfig,
                             generate_synthetic_suite)
from dgbench.exceptions import (ConfigurationError, DataError, FeatureTypeError,
                                InfeasibilityError, RangeError, UnsupportedModeError)
from dgbench.shifts import (CMNIST_BASELINE, CORRUPTED_LABEL_CHANNEL, EICU_SUBSAMPLE_TARGETS,
                            GROUP_CHANNEL, ShiftPlan, apply_shift, biased_subsample,
                            colored_mnist_flip_probabilities, correlated_noise,
                            corrupt_label_feature, expand_beta_delta, generate_colored_mnist,
                            load_mnist_digits, make_plan, subsample_probability)


def tabular_env(n, y=None, group=None, seed=0, name="e"):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n).astype(np.int8) if y is None else np.asarray(y, np.int8)
    group = rng.integers(0, 2, n).astype(np.int8) if group is None else np.asarray(group, np.int8)
    return Environment(name, np.zeros((n, 0, 0), np.float32), np.zeros((n, 0, 0), np.int64),
                       rng.normal(size=(n, 2)).astype(np.float32),
                       np.zeros((n, 1), np.int64), y, group)


@pytest.fixture(scope="module")
def suite():
    return generate_synthetic_suite(SyntheticConfig(n_per_env=400, seq_len=2), 0)


class TestExpand:
    def test_corr_label_scheme(self):
        out = expand_beta_delta(0.3, 0.1, 3, 0.5, 0.9)
        assert np.allclose(out["train"], (0.2, 0.3, 0.4))
        assert (out["validation"], out["test"]) == (0.5, 0.9)

    def test_corr_noise_scheme(self):
        out = expand_beta_delta(2.0, 0.5, 3, 0.0, -1.0, probability=False)
        assert out["train"] == [1.5, 2.0, 2.5] and out["test"] == -1.0

    def test_zero_gap(self):
        assert len(set(expand_beta_delta(0.3, 0.0, 3)["train"])) == 1

    def test_negative_probability(self):
        with pytest.raises(RangeError):
            expand_beta_delta(0.05, 0.1, 3)

    def test_even_count(self):
        with pytest.raises(ConfigurationError):
            expand_beta_delta(0.3, 0.1, 2)

    def test_five_envs_symmetric(self):
        assert np.allclose(expand_beta_delta(0.5, 0.1, 5)["train"], (0.3, 0.4, 0.5, 0.6, 0.7))


class TestCorrLabel:
    def test_no_and_full_flip(self):
        env = tabular_env(500)
        same, _ = corrupt_label_feature(env, 0.0, 0)
        flipped, _ = corrupt_label_feature(env, 1.0, 0)
        assert np.array_equal(same.static_cat[:, -1], env.y)
        assert np.array_equal(flipped.static_cat[:, -1], 1 - env.y)
        assert np.array_equal(same.static, env.static)
        assert np.array_equal(same.static_cat[:, :-1], env.static_cat)

    def test_half_flip_independent(self):
        env = tabular_env(100_000, seed=1)
        out, _ = corrupt_label_feature(env, 0.5, 2)
        assert abs(np.corrcoef(out.static_cat[:, -1], env.y)[0, 1]) < 0.01

    def test_multilabel_rejected(self):
        suite = generate_synthetic_suite(SyntheticConfig(n_per_env=20, n_labels=2), 0)
        with pytest.raises(UnsupportedModeError):
            corrupt_label_feature(suite.environments[0], 0.1, 0)

    def test_suite_rates(self, suite):
        plan = make_plan("CorrLabel", suite, beta=0.1, delta=0.1)
        out, report = apply_shift(suite, plan, 0)
        assert out.schema.static_categorical[-1] == CORRUPTED_LABEL_CHANNEL
        rates = [report.per_env[n]["flip_rate"] for n in suite.train_names]
        assert rates[0] == 0.0
        assert abs(rates[1] - 0.1) < 0.05 and abs(rates[2] - 0.2) < 0.06
        assert report.per_env["South"]["p"] == 0.9


class TestCorrNoise:
    def test_zero_lambda(self):
        env = tabular_env(20_000, seed=2)
        out, _ = correlated_noise(env, 0, 0.0, 0.5, 1)
        d = out.static[:, 0] - env.static[:, 0]
        assert abs(d.mean()) < 3 * 0.5 / np.sqrt(len(d))

    def test_deterministic_limit(self):
        env = tabular_env(1000, seed=3)
        out, _ = correlated_noise(env, 0, 1.0, 1e-9, 1)
        d = out.static[:, 0].astype(np.float64) - env.static[:, 0]
        assert np.allclose(d, 2.0 * env.y - 1.0, atol=1e-5)

    def test_class_means_and_variance(self):
        env = tabular_env(100_000, seed=4)
        out, stats = correlated_noise(env, 0, 2.0, 0.5, 5)
        d = out.static[:, 0].astype(np.float64) - env.static[:, 0]
        assert abs(d[env.y == 1].mean() - 2.0) < 0.02
        assert abs(d[env.y == 0].mean() + 2.0) < 0.02
        assert abs(stats["noise_var_y1"] / 0.25 - 1) < 0.05
        assert abs(stats["noise_var_y0"] / 0.25 - 1) < 0.05

    def test_type_errors(self, suite):
        env = suite.environments[0]
        with pytest.raises(FeatureTypeError):
            correlated_noise(env, "cat0", 1.0, 0.5, 0, suite.schema)
        with pytest.raises(FeatureTypeError):
            correlated_noise(env, "seq0", 1.0, 0.5, 0, suite.schema)
        with pytest.raises(RangeError):
            correlated_noise(env, 0, 1.0, 0.0, 0)

    def test_plan_targets_admission_weight(self, suite):
        plan = make_plan("CorrNoise", suite, beta=2.0, delta=0.5)
        assert plan.feature == "admission_weight"
        assert [plan.per_env_params[n]["lam"] for n in suite.train_names] == [1.5, 2.0, 2.5]
        assert plan.per_env_params["Missing"]["lam"] == 0.0
        assert plan.per_env_params["South"]["lam"] == -1.0


class TestSubsampling:
    def test_no_op(self):
        assert subsample_probability(1, 0.3, 0.3) == 0.0
        assert subsample_probability(0, 0.3, 0.3) == 0.0

    def test_frozen_values(self):
        assert subsample_probability(1, 0.2, 0.5) == pytest.approx(0.75)
        assert subsample_probability(0, 0.5, 0.2) == pytest.approx(0.75)
        assert subsample_probability(0, 0.2, 0.5) == 0.0
        assert subsample_probability(1, 0.5, 0.2) == 0.0

    @pytest.mark.parametrize("mu,tau", [(0.0, 0.5), (1.0, 0.5), (0.5, 0.0), (0.5, 1.0)])
    def test_range_errors(self, mu, tau):
        with pytest.raises(RangeError):
            subsample_probability(1, mu, tau)

    @given(mu=st.floats(1e-3, 1 - 1e-3), tau=st.floats(1e-3, 1 - 1e-3), y=st.sampled_from([0, 1]))
    @settings(max_examples=300, deadline=None)
    def test_probability_bounds(self, mu, tau, y):
        p = subsample_probability(y, mu, tau)
        assert 0.0 <= p <= 1.0

    @given(mu=st.floats(0.01, 0.99), tau=st.floats(0.01, 0.99))
    @settings(max_examples=300, deadline=None)
    def test_keep_rate_algebra(self, mu, tau):
        keep1 = 1 - subsample_probability(1, mu, tau)
        keep0 = 1 - subsample_probability(0, mu, tau)
        expected = keep1 * tau / (keep1 * tau + keep0 * (1 - tau))
        assert expected == pytest.approx(mu, rel=1e-9, abs=1e-12)

    def test_already_at_target(self):
        env = tabular_env(400, y=np.tile([0, 1], 200), group=np.repeat([0, 1], 200))
        out, stats = biased_subsample(env, 0.5, 0.5, rng=0)
        assert out == env and stats["n_after"] == 400

    def test_midwest_targets(self):
        n = 100_000
        y = np.tile([0, 1], n)
        group = np.repeat([1, 0], n)
        env = tabular_env(2 * n, y=y, group=group)
        mu1, mu0 = EICU_SUBSAMPLE_TARGETS["Midwest"]
        out, stats = biased_subsample(env, mu1, mu0, rng=1)
        assert abs(out.y[out.group == 1].mean() - 0.80) < 0.01
        assert abs(out.y[out.group == 0].mean() - 0.05) < 0.005
        assert stats["n_after"] <= stats["n_before"]

    def test_only_removes(self):
        env = tabular_env(2000, seed=5)
        out, _ = biased_subsample(env, 0.8, 0.2, rng=2)
        rows = {tuple(r) for r in np.column_stack([env.static, env.y, env.group]).tolist()}
        assert all(tuple(r) in rows
                   for r in np.column_stack([out.static, out.y, out.group]).tolist())

    def test_infeasible_cell_named(self):
        env = tabular_env(100, y=np.ones(100), group=np.tile([0, 1], 50))
        with pytest.raises(InfeasibilityError, match="group=1, label=0"):
            biased_subsample(env, 0.5, 0.5, rng=0)

    def test_observed_appends_attribute(self, suite):
        obs, _ = apply_shift(suite, make_plan("BiasSampObs"), 0)
        unobs, _ = apply_shift(suite, make_plan("BiasSampUnobs"), 0)
        assert obs.schema.static_categorical[-1] == GROUP_CHANNEL
        assert unobs.schema == suite.schema
        for env in obs.environments:
            assert np.array_equal(env.static_cat[:, -1], env.group)

    def test_mu_out_of_range(self, suite):
        plan = ShiftPlan("BiasSampObs", {n: {"mu1": 1.0, "mu0": 0.2} for n in suite.names})
        with pytest.raises(RangeError):
            apply_shift(suite, plan, 0)


class TestApplyShift:
    def test_base_identity(self, suite):
        out, report = apply_shift(suite, ShiftPlan("Base"), 0)
        assert out is suite and report.per_env == {}

    def test_deterministic(self, suite):
        plan = make_plan("CorrLabel", suite, beta=0.3, delta=0.1)
        assert apply_shift(suite, plan, 7)[0] == apply_shift(suite, plan, 7)[0]

    def test_cmnist_plan_on_tabular(self, suite):
        with pytest.raises(ConfigurationError):
            apply_shift(suite, make_plan("ColoredMNIST", **CMNIST_BASELINE), 0)

    def test_missing_env_params(self, suite):
        with pytest.raises(ConfigurationError):
            apply_shift(suite, ShiftPlan("CorrLabel", {"Midwest": {"p": 0.1}}), 0)

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            ShiftPlan("Rotate")

    def test_plan_round_trip(self, suite):
        plan = make_plan("CorrNoise", suite)
        assert ShiftPlan.from_dict(plan.to_dict()) == plan


@pytest.fixture(scope="module")
def digits():
    return load_mnist_digits()


class TestColoredMNIST:
    def test_baseline_probabilities(self):
        p1, p2, pt = colored_mnist_flip_probabilities(0.15, 0.1)
        assert (p1, p2, pt) == (pytest.approx(0.2), pytest.approx(0.1), 0.9)

    def test_construction(self, digits):
        images, labels = digits
        assert images.shape[1:] == (14, 14) and 0.0 <= images.min() and images.max() <= 1.0
        suite, report = generate_colored_mnist(0.0, 0.15, 0.1, images, labels, 0,
                                               n_train=2000, n_test=1000)
        assert suite.train_names == ["e1", "e2"] and suite.test_name == "test"
        for env in suite.environments:
            X = env.static.reshape(len(env), 2, -1)
            assert not ((X[:, 0] != 0) & (X[:, 1] != 0)).any()
            assert abs(env.y.mean() - 0.5) < 0.05
            assert report.per_env[env.name]["label_flip_rate"] == 0.0
            agree = report.per_env[env.name]["color_label_agreement"]
            p = report.per_env[env.name]["color_flip_prob"]
            assert abs(agree - (1 - p)) <= 3 * np.sqrt(p * (1 - p) / len(env)) + 1e-9

    def test_noise_free_labels(self, digits):
        images, labels = digits
        suite, _ = generate_colored_mnist(0.0, 0.15, 0.1, images, labels, 0, n_train=100,
                                          n_test=50)
        # with eta=0 the label is the digit threshold, recovered through the image
        e1 = suite["e1"]
        img = e1.static.reshape(len(e1), 2, -1).sum(axis=1)
        flat = images.reshape(len(images), -1)
        for i in range(10):
            j = np.flatnonzero((flat == img[i]).all(axis=1))[0]
            assert e1.y[i] == int(labels[j] >= 5)

    def test_insufficient_images(self, digits):
        images, labels = digits
        with pytest.raises(DataError):
            generate_colored_mnist(0.25, 0.15, 0.1, images[:100], labels[:100], 0)

    def test_bad_probability(self, digits):
        images, labels = digits
        with pytest.raises(RangeError):
            generate_colored_mnist(0.25, 0.05, 0.2, images, labels, 0, n_train=10, n_test=10)
