import pytest

from dgbench.envdata import SeedBundle, SyntheticConfig, generate_synthetic_suite, split_suite
from dgbench.exceptions import ConfigurationError
from dgbench.models import ModelSpec
from dgbench.selection import (AccessLog, AuditedData, RunRecord, RunSettings,
                               SelectionStrategy, random_search, run_single, selection_set,
                               train_oracle, training_sets)

SETTINGS = RunSettings(steps=20, checkpoint_every=10, batch_size=32,
                       model=ModelSpec(hidden_sizes=(8,)))


@pytest.fixture(scope="module")
def suite():
    return generate_synthetic_suite(SyntheticConfig(n_per_env=150, seq_len=2), 0)


@pytest.fixture
def data(suite):
    return AuditedData(split_suite(suite, seed=0))


class TestStrategy:
    def test_unknown(self):
        with pytest.raises(ConfigurationError):
            SelectionStrategy("oracle")
        with pytest.raises(ConfigurationError):
            SelectionStrategy(metric="f1")

    def test_unrealistic_flag(self):
        assert SelectionStrategy("test_domain").to_dict()["unrealistic"]
        assert not SelectionStrategy("training_domains").unrealistic

    def test_validation_domain_requires_env(self, suite):
        roles = {**suite.roles, "Missing": "train"}
        no_val = suite.__class__(suite.environments, roles, suite.schema)
        with pytest.raises(ConfigurationError, match="validation"):
            SelectionStrategy("validation_domain").validate(no_val)


class TestSelectionData:
    @pytest.mark.parametrize("kind,envs,split", [
        ("training_domains", {"Midwest", "West", "Northeast"}, "val"),
        ("validation_domain", {"Missing"}, "all"),
        ("test_domain", {"South"}, "val"),
    ])
    def test_sources(self, data, kind, envs, split):
        selection_set(data, SelectionStrategy(kind), "ERM")
        reads = data.log.reads(phase="select")
        assert {e["env"] for e in reads} == envs
        assert {e["split"] for e in reads} == {split}

    def test_oracle_training_sets(self, data):
        sets = training_sets(data, "OracleID")
        assert len(sets) == 1
        assert {(e["env"], e["split"]) for e in data.log.reads(phase="train")
                if e["env"] == "South"} == {("South", "train")}
        assert len(training_sets(data, "OracleMerged")) == 1

    def test_standardizer_reads_training_only(self, data):
        assert {e["env"] for e in data.log.entries} == {"Midwest", "West", "Northeast"}


class TestRunSingle:
    def test_no_test_reads_before_final(self, data):
        rec = run_single(data, "IRM", {"lr": 1e-3, "lambda": 10.0},
                         SelectionStrategy(), SETTINGS, 0)
        assert rec.status == "ok" and rec.test_reads_before_final == 0
        finals = [e for e in rec.audit if e["phase"] == "final"]
        assert finals and all(e["env"] == "South" and e["split"] == "test" for e in finals)
        for key in ("auroc", "accuracy", "tpr_gap", "tnr_gap", "mcc"):
            assert key in rec.test_metrics

    def test_oracle_isolation(self, data):
        rec = train_oracle("OracleID", data, {"lr": 1e-3}, SETTINGS)
        train_reads = {(e["env"], e["split"]) for e in rec.audit if e["phase"] == "train"}
        # standardizer statistics come from training-role train splits
        assert ("South", "train") in train_reads
        assert all(s == "train" for _, s in train_reads)
        select = {(e["env"], e["split"]) for e in rec.audit if e["phase"] == "select"}
        assert select == {("South", "val")}

    def test_bad_oracle(self, data):
        with pytest.raises(ConfigurationError):
            train_oracle("ERM", data, {}, SETTINGS)

    def test_record_round_trip(self, data):
        rec = run_single(data, "ERM", {"lr": 1e-3}, SelectionStrategy(), SETTINGS, 1)
        assert RunRecord.from_dict(rec.to_dict()) == rec

    def test_hparams_override_architecture(self, data):
        rec = run_single(data, "ERM", {"lr": 1e-3, "hidden_sizes": [4, 4], "batch_size": 16},
                         SelectionStrategy(), SETTINGS, 1)
        assert rec.status == "ok"

    def test_gru_size_searchable(self, suite):
        settings = RunSettings(steps=5, checkpoint_every=5, batch_size=16,
                               model=ModelSpec(family="gru", hidden_sizes=()))
        s = random_search(suite, "ERM", SelectionStrategy(), settings, SeedBundle(), 2, 1,
                          space_overrides={"gru_hidden": ["int", 4, 12],
                                           "gru_layers": ["choice", [1, 2]]})
        assert all(4 <= r.hparams["gru_hidden"] <= 12 and r.status == "ok"
                   for r in s.all_records)

    def test_diverged_run_flagged(self, data):
        rec = run_single(data, "VREx", {"lr": 1e10, "lambda": 1e300},
                         SelectionStrategy(), SETTINGS, 1)
        assert rec.status in ("diverged", "failed")

    def test_settings_round_trip(self):
        assert RunSettings.from_dict(SETTINGS.to_dict()) == SETTINGS
        with pytest.raises(ConfigurationError):
            RunSettings(threshold_on="train")


class TestRandomSearch:
    def test_single_iteration_is_single_run(self, suite):
        seeds = SeedBundle(0, 1, 2)
        summary = random_search(suite, "ERM", SelectionStrategy(), SETTINGS, seeds, 1, 1,
                                space_overrides={"lr": 1e-3})
        data = AuditedData(split_suite(suite, SETTINGS.fractions, seed=seeds.derive("data", 0)))
        rec = run_single(data, "ERM", {"lr": 1e-3}, SelectionStrategy(), SETTINGS,
                         seeds.derive("model", 0, 0))
        assert summary.best_records[0].test_metrics == rec.test_metrics

    def test_deterministic(self, suite):
        runs = [random_search(suite, "IRM", SelectionStrategy(), SETTINGS, SeedBundle(3, 4, 5),
                              2, 2) for _ in range(2)]
        assert [r.hparams for r in runs[0].all_records] == [r.hparams for r in runs[1].all_records]
        assert runs[0].values("auroc") == runs[1].values("auroc")

    def test_repeats_use_different_configs_and_splits(self, suite):
        s = random_search(suite, "ERM", SelectionStrategy(), SETTINGS, SeedBundle(), 2, 2)
        assert s.all_records[0].hparams != s.all_records[2].hparams
        assert s.all_records[0].seeds["data_seed"] != s.all_records[2].seeds["data_seed"]

    def test_best_of_n_monotone(self, suite):
        # with a shared prefix of configurations, more iterations never lower the best score
        s3 = random_search(suite, "ERM", SelectionStrategy(), SETTINGS, SeedBundle(), 3, 1)
        s1 = random_search(suite, "ERM", SelectionStrategy(), SETTINGS, SeedBundle(), 1, 1)
        assert s3.best_records[0].selection_score >= s1.best_records[0].selection_score

    def test_best_is_argmax(self, suite):
        s = random_search(suite, "ERM", SelectionStrategy(), SETTINGS, SeedBundle(), 3, 1)
        assert s.best_records[0].selection_score == max(r.selection_score for r in s.all_records)

    def test_failed_repeat_warns(self, suite):
        with pytest.warns(RuntimeWarning, match="repeat 0"):
            s = random_search(suite, "VREx", SelectionStrategy(), SETTINGS, SeedBundle(), 1, 1,
                              fixed_hparams={"lr": 1e10, "lambda": 1e300})
        assert s.failed_repeats == [0] and s.cell("auroc") == "n/a"

    def test_lookup_skips_runs(self, suite):
        calls = []

        def lookup(r, i, hp):
            calls.append((r, i))
            return RunRecord("ERM", hp, {}, {}, r, i, selection_score=0.5,
                             test_metrics={"auroc": 0.7})

        s = random_search(suite, "ERM", SelectionStrategy(), SETTINGS, SeedBundle(), 2, 2,
                          lookup=lookup)
        assert calls == [(0, 0), (0, 1), (1, 0), (1, 1)]
        assert s.values("auroc") == [0.7, 0.7]

    def test_invalid_counts(self, suite):
        with pytest.raises(ConfigurationError):
            random_search(suite, "ERM", SelectionStrategy(), SETTINGS, n_iters=0)


def test_access_log_summary():
    log = AccessLog()
    for _ in range(3):
        log.record("a", "val", "train", "select")
    log.record("t", "test", "test", "select")
    assert len(log.summary()) == 2
    assert len(log.test_reads_before_final()) == 1
    assert len(log.reads(role="train")) == 3
