import json
from pathlib import Path

import pytest
import yaml

from dgbench.cli import main
from dgbench.exceptions import ConfigurationError, RangeError
from dgbench.harness import (ConfigValidationError, RecordStore, build_suite,
                             config_from_snapshot, emit_plot_data, emit_table, parse_config,
                             rows_from_records, run_experiment, set_dotted, sweep_cmnist,
                             sweep_lambda)

TINY = {
    "name": "tiny",
    "suite": {"source": "synthetic", "synthetic": {"n_per_env": 120, "seq_len": 2}},
    "algorithms": ["ERM", "IRM"],
    "run": {"steps": 10, "checkpoint_every": 5, "batch_size": 32,
            "model": {"hidden_sizes": [8]}},
    "search": {"n_iters": 2, "repeats": 2},
}


def tiny(tmp_path, **over):
    cfg = {**TINY, "output_dir": str(tmp_path / "out"), **over}
    return parse_config(cfg)


class TestConfig:
    def test_defaults_filled(self, monkeypatch, tmp_path):
        monkeypatch.setenv("DGBENCH_OUTPUT_ROOT", str(tmp_path))
        cfg = parse_config({"suite": {"source": "synthetic"}})
        snap = cfg.snapshot()
        assert snap["algorithms"] == ["ERM"]
        assert snap["selection"] == {"kind": "training_domains", "metric": "auroc"}
        assert snap["search"] == {"n_iters": 10, "repeats": 5}
        assert snap["run"]["steps"] == 1000 and snap["run"]["standardize"] is True
        assert snap["shift"] == {"kind": "Base"}
        assert cfg.output_dir == str(tmp_path / "experiment")

    def test_cmnist_defaults(self):
        cfg = parse_config({"suite": {"source": "cmnist"}})
        assert cfg.selection.metric == "accuracy" and not cfg.settings.standardize

    def test_unknown_algorithm_lists_valid(self):
        with pytest.raises(ConfigValidationError, match="IRMX.*'IRM'") as info:
            parse_config({**TINY, "algorithms": ["IRMX"]})
        assert info.value.path == "algorithms[0]"

    def test_subsample_target_out_of_range(self):
        with pytest.raises(RangeError, match="shift.targets.Midwest.mu1"):
            parse_config({**TINY, "shift": {"kind": "BiasSampObs",
                                            "targets": {"Midwest": [1.0, 0.1]}}})

    @pytest.mark.parametrize("raw,path", [
        ({"bogus": 1}, "bogus"),
        ({"run": {"steps": "many"}}, "run.steps"),
        ({"run": {"fractions": [0.5, 0.5, 0.5]}}, "run.fractions"),
        ({"suite": {"source": "ehr"}}, "suite.source"),
        ({"shift": {"kind": "ColoredMNIST"}}, "shift.kind"),
        ({"hparams": {"space": {"lr": ["gamma", 1, 2]}}}, "hparams.space.lr"),
        ({"search": {"repeats": 0}}, "search.repeats"),
    ])
    def test_named_errors(self, raw, path):
        with pytest.raises(ConfigValidationError) as info:
            parse_config({**TINY, **raw})
        assert info.value.path == path

    def test_corr_label_range(self):
        with pytest.raises(RangeError):
            parse_config({**TINY, "shift": {"kind": "CorrLabel", "beta": 0.95, "delta": 0.2}})

    def test_snapshot_round_trip(self, tmp_path):
        cfg = tiny(tmp_path, shift={"kind": "CorrNoise", "beta": 1.0})
        again = config_from_snapshot(json.loads(json.dumps(cfg.snapshot())))
        assert again == cfg and again.config_hash() == cfg.config_hash()

    def test_yaml_file_and_overrides(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump(TINY))
        cfg = parse_config(path, {"search.repeats": 3, "selection.kind": "test_domain"})
        assert cfg.repeats == 3 and cfg.selection.unrealistic

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigValidationError):
            parse_config(tmp_path / "nope.yaml")

    def test_set_dotted(self):
        raw = {"a": 1}
        set_dotted(raw, "b.c.d", 2)
        assert raw == {"a": 1, "b": {"c": {"d": 2}}}

    def test_build_suite_applies_shift(self, tmp_path):
        cfg = tiny(tmp_path, shift={"kind": "BiasSampObs"})
        suite, report, plan = build_suite(cfg)
        assert plan.kind == "BiasSampObs" and set(report.per_env) == set(suite.names)


class TestExperiment:
    def test_runs_and_persists(self, tmp_path):
        cfg = tiny(tmp_path, unaugmented=True, shift={"kind": "CorrLabel"})
        result = run_experiment(cfg)
        assert set(result.summaries) == {"ERM", "IRM", "ERM Unaug"}
        records = RecordStore(tmp_path / "out" / "records.jsonl").load()
        assert len(records) == 3 * 2 * 2
        assert all(r["test_reads_before_final"] == 0 for r in records)
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["config_hash"] == cfg.config_hash()

    def test_resume_does_not_rerun(self, tmp_path):
        cfg = tiny(tmp_path)
        first = run_experiment(cfg)
        store = RecordStore(tmp_path / "out" / "records.jsonl")
        n = len(store.load())
        second = run_experiment(cfg)
        assert len(store.load()) == n
        assert first.summaries["IRM"].values("auroc") == second.summaries["IRM"].values("auroc")

    def test_deterministic(self, tmp_path):
        a = run_experiment(tiny(tmp_path / "a"), persist=False)
        b = run_experiment(tiny(tmp_path / "b"), persist=False)
        assert a.summaries["IRM"].values("auroc") == b.summaries["IRM"].values("auroc")

    def test_truncated_record_skipped(self, tmp_path):
        store = RecordStore(tmp_path / "r.jsonl")
        store.append({"key": "a"})
        with open(store.path, "a") as fh:
            fh.write('{"key": "b", "sta')
        with pytest.warns(RuntimeWarning, match="truncated"):
            assert store.load() == [{"key": "a"}]

    def test_sweep_lambda(self, tmp_path):
        cfg = tiny(tmp_path, search={"n_iters": 1, "repeats": 2})
        rows = sweep_lambda(cfg, [10.0, 0.1], algorithms=["VREx"])
        assert [r["lambda"] for r in rows] == [0.1, 10.0]
        assert all(r["n"] == 2 for r in rows)
        with pytest.raises(ConfigurationError):
            sweep_lambda(cfg, [1.0], algorithms=["ERM"])

    def test_sweep_cmnist_requires_cmnist(self, tmp_path):
        with pytest.raises(ConfigurationError):
            sweep_cmnist(tiny(tmp_path), "eta", [0.1])


class TestOutput:
    ROWS = [{"setting": "Base", "method": m, "values": v} for m, v in
            [("OracleID", [0.9, 0.92]), ("ERM", [0.6, 0.62]), ("IRM", [0.7, 0.72]),
             ("ERM Unaug", [0.95, 0.95])]]

    def test_empty_table_has_header(self):
        lines = emit_table([]).splitlines()
        assert len(lines) == 2 and lines[0].count("|") == 12

    def test_layouts(self):
        assert emit_table([]).splitlines()[0].count("|") - 2 == 10
        assert emit_table([], "augmented").splitlines()[0].count("|") - 2 == 11
        with pytest.raises(ConfigurationError):
            emit_table([], "wide")

    def test_best_non_oracle_flagged(self):
        row = emit_table(self.ROWS, "augmented").splitlines()[2]
        assert "*0.710±0.014*" in row
        assert "*0.910" not in row and "*0.950" not in row

    def test_plot_data(self, tmp_path):
        rows = [{"method": "IRM", "lambda": 1.0, "mean": 0.7, "std": 0.1, "values": [0.7]}]
        text = emit_plot_data(rows, tmp_path / "p.csv")
        assert text.splitlines()[0] == "method,lambda,mean,std"
        assert (tmp_path / "p.csv").read_text() == text

    def test_rows_from_records_pick_best(self):
        recs = [{"status": "ok", "selection_score": s, "label": "ERM", "repeat": 0,
                 "strategy": {"kind": "training_domains"}, "config": {"name": "x"},
                 "test_metrics": {"auroc": a}} for s, a in [(0.5, 0.1), (0.9, 0.8)]]
        assert rows_from_records(recs)[0]["values"] == [0.8]


class TestCLI:
    def write(self, tmp_path, **over):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump({**TINY, "output_dir": str(tmp_path / "out"), **over}))
        return str(path)

    def test_search_and_report(self, tmp_path, capsys):
        cfg = self.write(tmp_path)
        assert main(["search", "--config", cfg, "--set", "search.repeats=1"]) == 0
        records = str(tmp_path / "out" / "records.jsonl")
        assert main(["report", records, "--layout", "augmented"]) == 0
        out = capsys.readouterr().out
        assert "| tiny |" in out

    def test_train(self, tmp_path):
        cfg = self.write(tmp_path, hparams={"fixed": {"lr": 1e-3}})
        assert main(["train", "--config", cfg, "--algorithm", "ERM"]) == 0

    def test_validation_error_exit_code(self, tmp_path, capsys):
        cfg = self.write(tmp_path, algorithms=["IRMX"])
        assert main(["search", "--config", cfg]) == 1
        assert "algorithms[0]" in capsys.readouterr().err

    def test_generate_and_shift(self, tmp_path):
        suite_dir = tmp_path / "suite"
        assert main(["generate", "--out", str(suite_dir), "--n-per-env", "50"]) == 0
        out = tmp_path / "shifted"
        assert main(["shift", "--suite", str(suite_dir), "--kind", "CorrLabel",
                     "--param", "beta=0.3", "--out", str(out)]) == 0
        assert json.loads((out / "shift_report.json").read_text())["plan"]["kind"] == "CorrLabel"

    def test_sweep(self, tmp_path):
        cfg = self.write(tmp_path, search={"n_iters": 1, "repeats": 1})
        assert main(["sweep", "--config", cfg, "--kind", "lambda", "--grid", "1", "100",
                     "--methods", "IRM"]) == 0
        assert (tmp_path / "out" / "sweep_lambda.csv").exists()


@pytest.mark.parametrize("name", ["synthetic_corrlabel.yaml", "cmnist.yaml"])
def test_shipped_configs_parse(name):
    path = Path(__file__).resolve().parents[1] / "configs" / name
    cfg = parse_config(path)
    assert cfg.repeats == 5 and cfg.n_iters == 10
