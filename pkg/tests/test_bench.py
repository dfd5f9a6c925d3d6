import json
import time

import numpy as np
import pytest

from amfc.bench import (
    CSV_COLUMNS,
    REFERENCE_FIGURES,
    SCENARIOS,
    BenchReport,
    BenchSettings,
    FoldRecord,
    ScenarioConfig,
    TimingStats,
    emit_report,
    first_half_layers,
    load_report,
    read_report_csv,
    report_to_dict,
    run_grid,
    run_scenario,
    time_classifier,
)
from amfc.data import synth_corpus
from amfc.errors import ConfigurationError, FormatError


def fake_report(scenarios=range(1, 7), heads=("mlp", "knn"), folds=5):
    rng = np.random.default_rng(0)
    records = []
    for f in range(folds):
        for s in scenarios:
            for h in heads:
                tc = TimingStats(float(rng.integers(1000, 9000)), float(rng.random() * 100), 30, 5)
                ta = TimingStats(float(rng.integers(100, 900)), float(rng.random() * 10), 30, 5)
                records.append(FoldRecord(f, s, h, float(rng.random()), float(rng.random()), tc, ta,
                                          tc.median_ns / ta.median_ns, 4))
    return BenchReport(records, {"threads": 1}, {"seed": 0})


class TestScenarios:
    def test_mapping(self):
        # all layers for 1, 3, 4; first half for 2, 5, 6
        expect = {
            1: ("all", "first_ranked"), 2: ("first_half", "first_ranked"), 3: ("all", "last_ranked"),
            4: ("all", "random"), 5: ("first_half", "last_ranked"), 6: ("first_half", "random"),
        }
        for sid, (layers, sel) in expect.items():
            cfg = ScenarioConfig.from_id(sid)
            assert (cfg.layers, cfg.selection) == (layers, sel)
        assert SCENARIOS == expect

    def test_first_half_rule(self):
        assert first_half_layers(13) == 7
        assert first_half_layers(4) == 2
        assert first_half_layers(1) == 1

    def test_layer_counts_mini_vgg(self):
        assert ScenarioConfig.from_id(1).layer_count(4) == 4
        assert ScenarioConfig.from_id(2).layer_count(4) == 2

    def test_unknown_id(self):
        with pytest.raises(ConfigurationError):
            ScenarioConfig.from_id(7)

    def test_reference_figures(self):
        assert REFERENCE_FIGURES["acc_amfc"] == 0.973
        assert REFERENCE_FIGURES["acc_cnn"] == 0.988
        assert REFERENCE_FIGURES["spu"] == 16.9


class TestTiming:
    def test_noop(self):
        t = time_classifier(lambda x: None, [0], repeats=30, warmup=2)
        assert t.median_ns >= 0 and np.isfinite(t.iqr_ns) and t.repeats == 30

    def test_controlled_sleep_ratio(self):
        slow = time_classifier(lambda x: time.sleep(0.01), [0], repeats=30, warmup=1)
        fast = time_classifier(lambda x: time.sleep(0.001), [0], repeats=30, warmup=1)
        assert 5 <= slow.median_ns / fast.median_ns <= 20

    def test_cycles_samples_and_warmup(self):
        seen = []
        time_classifier(seen.append, [1, 2, 3], repeats=30, warmup=4)
        assert len(seen) == 34
        assert seen[4:10] == [1, 2, 3, 1, 2, 3]

    def test_minimum_repeats(self):
        with pytest.raises(ConfigurationError):
            time_classifier(lambda x: None, [0], repeats=29)


class TestReportIO:
    def test_sixty_rows(self, tmp_path):
        report = fake_report()
        emit_report(report, tmp_path / "r.csv", "csv")
        rows = read_report_csv(tmp_path / "r.csv")
        assert len(rows) == 60

    def test_csv_lossless(self, tmp_path):
        report = fake_report()
        emit_report(report, tmp_path / "r.csv", "csv")
        assert read_report_csv(tmp_path / "r.csv") == report.rows()
        with open(tmp_path / "r.csv") as fh:
            assert fh.readline().strip() == ",".join(CSV_COLUMNS)

    def test_json_round_trip(self, tmp_path):
        report = fake_report()
        emit_report(report, tmp_path / "r.json", "json")
        back = load_report(tmp_path / "r.json")
        assert back.records == report.records
        emit_report(back, tmp_path / "r2.json", "json")
        assert (tmp_path / "r.json").read_bytes() == (tmp_path / "r2.json").read_bytes()

    def test_timings_segregated(self):
        d = report_to_dict(fake_report(folds=1))
        assert d["schema"] == "amfc-report/1"
        assert all("t_cnn" not in r and "spu" not in r for r in d["results"])
        assert all("acc_amfc" not in t for t in d["timings"])

    def test_spu_is_ratio_of_medians(self):
        for r in fake_report().records:
            assert r.spu == r.t_cnn.median_ns / r.t_amfc.median_ns

    def test_json_corruption(self, tmp_path):
        emit_report(fake_report(folds=1), tmp_path / "r.json", "json")
        text = (tmp_path / "r.json").read_text()
        (tmp_path / "magic.json").write_text(text.replace("amfc-report/1", "other/9"))
        (tmp_path / "trunc.json").write_text(text[: len(text) // 2])
        d = report_to_dict(fake_report(folds=1))
        d["timings"].pop()
        (tmp_path / "shape.json").write_text(json.dumps(d))
        for name in ("magic", "trunc", "shape"):
            with pytest.raises(FormatError):
                load_report(tmp_path / f"{name}.json")

    def test_csv_corruption(self, tmp_path):
        emit_report(fake_report(folds=1), tmp_path / "r.csv", "csv")
        text = (tmp_path / "r.csv").read_text()
        (tmp_path / "magic.csv").write_text("x" + text)
        (tmp_path / "trunc.csv").write_text(text[: text.rindex(",")])
        lines = text.splitlines()
        lines[2] += ",1.0"
        (tmp_path / "shape.csv").write_text("\n".join(lines) + "\n")
        for name in ("magic", "trunc", "shape"):
            with pytest.raises(FormatError):
                read_report_csv(tmp_path / f"{name}.csv")


@pytest.fixture(scope="module")
def tiny():
    ds = synth_corpus(3, 10, h=8, jitter_px=1, seed=0)
    settings = BenchSettings(channels=(2, 3), pool_after=(1,), hidden=(8,),
                             cnn_hyper={"lr": 0.05, "batch": 10, "max_epochs": 2, "patience": 2},
                             head_hyper={"mlp": {"max_epochs": 3}}, m=20, p_schedule=(16, 9),
                             repeats=30, warmup=1)
    return ds, settings


class TestRun:
    def test_scenario_records(self, tiny):
        ds, settings = tiny
        records = run_scenario(ds, 1, "knn", settings)
        assert [r.fold for r in records] == [0, 1, 2, 3, 4]
        for r in records:
            assert r.error is None and r.layers_used == 2
            assert 0 <= r.acc_amfc <= 1 and 0 <= r.acc_cnn <= 1
            assert r.spu == r.t_cnn.median_ns / r.t_amfc.median_ns

    def test_grid_shape_and_partition(self, tiny):
        ds, settings = tiny
        report = run_grid(ds, [1, 2], ["knn", "gnb"], settings)
        assert len(report.records) == 2 * 2 * 5
        assert {r.layers_used for r in report.records if r.scenario == 2} == {1}
        tests = np.concatenate([report.plan.test_indices(f) for f in range(5)])
        assert sorted(tests) == list(range(len(ds)))

    def test_failures_are_marked(self, tiny):
        ds, settings = tiny
        bad = BenchSettings(**{**settings.__dict__, "p_schedule": (16, 500)})
        report = run_grid(ds, [1], ["knn"], bad)
        assert len(report.records) == 5
        assert all(r.error and "ConfigurationError" in r.error for r in report.records)
        assert all(np.isnan(r.acc_amfc) for r in report.records)
