import json
import os

import pytest

import experiment_runner
from annotation_handler import AnnotationConfig
from experiment_runner import (KEEP_RUNS, ExperimentConfig, RunRecord, flatten_runs, prepare_samples, run_experiment,
                               update_metrics)
from iid_errors import ValidationError
from synth_scene import SynthConfig

QUICK_METHODS = ('baseline_r', 'baseline_s', 'retinex')


def quick_config(out_dir, **overrides):
    options = dict(
        out_dir=str(out_dir),
        methods=QUICK_METHODS,
        densities=(1.0,),
        seeds=(0, 1),
        size=64,
        save_images=False,
        metrics_path=str(out_dir / "metrics.json"),
        synth=SynthConfig(n_regions=3, noise_sigma=0.0),
        annotation=AnnotationConfig(mode="dense"),
    )
    options.update(overrides)
    return ExperimentConfig(**options)


class TestExperimentConfig:
    def test_defaults(self, tmp_path):
        cfg = ExperimentConfig(out_dir=str(tmp_path))
        assert cfg.methods == experiment_runner.METHODS
        assert cfg.densities == (1.0, 0.5, 0.1, 0.01)

    @pytest.mark.parametrize("overrides", [
        {"methods": ("ours", "deep_net")},
        {"methods": ()},
        {"densities": (0.0,)},
        {"densities": (1.5,)},
        {"seeds": ()},
        {"jobs": 0},
        {"delta": 0.0},
    ])
    def test_validation(self, tmp_path, overrides):
        with pytest.raises(ValidationError):
            ExperimentConfig(out_dir=str(tmp_path), **overrides)

    def test_lists_become_tuples(self, tmp_path):
        cfg = ExperimentConfig(out_dir=str(tmp_path), methods=["ours"], densities=[1, 0.5], seeds=[3])
        assert cfg.methods == ("ours",) and cfg.densities == (1.0, 0.5) and cfg.seeds == (3,)


class TestPrepareSamples:
    def test_synthetic_scene_per_seed(self, tmp_path):
        prepared, failures = prepare_samples(quick_config(tmp_path))
        assert failures == []
        assert [(s.id, seeds) for s, seeds in prepared] == [("scene_0000", (0,)), ("scene_0001", (1,))]
        assert all(s.annotations for s, _ in prepared)

    def test_empty_manifest(self, tmp_path):
        manifest = tmp_path / "manifest.json"
        manifest.write_text("[]")
        with pytest.raises(ValidationError):
            run_experiment(quick_config(tmp_path, manifest=str(manifest)))


class TestRunExperiment:
    def test_writes_reports(self, tmp_path):
        result = run_experiment(quick_config(tmp_path))
        assert result.ok
        assert os.path.exists(result.report_path) and os.path.exists(result.table_path)
        assert os.path.exists(tmp_path / "runs" / "scene_0000" / "retinex_d1_s0.json")
        assert {row["method"] for row in result.rows} == set(QUICK_METHODS)
        payload = json.loads((tmp_path / "report.json").read_text())
        assert payload["failures"] == [] and payload["delta"] == 0.1
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        assert metrics["successful_runs"] == 1
        last = metrics["runs"][-1]
        assert (last["samples"], last["tasks"], last["completed"], last["failures"]) == (2, 6, 6, 0)

    def test_uniform_albedo_scores_two_thirds_when_balanced(self, tmp_path):
        result = run_experiment(quick_config(tmp_path, methods=("baseline_r",)))
        balanced = [run for run in result.runs if run["protocol"] == "balanced"]
        for run in balanced:
            assert run["whdr"] == pytest.approx(2.0 / 3.0)

    def test_report_is_reproducible(self, tmp_path):
        first = run_experiment(quick_config(tmp_path / "a"))
        second = run_experiment(quick_config(tmp_path / "b", jobs=2))
        assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
        assert first.rows == second.rows

    def test_failed_method_does_not_stop_the_batch(self, tmp_path, monkeypatch):
        original = experiment_runner.run_method

        def flaky(method, image, lidar, cfg):
            if method == "baseline_s":
                raise RuntimeError("solver exploded")
            return original(method, image, lidar, cfg)

        monkeypatch.setattr(experiment_runner, "run_method", flaky)
        result = run_experiment(quick_config(tmp_path))
        assert not result.ok
        assert {f["method"] for f in result.failures} == {"baseline_s"}
        assert len(result.failures) == 2
        assert "RuntimeError" in result.failures[0]["error"]
        assert {row["method"] for row in result.rows} == {"baseline_r", "retinex"}
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        assert metrics["failed_runs"] == 1 and "solver exploded" in metrics["runs"][-1]["error"]
        assert metrics["runs"][-1]["completed"] == 4 and metrics["runs"][-1]["failures"] == 2


class TestHelpers:
    def test_flatten_runs_skips_missing_protocols(self):
        scores = {"whdr": 0.2, "precision": 0.5, "recall": 0.4, "f_score": 0.45, "counts": {"E": 3, "D": 1}}
        report = {"sample": "s", "method": "ours", "density": 0.5, "seed": 2,
                  "protocols": {"all": scores, "balanced": None}, "shadow_step": 0.01}
        rows = flatten_runs([report])
        assert len(rows) == 1
        assert rows[0]["n"] == 4 and rows[0]["protocol"] == "all" and rows[0]["shadow_step"] == 0.01

    def test_update_metrics_keeps_recent_runs(self, tmp_path):
        path = str(tmp_path / "metrics.json")
        for i in range(KEEP_RUNS + 5):
            failures = i % 2
            update_metrics(RunRecord("out", ("ours",), (1.0, 0.1), 1, 2, 2 - failures, failures, 1.234,
                                     "boom" if failures else None), path)
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        assert metrics["total_runs"] == KEEP_RUNS + 5
        assert metrics["successful_runs"] == 18 and metrics["failed_runs"] == 17
        assert metrics["total_tasks"] == 2 * (KEEP_RUNS + 5) and metrics["total_failures"] == 17
        assert len(metrics["runs"]) == KEEP_RUNS
        last = metrics["runs"][-1]
        assert last["duration_seconds"] == 1.23
        assert last["methods"] == ["ours"] and last["densities"] == [1.0, 0.1]
        assert last["tasks"] == 2 and last["completed"] == 2 and last["failures"] == 0 and last["error"] is None
