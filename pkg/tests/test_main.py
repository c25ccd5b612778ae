import json
import os

import numpy as np
import pytest

from dataset_handler import write_lidar_csv, write_png
from densify import SparseIntensity
from main import EXIT_FAILED, EXIT_INVALID, EXIT_OK, cli


def summary(capsys):
    return json.loads(capsys.readouterr().out)


@pytest.fixture
def synth_dir(tmp_path, capsys):
    out = tmp_path / "data"
    assert cli(["synth", "--seed", "3", "--size", "64", "--out", str(out)]) == EXIT_OK
    capsys.readouterr()
    return out


@pytest.fixture
def quick_config(tmp_path):
    path = tmp_path / "quick.cfg"
    path.write_text("max_outer = 1\nmax_inner = 5\n")
    return str(path)


class TestSynth:
    def test_writes_scene_and_manifest(self, tmp_path, capsys):
        out = tmp_path / "data"
        assert cli(["synth", "--seed", "3", "--size", "32", "--scenes", "2", "--out", str(out)]) == EXIT_OK
        result = summary(capsys)
        assert [s["id"] for s in result["scenes"]] == ["scene_0003", "scene_0004"]
        assert os.path.exists(result["manifest"])
        records = json.loads((out / "manifest.json").read_text())
        assert records[0]["annotations"] == "scene_0003_pairs.jsonl"
        assert (out / "scene_0003_pairs.jsonl").exists()


class TestDecompose:
    def test_from_synthetic_scene(self, synth_dir, tmp_path, quick_config, capsys):
        out = tmp_path / "result"
        code = cli(["decompose", "--image", str(synth_dir / "scene_0003_image.png"),
                    "--lidar", str(synth_dir / "scene_0003_lidar.png"),
                    "--lidar-mask", str(synth_dir / "scene_0003_lidar_mask.png"),
                    "--config", quick_config, "--out", str(out)])
        assert code == EXIT_OK
        result = summary(capsys)
        assert (out / "albedo.png").exists() and (out / "shade.png").exists()
        assert json.loads((out / "metrics.json").read_text())["objective"] == result["objective"]
        assert result["reconstruction_error"] < 1e-3

    def test_csv_lidar_without_densify(self, tmp_path, quick_config, capsys):
        image = tmp_path / "image.png"
        write_png(str(image), np.full((6, 6, 3), 0.5), 16)
        values, mask = np.zeros((6, 6)), np.zeros((6, 6), dtype=np.uint8)
        values[2, 3], mask[2, 3] = 0.4, 1
        lidar = tmp_path / "lidar.csv"
        write_lidar_csv(str(lidar), SparseIntensity(values, mask))
        code = cli(["decompose", "--image", str(image), "--lidar", str(lidar), "--no-densify",
                    "--config", quick_config, "--out", str(tmp_path / "o")])
        assert code == EXIT_OK
        assert np.isfinite(summary(capsys)["objective"])

    def test_densify(self, synth_dir, tmp_path, capsys):
        code = cli(["densify", "--image", str(synth_dir / "scene_0003_image.png"),
                    "--lidar", str(synth_dir / "scene_0003_lidar.png"),
                    "--lidar-mask", str(synth_dir / "scene_0003_lidar_mask.png"),
                    "--out", str(tmp_path / "d")])
        assert code == EXIT_OK
        assert os.path.exists(summary(capsys)["dense"])


class TestEvaluate:
    def test_ground_truth_albedo_scores_well(self, synth_dir, capsys):
        code = cli(["evaluate", "--pred", str(synth_dir / "scene_0003_albedo.png"),
                    "--ann", str(synth_dir / "scene_0003_pairs.jsonl"), "--method", "oracle"])
        assert code == EXIT_OK
        result = summary(capsys)
        assert result["whdr"] < 0.05
        assert result["delta"] == 0.1

    def test_annotate_with_albedo(self, synth_dir, tmp_path, capsys):
        code = cli(["annotate", "--image", str(synth_dir / "scene_0003_image.png"),
                    "--albedo", str(synth_dir / "scene_0003_albedo.png"), "--mode", "dense",
                    "--out", str(tmp_path / "a")])
        assert code == EXIT_OK
        result = summary(capsys)
        assert result["mode"] == "dense" and os.path.exists(result["annotations"])


class TestRunAndReport:
    def test_run_then_report(self, tmp_path, capsys):
        out = tmp_path / "results"
        code = cli(["run", "--scenes", "1", "--size", "48", "--methods", "baseline_r,retinex",
                    "--densities", "1.0", "--out", str(out)])
        assert code == EXIT_OK
        assert summary(capsys)["failures"] == []
        assert cli(["report", "--run-dir", str(out)]) == EXIT_OK
        assert {row["method"] for row in summary(capsys)["rows"]} == {"baseline_r", "retinex"}

    def test_report_without_run(self, tmp_path):
        assert cli(["report", "--run-dir", str(tmp_path)]) == EXIT_INVALID


class TestExitCodes:
    def test_unknown_subcommand(self):
        assert cli(["train"]) == EXIT_INVALID

    def test_unknown_flag(self, tmp_path):
        assert cli(["synth", "--colour", "red", "--out", str(tmp_path)]) == EXIT_INVALID

    def test_missing_image(self, tmp_path):
        code = cli(["decompose", "--image", str(tmp_path / "nope.png"), "--lidar", str(tmp_path / "l.csv")])
        assert code == EXIT_INVALID

    def test_unknown_method(self, tmp_path):
        assert cli(["run", "--methods", "deep_net", "--out", str(tmp_path)]) == EXIT_INVALID

    def test_bad_config_key(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("learning_rate = 0.1\n")
        assert cli(["synth", "--config", str(path), "--out", str(tmp_path)]) == EXIT_INVALID

    def test_undecodable_annotations(self, synth_dir, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_bytes(b'{"p1": [0, 0], "p2": [1, 1], "J": "\xe9"}\n')
        code = cli(["evaluate", "--pred", str(synth_dir / "scene_0003_albedo.png"), "--ann", str(path)])
        assert code == EXIT_INVALID

    def test_runtime_failure(self, tmp_path, monkeypatch):
        import main

        def explode(*args, **kwargs):
            raise RuntimeError("boom")

        monkeypatch.setattr(main, "synth_scene", explode)
        assert cli(["synth", "--out", str(tmp_path)]) == EXIT_FAILED
