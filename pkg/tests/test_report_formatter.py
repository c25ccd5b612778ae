import json

import pytest

from report_formatter import ReportFormatter, method_sort_key


def run(method, density, seed, whdr, protocol="all"):
    return {"method": method, "density": density, "protocol": protocol, "seed": seed,
            "whdr": whdr, "precision": 0.5, "recall": 0.5, "f_score": 0.5}


@pytest.fixture
def runs():
    return [
        run("ours", 0.1, 0, 0.2),
        run("ours", 0.1, 1, 0.4),
        run("ours", 1.0, 0, 0.1),
        run("baseline_r", 1.0, 0, 0.6),
        run("baseline_r", 1.0, 0, 0.6667, protocol="balanced"),
        run("my_method", 1.0, 0, 0.3),
    ]


class TestReportFormatter:
    def test_aggregate_means_and_order(self, runs):
        rows = ReportFormatter(runs).aggregate()
        keys = [(r["method"], r["density"], r["protocol"]) for r in rows]
        assert keys == [("baseline_r", 1.0, "all"), ("baseline_r", 1.0, "balanced"),
                        ("ours", 1.0, "all"), ("ours", 0.1, "all"), ("my_method", 1.0, "all")]
        ours_sparse = rows[3]
        assert ours_sparse["whdr"] == pytest.approx(0.3)
        assert ours_sparse["n"] == 2

    def test_missing_scores_are_skipped(self):
        partial = run("retinex", 1.0, 0, None)
        rows = ReportFormatter([partial]).aggregate()
        assert rows[0]["whdr"] is None
        assert "-" in ReportFormatter([partial]).format_table()

    def test_table_uses_labels(self, runs):
        table = ReportFormatter(runs, title="Ablation").format_table()
        lines = table.splitlines()
        assert lines[0] == "Ablation"
        assert "Baseline R" in table and "Ours" in table and "my_method" in table
        assert "10%" in table and "0.300" in table

    def test_json_is_stable(self, runs):
        first = ReportFormatter(runs).to_json({"delta": 0.1})
        second = ReportFormatter(list(runs)).to_json({"delta": 0.1})
        assert first == second
        payload = json.loads(first)
        assert payload["delta"] == 0.1 and len(payload["runs"]) == 6

    def test_write(self, tmp_path, runs):
        table, report = tmp_path / "table.txt", tmp_path / "report.json"
        ReportFormatter(runs).write(str(table), str(report))
        assert table.read_text().startswith("Experiment results")
        assert json.loads(report.read_text())["rows"]

    def test_method_sort_key(self):
        assert method_sort_key("baseline_r") < method_sort_key("ours") < method_sort_key("zzz")
