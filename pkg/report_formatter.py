"""
Report formatting for experiment results.

This module handles:
- Aggregating per-run scores into one row per (method, density, protocol)
- Rendering the aligned text table (method, WHDR, precision, recall, F-score)
- Writing the JSON summary with a stable key order
"""

import json
import logging
from collections import defaultdict
from typing import Dict, Iterable, List, Optional

import numpy as np

logger = logging.getLogger(__name__)

# Order for displaying methods; unknown methods sort after these, by name
METHOD_ORDER = [
    "baseline_r",
    "baseline_s",
    "retinex",
    "color_retinex",
    "ours_no_lid",
    "ours_no_int",
    "ours",
]

METHOD_LABELS = {
    "baseline_r": "Baseline R",
    "baseline_s": "Baseline S",
    "retinex": "Retinex",
    "color_retinex": "Color Retinex",
    "ours_no_lid": "Ours (without LID)",
    "ours_no_int": "Ours (without L_int)",
    "ours": "Ours",
}

SCORE_KEYS = ("whdr", "precision", "recall", "f_score")


def method_sort_key(method: str) -> tuple:
    if method in METHOD_ORDER:
        return (0, METHOD_ORDER.index(method), method)
    return (1, 0, method)


class ReportFormatter:
    """Formatter for per-run scores and their aggregate table."""

    def __init__(self, runs: Iterable[Dict], title: str = "Experiment results"):
        """
        Args:
            runs: Per-run dicts with method, density, protocol, seed and SCORE_KEYS
            title: Heading of the text table
        """
        self.runs = list(runs)
        self.title = title

    def aggregate(self) -> List[Dict]:
        """Mean scores per (method, density, protocol), sorted by method then density (descending)."""
        grouped = defaultdict(list)
        for run in self.runs:
            grouped[(run["method"], run["density"], run["protocol"])].append(run)

        rows = []
        for (method, density, protocol), runs in grouped.items():
            row = {"method": method, "density": density, "protocol": protocol, "n": len(runs)}
            for key in SCORE_KEYS:
                values = [r[key] for r in runs if r.get(key) is not None]
                row[key] = float(np.mean(values)) if values else None
            rows.append(row)
        rows.sort(key=lambda r: (method_sort_key(r["method"]), -r["density"], r["protocol"]))
        return rows

    def _format_value(self, value: Optional[float]) -> str:
        return "-" if value is None else f"{value:.3f}"

    def format_table(self) -> str:
        """Aligned plain-text table of the aggregate rows."""
        headers = ["Method", "Density", "Protocol", "WHDR", "Precision", "Recall", "F-score", "n"]
        body = []
        for row in self.aggregate():
            body.append([
                METHOD_LABELS.get(row["method"], row["method"]),
                f"{row['density'] * 100:g}%",
                row["protocol"],
                *(self._format_value(row[key]) for key in SCORE_KEYS),
                str(row["n"]),
            ])

        widths = [max(len(str(cell)) for cell in column) for column in zip(headers, *body)]
        lines = [self.title, "=" * len(self.title)]
        lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
        lines.append("  ".join("-" * w for w in widths))
        for cells in body:
            lines.append("  ".join(c.ljust(w) if i < 3 else c.rjust(w)
                                   for i, (c, w) in enumerate(zip(cells, widths))))
        return "\n".join(lines) + "\n"

    def to_json(self, extra: Optional[Dict] = None) -> str:
        """JSON summary with sorted keys so reruns are byte-identical."""
        payload = {"rows": self.aggregate(), "runs": self.runs}
        if extra:
            payload.update(extra)
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def write(self, table_path: str, json_path: str, extra: Optional[Dict] = None) -> None:
        with open(table_path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(self.format_table())
        with open(json_path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(self.to_json(extra))
        logger.info(f"[Report] Wrote {table_path} and {json_path}")
