"""Precision-recall evaluation and cross-run comparison reports."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

__all__ = ["PRCurve", "pr_curve", "auc", "compare_report"]


@dataclass
class PRCurve:
    recalls: np.ndarray
    precisions: np.ndarray
    thresholds: np.ndarray   # acceptance thresholds, -inf anchor first
    auc: float = field(default=0.0)

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recalls.tolist(), self.precisions.tolist()))


def pr_curve(scores, correct) -> PRCurve:
    """Sweep the acceptance threshold over every distinct score.

    A match is accepted when its score <= threshold (lower = better);
    ties share a threshold. precision = correct accepts / accepts,
    recall = correct accepts / total queries. The zero-accept endpoint
    is anchored at (recall 0, precision 1).
    """
    scores = np.asarray(scores, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    if scores.ndim != 1 or scores.size == 0 or scores.shape != correct.shape:
        raise DataError(f"pr_curve: need matching non-empty 1-D arrays, "
                        f"got {scores.shape} and {correct.shape}")
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    c = correct[order].astype(np.float64)
    accepts = np.arange(1, len(s) + 1, dtype=np.float64)
    correct_accepts = np.cumsum(c)
    # keep only the last row of each tie group (ties accepted together)
    last = np.r_[s[1:] != s[:-1], True]
    thresholds = np.r_[-np.inf, s[last]]
    precisions = np.r_[1.0, correct_accepts[last] / accepts[last]]
    recalls = np.r_[0.0, correct_accepts[last] / len(s)]
    curve = PRCurve(recalls, precisions, thresholds)
    curve.auc = auc(curve)
    return curve


def auc(curve: PRCurve) -> float:
    """Trapezoidal integral of precision over recall on [0, max recall]."""
    if len(curve.recalls) < 2:
        return 0.0
    return float(np.trapezoid(curve.precisions, curve.recalls))


def compare_report(runs: list[tuple[str, str, PRCurve]], out_dir: str,
                   config_echo: dict | None = None) -> dict:
    """Write report.csv / report.json plus per-run PR point files.

    runs are (method, condition_pair, curve); (method, pair) must be
    unique. Returns the report mapping with per-method average AUC.
    """
    if not runs:
        raise DataError("compare_report: no runs")
    names = [(m, p) for m, p, _ in runs]
    if len(set(names)) != len(names):
        raise DataError("compare_report: duplicate (method, pair) run names")
    os.makedirs(out_dir, exist_ok=True)

    rows = [(m, p, c.auc) for m, p, c in runs]
    methods: dict[str, list[float]] = {}
    for m, _, a in rows:
        methods.setdefault(m, []).append(a)
    averages = {m: float(np.mean(v)) for m, v in methods.items()}

    csv_path = os.path.join(out_dir, "report.csv")
    with open(csv_path + ".tmp", "w", encoding="utf-8") as fh:
        fh.write("method,pair,auc\n")
        for m, p, a in rows:
            fh.write(f"{m},{p},{a:.6f}\n")
        for m, a in averages.items():
            fh.write(f"{m},average,{a:.6f}\n")
    os.replace(csv_path + ".tmp", csv_path)

    report = {
        "runs": [{"method": m, "pair": p, "auc": a} for m, p, a in rows],
        "average_auc": averages,
        "config": config_echo or {},
    }
    json_path = os.path.join(out_dir, "report.json")
    with open(json_path + ".tmp", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(json_path + ".tmp", json_path)

    for m, p, c in runs:
        run_path = os.path.join(out_dir, f"pr_{m}_{p}.csv")
        with open(run_path + ".tmp", "w", encoding="utf-8") as fh:
            fh.write("recall,precision\n")
            for r, pr in zip(c.recalls, c.precisions):
                fh.write(f"{r:.6f},{pr:.6f}\n")
        os.replace(run_path + ".tmp", run_path)
    return report
