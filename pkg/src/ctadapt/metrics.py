"""Accuracy, recall, binomial confidence intervals, and experiment reports.

Accuracy is reported with a 95% normal-approximation (Wald) interval,
``p +- 1.96 * sqrt(p * (1 - p) / n)``.  Displayed values round to three
decimals, half away from zero.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DataError

Z95 = 1.96


class Method(str, Enum):
    BASELINE = "Baseline"
    ONLINE = "OnlineUnsupervised"


def accuracy_ci(correct: int, n: int) -> tuple[float, float]:
    """(accuracy, 95% half-width) for ``correct`` successes out of ``n``."""
    if n < 1:
        raise DataError(f"need at least one trial, got n={n}")
    if not (0 <= correct <= n):
        raise DataError(f"correct={correct} outside [0, {n}]")
    p = correct / n
    half = Z95 * float(np.sqrt(p * (1.0 - p) / n))
    return p, half


def recall(confusion: np.ndarray, cls: int) -> float:
    """Diagonal over row total for class ``cls``."""
    confusion = np.asarray(confusion)
    row = confusion[cls]
    total = row.sum()
    if total == 0:
        raise DataError(f"recall undefined: no true instances of class {cls}")
    return float(row[cls] / total)


def confusion_matrix(true_idx, pred_idx, n_classes: int) -> np.ndarray:
    true_idx = np.asarray(true_idx, dtype=np.intp)
    pred_idx = np.asarray(pred_idx, dtype=np.intp)
    if true_idx.shape != pred_idx.shape:
        raise DataError("true/pred index lists differ in length")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (true_idx, pred_idx), 1)
    return m


def round3(x: float) -> float:
    """Round to 3 decimals, half away from zero (display convention)."""
    sign = -1.0 if x < 0 else 1.0
    q = Decimal(str(abs(x))).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP)
    return sign * float(q)


def format_pm(accuracy: float, half_width: float) -> str:
    return f"{round3(accuracy):.3f} +- {round3(half_width):.3f}"


@dataclass
class ExperimentReport:
    experiment_id: str
    test_set: str
    method: Method
    n_patients: int
    correct: int
    accuracy: float
    ci_half_width: float
    confusion: list  # 3x3 nested list of ints, rows = true class
    seed: int = 0
    per_quarter_accuracy: list | None = None
    harvest_counts: list | None = None  # one dict per quarter for online runs

    def __post_init__(self):
        if not (0.0 <= self.accuracy <= 1.0):
            raise DataError(f"accuracy {self.accuracy} outside [0, 1]")
        total = int(np.sum(self.confusion))
        if total != self.n_patients:
            raise DataError(
                f"confusion total {total} != n_patients {self.n_patients}"
            )


def build_report(
    experiment_id: str,
    test_set: str,
    method: Method,
    confusion: np.ndarray,
    *,
    seed: int = 0,
    per_quarter_accuracy=None,
    harvest_counts=None,
) -> ExperimentReport:
    confusion = np.asarray(confusion)
    n = int(confusion.sum())
    correct = int(np.trace(confusion))
    acc, half = accuracy_ci(correct, n)
    return ExperimentReport(
        experiment_id=experiment_id,
        test_set=test_set,
        method=method,
        n_patients=n,
        correct=correct,
        accuracy=acc,
        ci_half_width=half,
        confusion=[[int(v) for v in row] for row in confusion],
        seed=seed,
        per_quarter_accuracy=per_quarter_accuracy,
        harvest_counts=harvest_counts,
    )


def write_report(report: ExperimentReport, path) -> None:
    payload = asdict(report)
    payload["method"] = report.method.value
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_report(path) -> ExperimentReport:
    p = Path(path)
    if not p.exists():
        raise DataError(f"report file not found: {p}")
    payload = json.loads(p.read_text())
    payload["method"] = Method(payload["method"])
    return ExperimentReport(**payload)


_TABLE_COLUMNS = ("Exp", "Set", "Model", "Accuracy")


def render_table(reports: list[ExperimentReport]) -> str:
    """Plain-text results table: one row per experiment, accuracy +- CI."""
    rows = [
        (r.experiment_id, r.test_set, r.method.value, format_pm(r.accuracy, r.ci_half_width))
        for r in reports
    ]
    widths = [
        max(len(col), *(len(row[i]) for row in rows)) if rows else len(col)
        for i, col in enumerate(_TABLE_COLUMNS)
    ]
    lines = [
        "  ".join(col.ljust(widths[i]) for i, col in enumerate(_TABLE_COLUMNS)).rstrip()
    ]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
    return "\n".join(lines) + "\n"


CSV_COLUMNS = (
    "experiment_id",
    "test_set",
    "method",
    "n_patients",
    "correct",
    "accuracy",
    "ci_half_width",
    "per_quarter_accuracy",
)


def render_csv(reports: list[ExperimentReport]) -> str:
    """CSV with the fixed CSV_COLUMNS header; quarters joined by ';'."""
    lines = [",".join(CSV_COLUMNS)]
    for r in reports:
        quarters = (
            ";".join("" if q is None else f"{q:.6f}" for q in r.per_quarter_accuracy)
            if r.per_quarter_accuracy
            else ""
        )
        lines.append(
            ",".join(
                [
                    r.experiment_id,
                    r.test_set,
                    r.method.value,
                    str(r.n_patients),
                    str(r.correct),
                    f"{r.accuracy:.6f}",
                    f"{r.ci_half_width:.6f}",
                    quarters,
                ]
            )
        )
    return "\n".join(lines) + "\n"
