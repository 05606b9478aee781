"""Label-based evaluation of grading adapters.

A labels table pairs image filenames with ground-truth retinopathy grades
(0-3) and macular-edema risks (0-2). The harness runs a predictor per image
and accumulates one confusion matrix per task (rows are true labels, columns
predictions) plus plain accuracy. Per-image predictor failures are counted
and excluded from the matrices, never imputed.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadParams, FundustrackError
from .grading import AdapterSpec, run_adapter, validate_metrics

RETINOPATHY_CLASSES = 4
EDEMA_CLASSES = 3

_HEADER = ("filename", "retinopathy_grade", "edema_risk")


@dataclass(frozen=True)
class LabelRow:
    filename: str
    retinopathy_grade: int
    edema_risk: int


@dataclass(frozen=True)
class LabelsTable:
    rows: tuple

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            if row.filename in seen:
                raise BadParams(f"duplicate filename in labels: {row.filename}")
            seen.add(row.filename)
            if not 0 <= row.retinopathy_grade < RETINOPATHY_CLASSES:
                raise BadParams(
                    f"{row.filename}: retinopathy_grade {row.retinopathy_grade} outside 0..3"
                )
            if not 0 <= row.edema_risk < EDEMA_CLASSES:
                raise BadParams(f"{row.filename}: edema_risk {row.edema_risk} outside 0..2")

    @classmethod
    def from_csv(cls, text: str) -> "LabelsTable":
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise BadParams("labels csv is empty") from None
        if tuple(h.strip() for h in header) != _HEADER:
            raise BadParams(f"labels csv header must be {','.join(_HEADER)}")
        rows = []
        for lineno, parts in enumerate(reader, start=2):
            if not parts or parts == [""]:
                continue
            if len(parts) != 3:
                raise BadParams(f"labels csv line {lineno}: expected 3 columns")
            name, retino, edema = (p.strip() for p in parts)
            try:
                rows.append(LabelRow(name, int(retino), int(edema)))
            except ValueError:
                raise BadParams(f"labels csv line {lineno}: non-integer grade") from None
        if not rows:
            raise BadParams("labels csv has no data rows")
        return cls(rows=tuple(rows))


class ConfusionMatrix:
    """k x k counts; row = true label, column = prediction."""

    def __init__(self, k: int):
        self.k = k
        self.counts = np.zeros((k, k), dtype=np.int64)

    def add(self, true_label: int, predicted: int) -> None:
        if not 0 <= true_label < self.k:
            raise BadParams(f"true label {true_label} outside 0..{self.k - 1}")
        if not 0 <= predicted < self.k:
            raise BadParams(f"prediction {predicted} outside 0..{self.k - 1}")
        self.counts[true_label, predicted] += 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        total = self.total
        return float(np.trace(self.counts)) / total if total else 0.0

    def to_dict(self) -> dict:
        return {
            "classes": self.k,
            "counts": self.counts.tolist(),
            "total": self.total,
            "accuracy": self.accuracy,
        }


@dataclass(frozen=True)
class EvaluationReport:
    retinopathy: ConfusionMatrix
    edema: ConfusionMatrix
    failures: tuple  # (filename, error message)
    evaluated: int

    def to_dict(self) -> dict:
        return {
            "evaluated": self.evaluated,
            "failed": len(self.failures),
            "failures": [{"filename": f, "error": e} for f, e in self.failures],
            "retinopathy": self.retinopathy.to_dict(),
            "edema": self.edema.to_dict(),
        }


def evaluate_labels(table: LabelsTable, predictor) -> EvaluationReport:
    """Run ``predictor(filename) -> (retinopathy, edema)`` over the table.

    Rows are evaluated in filename order so the report is independent of
    table order and of any parallel scheduling upstream. Predictor exceptions
    become failure entries; their rows never reach the matrices.
    """
    retino = ConfusionMatrix(RETINOPATHY_CLASSES)
    edema = ConfusionMatrix(EDEMA_CLASSES)
    failures = []
    for row in sorted(table.rows, key=lambda r: r.filename):
        try:
            pred_r, pred_e = predictor(row.filename)
            retino.add(row.retinopathy_grade, int(pred_r))
            edema.add(row.edema_risk, int(pred_e))
        except FundustrackError as exc:
            failures.append((row.filename, str(exc)))
    return EvaluationReport(
        retinopathy=retino,
        edema=edema,
        failures=tuple(failures),
        evaluated=len(table.rows) - len(failures),
    )


def adapter_predictor(spec: AdapterSpec, image_root: str | Path):
    """Predictor that runs an external adapter on files under ``image_root``."""
    root = Path(image_root)

    def predict(filename: str):
        doc = run_adapter(spec, str(root / filename))
        metrics = validate_metrics(doc, produced_by=spec.id)
        return metrics.retinopathy_grade, metrics.edema_risk

    return predict


def evaluate_with_adapter(
    table: LabelsTable, spec: AdapterSpec, image_root: str | Path
) -> EvaluationReport:
    root = Path(image_root)
    missing = [r.filename for r in table.rows if not (root / r.filename).exists()]
    if missing:
        raise BadParams(f"referenced images missing: {', '.join(sorted(missing)[:5])}")
    return evaluate_labels(table, adapter_predictor(spec, root))
