"""
Classifier evaluation: ROC/AUC, precision-recall/AP, confusion counts and
curve export.

Curves sweep every distinct score from high to low, starting from an
endpoint at threshold +inf where nothing is predicted positive. A sample is
predicted positive iff its score >= threshold.
"""

import csv
import math
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import auc, average_precision_score, roc_curve

from chunker import chunk_indices
from dataset import PatchSet
from errors import DatasetError, DimensionError
from network import predict_scores
from quantize import ModelLike, as_model_state
from stats import format_report, format_table
from utils import ensure_parent_dir, format_number, write_json

CSV_COLUMNS = ("threshold", "fpr", "tpr", "precision", "recall")


def _significant(value: Optional[float]) -> Optional[float]:
    return None if value is None else float(format_number(value))


@dataclass
class ScoredLabelSet:
    """
    Classifier scores with ground-truth labels.

    Attributes:
        scores: float[N] positive-class probabilities
        labels: {0, 1}[N]
    """

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel().astype(np.int64)
        if self.scores.shape != self.labels.shape:
            raise DimensionError(f"{self.scores.size} scores for {self.labels.size} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 1):
            raise DatasetError("labels must be 0 or 1")

    @property
    def positives(self) -> int:
        return int(self.labels.sum())

    @property
    def negatives(self) -> int:
        return int(self.labels.size) - self.positives

    def require_both_classes(self) -> None:
        if self.positives == 0 or self.negatives == 0:
            raise DatasetError(
                f"evaluation needs both classes (have {self.positives} positive, {self.negatives} negative)"
            )


@dataclass
class CurvePoint:
    """One threshold of the sweep."""

    threshold: float
    tpr: float
    fpr: float
    precision: float
    recall: float

    def csv_row(self) -> List[str]:
        return [format_number(v) for v in (self.threshold, self.fpr, self.tpr, self.precision, self.recall)]


@dataclass
class EvalCurve:
    """
    Threshold sweep with summary areas.

    Attributes:
        points: Ordered by decreasing threshold, starting at +inf
        auc: Trapezoidal area under (fpr, tpr), None if not computed
        ap: Step-sum average precision, None if not computed
        positives / negatives: Class counts
    """

    points: List[CurvePoint]
    auc: Optional[float]
    ap: Optional[float]
    positives: int
    negatives: int

    def summary(self) -> Dict[str, Any]:
        """AUC and AP at 6 significant digits, with class and threshold counts."""
        return {
            "auc": _significant(self.auc),
            "ap": _significant(self.ap),
            "positives": self.positives,
            "negatives": self.negatives,
            "thresholds": len(self.points) - 1,
        }


def _sweep(data: ScoredLabelSet) -> Tuple[List[CurvePoint], np.ndarray, np.ndarray]:
    data.require_both_classes()
    # one point per distinct score, after the (0, 0) endpoint
    fpr, tpr, thresholds = roc_curve(data.labels, data.scores, drop_intermediate=False)
    thresholds = thresholds.astype(np.float64)
    thresholds[0] = math.inf

    tp = np.rint(tpr * data.positives)
    found = tp + np.rint(fpr * data.negatives)
    precision = np.divide(tp, found, out=np.ones_like(tp), where=found > 0)

    points = [CurvePoint(threshold=float(t), tpr=float(a), fpr=float(b), precision=float(p), recall=float(a))
              for t, a, b, p in zip(thresholds, tpr, fpr, precision)]
    return points, tpr, fpr


def _ap(data: ScoredLabelSet) -> float:
    return float(average_precision_score(data.labels, data.scores))


def roc(data: ScoredLabelSet) -> EvalCurve:
    """
    ROC sweep and trapezoidal AUC.

    Equal scores across classes earn half credit, so AUC equals
    P(score+ > score-) + 0.5 P(score+ == score-).

    Raises:
        DatasetError: Only one class present
    """
    points, tpr, fpr = _sweep(data)
    return EvalCurve(points=points, auc=float(auc(fpr, tpr)), ap=None,
                     positives=data.positives, negatives=data.negatives)


def precision_recall(data: ScoredLabelSet) -> EvalCurve:
    """
    Precision-recall sweep and step-sum AP = sum((R_n - R_{n-1}) * P_n).

    Raises:
        DatasetError: Only one class present
    """
    points, _, _ = _sweep(data)
    return EvalCurve(points=points, auc=None, ap=_ap(data),
                     positives=data.positives, negatives=data.negatives)


def evaluate(data: ScoredLabelSet) -> EvalCurve:
    """ROC and PR sweep together, with both AUC and AP."""
    points, tpr, fpr = _sweep(data)
    return EvalCurve(points=points, auc=float(auc(fpr, tpr)), ap=_ap(data),
                     positives=data.positives, negatives=data.negatives)


@dataclass
class Confusion:
    """Confusion counts and rates at one threshold (0/0 counts as 0)."""

    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> Dict[str, float]:
        return {key: value if isinstance(value, int) else _significant(value)
                for key, value in self.__dict__.items()}


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def confusion_at(data: ScoredLabelSet, threshold: float) -> Confusion:
    """
    Confusion counts with positive prediction iff score >= threshold.

    Args:
        data: Scores and labels
        threshold: Decision threshold

    Returns:
        Confusion
    """
    predicted = data.scores >= threshold
    actual = data.labels == 1
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    tn = int(np.sum(~predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    return Confusion(
        threshold=threshold, tp=tp, fp=fp, tn=tn, fn=fn,
        accuracy=_ratio(tp + tn, tp + fp + tn + fn),
        precision=precision, recall=recall,
        f1=_ratio(2 * precision * recall, precision + recall),
    )


def score_patches(model: ModelLike, patches: PatchSet, batch_size: int = 256) -> ScoredLabelSet:
    """Positive-class scores of a patch set in infer mode."""
    runnable = as_model_state(model)
    if len(patches) == 0:
        raise DatasetError("Cannot score an empty patch set")
    parts = [predict_scores(runnable, patches.patches[idx]) for idx in chunk_indices(len(patches), batch_size)]
    return ScoredLabelSet(scores=np.concatenate(parts), labels=patches.labels)


def export_curves(curve: EvalCurve, csv_path: str, json_path: Optional[str] = None) -> Tuple[str, str]:
    """
    Write the sweep as CSV and the summary as JSON.

    Numbers use 6 significant digits; the summary JSON sits next to the CSV
    (same stem, .json) unless json_path is given.

    Returns:
        Tuple of (csv path, json path)
    """
    if json_path is None:
        json_path = os.path.splitext(csv_path)[0] + ".json"
    ensure_parent_dir(csv_path)
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for point in curve.points:
            writer.writerow(point.csv_row())
    ensure_parent_dir(json_path)
    write_json(json_path, curve.summary())
    return csv_path, json_path


def read_curve_csv(path: str) -> List[CurvePoint]:
    """Parse a CSV written by export_curves."""
    points = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            points.append(CurvePoint(
                threshold=float(row["threshold"]),
                tpr=float(row["tpr"]),
                fpr=float(row["fpr"]),
                precision=float(row["precision"]),
                recall=float(row["recall"]),
            ))
    return points


def format_eval_report(rows: Sequence[Tuple[str, EvalCurve]], threshold: Optional[float] = None,
                       confusions: Optional[Sequence[Confusion]] = None) -> str:
    """
    Format one AUC/AP row per model.

    Args:
        rows: (model name, curve) pairs
        threshold: Threshold of the optional confusion columns
        confusions: Confusion per row at threshold

    Returns:
        Formatted report string
    """
    headers = ["model", "samples", "pos %", "AUC", "AP"]
    if confusions:
        headers += [f"prec@{format_number(threshold)}", f"rec@{format_number(threshold)}"]
    table_rows = []
    for i, (name, curve) in enumerate(rows):
        total = curve.positives + curve.negatives
        row = [name, f"{total:,}", f"{curve.positives / total * 100:.1f}",
               format_number(curve.auc), format_number(curve.ap)]
        if confusions:
            row += [format_number(confusions[i].precision), format_number(confusions[i].recall)]
        table_rows.append(row)
    return format_report("Evaluation", [format_table(headers, table_rows)], width=70)


def print_eval_report(rows: Sequence[Tuple[str, EvalCurve]], threshold: Optional[float] = None,
                      confusions: Optional[Sequence[Confusion]] = None) -> None:
    """Print the evaluation table to console."""
    print(format_eval_report(rows, threshold, confusions))
