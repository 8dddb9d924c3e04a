"""Target-domain accuracy decomposed by class group, plus bias diagnostics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .exceptions import EvaluationError

SPLIT_KINDS = ("inductive_test", "transductive_unlabeled_train")

# frozen column order for the flat CSV row; bump CSV_SCHEMA_VERSION on change
CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "split_kind",
    "n_samples",
    "overall_accuracy",
    "common_accuracy",
    "target_private_accuracy",
    "private_as_common_rate",
    "predicted_private_fraction",
    "n_common",
    "n_target_private",
    "averaging",
    "per_class_accuracy",
)
NUMERIC_FIELDS = (
    "overall_accuracy",
    "common_accuracy",
    "target_private_accuracy",
    "private_as_common_rate",
    "predicted_private_fraction",
)


@dataclass
class MetricsReport:
    overall_accuracy: float
    common_accuracy: float
    target_private_accuracy: float
    private_as_common_rate: float
    per_class_accuracy: dict
    n_samples: int
    split_kind: str
    predicted_private_fraction: float = 0.0
    n_common: int = 0
    n_target_private: int = 0
    private_rate_empty: bool = False
    averaging: str = "micro"
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_accuracy"] = {str(k): v for k, v in self.per_class_accuracy.items()}
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "MetricsReport":
        kwargs = {f.name: d[f.name] for f in fields(cls) if f.name in d}
        for name in NUMERIC_FIELDS:
            if kwargs.get(name) is None:
                kwargs[name] = float("nan")
        kwargs["per_class_accuracy"] = {
            int(k): v for k, v in kwargs.get("per_class_accuracy", {}).items()
        }
        return cls(**kwargs)

    def csv_row(self) -> list:
        d = self.to_dict()
        row = []
        for col in CSV_COLUMNS:
            v = d[col]
            if col == "per_class_accuracy":
                v = json.dumps(v, sort_keys=True)
            row.append("" if v is None else repr(v) if isinstance(v, float) else v)
        return row

    def to_csv(self, header=True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(CSV_COLUMNS)
        w.writerow(self.csv_row())
        return buf.getvalue()


def _rate(num, den):
    return num / den if den else float("nan")


def private_as_common_rate(predictions, truths, groups, return_flag=False):
    """Fraction of true target-private samples predicted as a common class."""
    pred = np.asarray(predictions)
    truth = np.asarray(truths)
    if pred.shape != truth.shape:
        raise EvaluationError("predictions and truths must be aligned")
    private = np.isin(truth, sorted(groups.target_private))
    n = int(private.sum())
    if n == 0:
        return (0.0, True) if return_flag else 0.0
    rate = float(np.isin(pred[private], sorted(groups.common)).sum() / n)
    return (rate, False) if return_flag else rate


def report_from_predictions(predictions, truths, groups, split_kind="inductive_test", meta=None):
    """Build a MetricsReport from predicted and true class ids."""
    pred = np.asarray(predictions, dtype=np.int64)
    truth = np.asarray(truths, dtype=np.int64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise EvaluationError("predictions and truths must be aligned 1-D arrays")
    if truth.size == 0:
        raise EvaluationError("cannot evaluate an empty dataset")
    if split_kind not in SPLIT_KINDS:
        raise EvaluationError(f"unknown split kind {split_kind!r}")
    correct = pred == truth
    common = np.isin(truth, sorted(groups.common))
    private = np.isin(truth, sorted(groups.target_private))
    per_class = {
        int(c): float(correct[truth == c].mean()) for c in np.unique(truth)
    }
    rate, empty = private_as_common_rate(pred, truth, groups, return_flag=True)
    return MetricsReport(
        overall_accuracy=float(correct.mean()),
        common_accuracy=_rate(int(correct[common].sum()), int(common.sum())),
        target_private_accuracy=_rate(int(correct[private].sum()), int(private.sum())),
        private_as_common_rate=rate,
        per_class_accuracy=per_class,
        n_samples=int(truth.size),
        split_kind=split_kind,
        predicted_private_fraction=float(np.isin(pred, sorted(groups.target_private)).mean()),
        n_common=int(common.sum()),
        n_target_private=int(private.sum()),
        private_rate_empty=empty,
        meta=dict(meta or {}),
    )


def evaluate(model, dataset, groups, mask=None, split_kind="inductive_test", meta=None):
    """Score ``model`` on a target-domain dataset.

    ``model`` is anything with ``predict_classes(X, mask)`` returning class
    ids (a trained model or a fitted estimator). ``mask`` defaults to the
    model's target-domain mask.
    """
    if len(dataset) == 0:
        raise EvaluationError("cannot evaluate an empty dataset")
    if getattr(dataset, "domain", "target") != "target":
        raise EvaluationError("evaluation expects a target-domain dataset")
    predictions = model.predict_classes(dataset.features, mask)
    return report_from_predictions(predictions, dataset.class_ids, groups, split_kind, meta)


def aggregate_runs(reports) -> dict:
    """Per-field mean and sample standard deviation (n-1 divisor) across runs."""
    reports = list(reports)
    if not reports:
        raise EvaluationError("aggregate_runs needs at least one report")
    out = {}
    for name in NUMERIC_FIELDS:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            out[name] = {"mean": float("nan"), "std": float("nan"), "n": 0}
            continue
        std = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
        out[name] = {"mean": float(vals.mean()), "std": std, "n": int(vals.size)}
    return out
