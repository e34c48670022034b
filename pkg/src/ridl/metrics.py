"""Binary classification metrics and per-fold report aggregation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

METRIC_NAMES = ("auc", "map", "f1", "accuracy")


def _check(scores, labels, ranking: bool):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    if s.size == 0:
        raise ValueError("no scores")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    y = y.astype(np.int64)
    if ranking and (y.min() == y.max()):
        raise ValueError("ranking metrics need both classes present")
    return s, y


def roc_auc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counted one half."""
    s, y = _check(scores, labels, ranking=True)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    r = rankdata(s)  # average ranks: a tie contributes 1/2 per pair
    return float((r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Sum over distinct score thresholds of (recall increment) * precision."""
    s, y = _check(scores, labels, ranking=True)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of each group of tied scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = tp[ends]
    precision = tp / (ends + 1.0)
    recall = tp / tp[-1]
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def binary_metrics(scores, labels, threshold: float = 0.5) -> dict[str, float]:
    s, y = _check(scores, labels, ranking=True)
    pred = (s >= threshold).astype(np.int64)
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    f1 = 2.0 * tp / (2 * tp + fp + fn) if tp else 0.0
    return {
        "auc": roc_auc(s, y),
        "map": average_precision(s, y),
        "f1": f1,
        "accuracy": float(np.mean(pred == y)),
    }


@dataclass
class MetricReport:
    """Per-fold metric values with mean and sample standard deviation."""

    per_fold: dict[str, list[float]] = field(default_factory=lambda: {m: [] for m in METRIC_NAMES})
    meta: dict = field(default_factory=dict)

    def add(self, metrics: dict[str, float]):
        for m in METRIC_NAMES:
            self.per_fold[m].append(float(metrics[m]))

    @property
    def n_folds(self) -> int:
        return len(self.per_fold["auc"])

    def mean(self, metric: str) -> float:
        return float(np.mean(self.per_fold[metric]))

    def std(self, metric: str) -> float:
        v = self.per_fold[metric]
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    def to_dict(self) -> dict:
        return {
            "per_fold": self.per_fold,
            "mean": {m: self.mean(m) for m in METRIC_NAMES},
            "std": {m: self.std(m) for m in METRIC_NAMES},
            "meta": self.meta,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "MetricReport":
        d = json.loads(Path(path).read_text())
        missing = [m for m in METRIC_NAMES if m not in d.get("per_fold", {})]
        if missing:
            raise ValueError(f"{path}: report lacks {missing}")
        return cls({m: [float(v) for v in d["per_fold"][m]] for m in METRIC_NAMES}, d.get("meta", {}))

    def summary(self) -> str:
        return "  ".join(f"{m}={self.mean(m):.4f}+-{self.std(m):.4f}" for m in METRIC_NAMES)
