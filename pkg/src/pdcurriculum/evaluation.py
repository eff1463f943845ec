"""ROC-AUC, Youden-optimal thresholds, thresholded metrics and run aggregation.

All functions take ``labels`` (0 = control, 1 = patient) and ``scores``
(patient probabilities); a subject is called positive when ``score >= t``.
"""

from __future__ import annotations

import statistics
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.stats import rankdata

METRICS = ("roc_auc", "threshold", "accuracy", "precision")


def _as_scored(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels).reshape(-1)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if y.shape != s.shape:
        raise ValueError(f"{y.size} labels but {s.size} scores")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return y.astype(bool), s


def _require_both_classes(y: np.ndarray) -> None:
    if y.all() or not y.any():
        raise ValueError("both classes must be present")


def roc_auc(labels, scores) -> float:
    """Mann-Whitney AUC; ties between a positive and a negative count one half."""
    y, s = _as_scored(labels, scores)
    _require_both_classes(y)
    ranks = rankdata(s)  # average ranks for ties
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def candidate_thresholds(scores) -> np.ndarray:
    """Sentinel below all scores, midpoints between adjacent distinct scores, sentinel above."""
    s = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (s[:-1] + s[1:]) / 2
    return np.concatenate([[np.nextafter(s[0], -np.inf)], mids, [np.nextafter(s[-1], np.inf)]])


def youden_threshold(labels, scores) -> float:
    """Threshold maximizing sensitivity + specificity - 1; the smallest wins ties."""
    y, s = _as_scored(labels, scores)
    _require_both_classes(y)
    cands = candidate_thresholds(s)
    pos = np.sort(s[y])
    neg = np.sort(s[~y])
    tp = pos.size - np.searchsorted(pos, cands, side="left")
    tn = np.searchsorted(neg, cands, side="left")
    # J * n_pos * n_neg, kept integral so ties compare exactly
    j_scaled = tp * neg.size + tn * pos.size - pos.size * neg.size
    return float(cands[int(np.argmax(j_scaled))])


class ThresholdMetrics(NamedTuple):
    accuracy: float
    precision: float
    precision_defined: bool


def accuracy_precision_at(labels, scores, t: float) -> ThresholdMetrics:
    y, s = _as_scored(labels, scores)
    called = s >= t
    tp = int(np.sum(called & y))
    fp = int(np.sum(called & ~y))
    tn = int(np.sum(~called & ~y))
    accuracy = (tp + tn) / y.size if y.size else 0.0
    if tp + fp == 0:
        return ThresholdMetrics(accuracy, 0.0, False)
    return ThresholdMetrics(accuracy, tp / (tp + fp), True)


@dataclass
class EvaluationReport:
    roc_auc: float
    threshold: float
    accuracy: float
    precision: float
    n_pos: int
    n_neg: int
    precision_defined: bool = True

    def to_json(self) -> dict:
        return asdict(self)


def evaluate_scores(labels, scores, threshold: float | None = None) -> EvaluationReport:
    """Full report for one scored set; the threshold is refit on it when not given."""
    y, s = _as_scored(labels, scores)
    auc = roc_auc(y, s)
    if threshold is None:
        threshold = youden_threshold(y, s)
    m = accuracy_precision_at(y, s, threshold)
    return EvaluationReport(auc, float(threshold), m.accuracy, m.precision, int(y.sum()), int((~y).sum()),
                            m.precision_defined)


def score_cohort(model, data) -> tuple[np.ndarray, np.ndarray]:
    """(labels, patient probabilities) for an in-memory cohort."""
    from .training import predict

    _, _, dx_logit = predict(model, data)
    return data.dx.numpy().astype(int), 1.0 / (1.0 + np.exp(-dx_logit))


def validation_threshold(model, val) -> float:
    return youden_threshold(*score_cohort(model, val))


def evaluate_model(model, data, threshold: float) -> EvaluationReport:
    return evaluate_scores(*score_cohort(model, data), threshold=threshold)


def zero_shot_eval(model, ood, threshold: float) -> EvaluationReport:
    """Evaluate on an out-of-distribution cohort without refitting anything.

    ``ood`` is a manifest or already-standardized cohort tensors; ``threshold``
    must come from the in-distribution validation set.
    """
    from .data_model import CohortManifest
    from .training import CohortTensors

    if isinstance(ood, CohortManifest):
        ood = CohortTensors.from_manifest(ood)
    return evaluate_model(model, ood, threshold)


@dataclass
class AggregateReport:
    runs: list[EvaluationReport]
    mean: dict[str, float] = field(default_factory=dict)
    sd: dict[str, float] = field(default_factory=dict)

    def formatted(self, metric: str) -> str:
        return f"{self.mean[metric]:.3f} ({self.sd[metric]:.3f})"

    def to_json(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "runs": [r.to_json() for r in self.runs]}


def aggregate_runs(reports: Sequence[EvaluationReport]) -> AggregateReport:
    """Per-metric mean and sample SD (n - 1) across runs; SD is 0 for one run."""
    if not reports:
        raise ValueError("no reports to aggregate")
    agg = AggregateReport(list(reports))
    for metric in METRICS:
        # correctly rounded, so the result does not depend on run order
        values = [float(getattr(r, metric)) for r in reports]
        agg.mean[metric] = statistics.fmean(values)
        agg.sd[metric] = statistics.stdev(values) if len(values) > 1 else 0.0
    return agg

