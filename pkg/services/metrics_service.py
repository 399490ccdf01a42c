"""
Metrics Service Module - Patient-Level Aggregation and ROC Analysis
Turns pooled image-level predictions into per-patient scores (ratio and max
aggregation), classifies patients, builds ROC curves and computes AUC and
accuracy.
"""
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from sklearn import metrics as sk_metrics

from services.errors import MetricError

logger = logging.getLogger(__name__)

DEFAULT_IMAGE_THRESHOLD = 0.5
DEFAULT_RATIO_THRESHOLD = 0.4
DEFAULT_MAX_THRESHOLD = 0.5


class PatientClass(IntEnum):
    NO_CHIP = 0
    CHIP = 1


@dataclass
class PatientScore:
    patient_id: str
    label: int
    image_probs: List[float]
    ratio_score: float
    max_score: float


@dataclass(frozen=True)
class RocPoint:
    fpr: float
    tpr: float
    threshold: float


@dataclass
class RocCurve:
    points: List[RocPoint]
    auc: float


@dataclass
class MetricsSummary:
    metrics: Dict
    ratio_curve: RocCurve
    max_curve: RocCurve
    scores: List[PatientScore] = field(default_factory=list)


def score_patient(patient_id: str, label: int, image_probs: Sequence[float],
                  image_threshold: float = DEFAULT_IMAGE_THRESHOLD) -> PatientScore:
    """Ratio score = share of images with prob > image_threshold; max score = highest prob."""
    probs = [float(p) for p in image_probs]
    if not probs:
        raise MetricError(f"Patient {patient_id} has no image predictions.")
    positives = sum(p > image_threshold for p in probs)
    return PatientScore(
        patient_id=patient_id,
        label=int(label),
        image_probs=probs,
        ratio_score=positives / len(probs),
        max_score=max(probs),
    )


def patient_scores(fold_reports: Iterable, image_threshold: float = DEFAULT_IMAGE_THRESHOLD) -> List[PatientScore]:
    """
    One PatientScore per distinct patient across all folds, sorted by id.

    Every patient listed as tested by a report must own at least one
    prediction.
    """
    probs: Dict[str, List[float]] = {}
    labels: Dict[str, int] = {}
    expected = set()
    for report in fold_reports:
        expected.update(report.test_patients)
        for pred in report.image_predictions:
            known = labels.setdefault(pred.patient_id, int(pred.label))
            if known != int(pred.label):
                raise MetricError(f"Patient {pred.patient_id} has conflicting labels.")
            probs.setdefault(pred.patient_id, []).append(pred.probability)
    missing = expected - set(probs)
    if missing:
        raise MetricError(f"Patients {sorted(missing)} have no image predictions.")
    return [score_patient(pid, labels[pid], probs[pid], image_threshold) for pid in sorted(probs)]


def classify_ratio(score: PatientScore, ratio_threshold: float = DEFAULT_RATIO_THRESHOLD) -> PatientClass:
    # strictly greater than
    return PatientClass.CHIP if score.ratio_score > ratio_threshold else PatientClass.NO_CHIP


def classify_max(score: PatientScore, threshold: float = DEFAULT_MAX_THRESHOLD) -> PatientClass:
    return PatientClass.CHIP if score.max_score > threshold else PatientClass.NO_CHIP


def _split_scores(scores: Sequence[Tuple[float, int]]) -> Tuple[np.ndarray, np.ndarray]:
    if len(scores) == 0:
        raise MetricError("AUC undefined: no scores.")
    values = np.asarray([float(s) for s, _ in scores], dtype=np.float64)
    labels = np.asarray([int(l) for _, l in scores], dtype=np.int64)
    if not np.all(np.isfinite(values)):
        raise MetricError("Scores must be finite.")
    if not np.all((labels == 0) | (labels == 1)):
        raise MetricError("Labels must be 0 or 1.")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise MetricError("AUC undefined: scores contain a single class.")
    return values, labels


def roc_curve(scores: Sequence[Tuple[float, int]]) -> RocCurve:
    """
    ROC curve over the distinct score values, highest threshold first.

    A point at threshold t counts score >= t as positive. The curve starts
    at (0, 0) with an infinite threshold and ends at (1, 1). Tied scores
    form one diagonal segment, so the trapezoidal area equals the
    Mann-Whitney statistic with ties counted half.
    """
    values, labels = _split_scores(scores)
    fpr, tpr, thresholds = sk_metrics.roc_curve(labels, values, drop_intermediate=False)
    thresholds = thresholds.astype(np.float64)
    # older releases put max(score) + 1 here
    thresholds[0] = np.inf
    points = [RocPoint(float(f), float(t), float(th)) for f, t, th in zip(fpr, tpr, thresholds)]
    return RocCurve(points=points, auc=float(sk_metrics.auc(fpr, tpr)))


def auc_oracle(scores: Sequence[Tuple[float, int]]) -> float:
    """Brute-force pairwise AUC: P(positive outscores negative), ties count half."""
    values, labels = _split_scores(scores)
    pos = values[labels == 1]
    neg = values[labels == 0]
    diff = pos[:, None] - neg[None, :]
    wins = np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)
    return float(wins / diff.size)


def operating_point(scores: Sequence[Tuple[float, int]], threshold: float) -> Tuple[float, float]:
    """(fpr, tpr) of the rule 'score > threshold'."""
    values, labels = _split_scores(scores)
    predicted = values > threshold
    tpr = np.count_nonzero(predicted & (labels == 1)) / np.count_nonzero(labels == 1)
    fpr = np.count_nonzero(predicted & (labels == 0)) / np.count_nonzero(labels == 0)
    return float(fpr), float(tpr)


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    if len(predictions) != len(labels):
        raise MetricError(f"Got {len(predictions)} predictions for {len(labels)} labels.")
    if len(predictions) == 0:
        raise MetricError("Accuracy of an empty set is undefined.")
    return float(sk_metrics.accuracy_score([int(l) for l in labels], [int(p) for p in predictions]))


def _auc_or_none(scores: Sequence[Tuple[float, int]]) -> Optional[float]:
    try:
        return roc_curve(scores).auc
    except MetricError:
        return None


def summarize_metrics(fold_reports: Sequence, image_threshold: float = DEFAULT_IMAGE_THRESHOLD,
                      ratio_threshold: float = DEFAULT_RATIO_THRESHOLD,
                      max_threshold: float = DEFAULT_MAX_THRESHOLD) -> MetricsSummary:
    """
    Pool every fold's test predictions into one patient-level evaluation.

    Per-fold AUCs are reported for diagnostics and are None for folds whose
    test patients all share one label.
    """
    scores = patient_scores(fold_reports, image_threshold)
    labels = [s.label for s in scores]
    ratio_curve = roc_curve([(s.ratio_score, s.label) for s in scores])
    max_curve = roc_curve([(s.max_score, s.label) for s in scores])

    per_fold_ratio, per_fold_max = [], []
    for report in fold_reports:
        fold_scores = patient_scores([report], image_threshold)
        per_fold_ratio.append(_auc_or_none([(s.ratio_score, s.label) for s in fold_scores]))
        per_fold_max.append(_auc_or_none([(s.max_score, s.label) for s in fold_scores]))

    image_pairs = [(p.probability, p.label) for r in fold_reports for p in r.image_predictions]
    metrics = {
        "auc_ratio": ratio_curve.auc,
        "auc_max": max_curve.auc,
        f"accuracy_ratio_at_{ratio_threshold:g}": accuracy([classify_ratio(s, ratio_threshold) for s in scores], labels),
        f"accuracy_max_at_{max_threshold:g}": accuracy([classify_max(s, max_threshold) for s in scores], labels),
        "per_fold_auc_ratio": per_fold_ratio,
        "per_fold_auc_max": per_fold_max,
        "image_auc": _auc_or_none(image_pairs),
        "n_patients": len(scores),
        "image_threshold": image_threshold,
        "ratio_threshold": ratio_threshold,
        "max_threshold": max_threshold,
    }
    logger.info("Pooled AUC ratio %.4f / max %.4f over %d patients",
                ratio_curve.auc, max_curve.auc, len(scores))
    return MetricsSummary(metrics=metrics, ratio_curve=ratio_curve, max_curve=max_curve, scores=scores)
