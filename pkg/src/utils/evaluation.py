"""
Evaluation utilities for drive anomaly scores.

Scores follow one convention throughout: lower means more anomalous, and the
anomalous class is the positive class.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import precision_recall_fscore_support, roc_auc_score, roc_curve
from sklearn.model_selection import train_test_split

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ScoredSet:
    """Drive scores with ground truth (1 = anomalous)."""
    drive_ids: Tuple[str, ...]
    scores: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "drive_ids", tuple(self.drive_ids))
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=float))
        object.__setattr__(self, "truth", np.asarray(self.truth, dtype=int))
        if not len(self.drive_ids) == len(self.scores) == len(self.truth):
            raise ValueError("drive_ids, scores and truth must have the same length")

    @classmethod
    def from_entries(cls, entries: Iterable[Tuple[str, float, bool]]) -> "ScoredSet":
        """Build from (drive_id, score, is_anomalous) entries."""
        entries = list(entries)
        return cls(tuple(e[0] for e in entries), [e[1] for e in entries], [int(bool(e[2])) for e in entries])

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def has_both_classes(self) -> bool:
        return 0 < int(self.truth.sum()) < len(self.truth)

    def subset(self, indices: Sequence[int]) -> "ScoredSet":
        indices = np.asarray(indices, dtype=int)
        return ScoredSet(tuple(self.drive_ids[i] for i in indices), self.scores[indices], self.truth[indices])


class FMeasure(NamedTuple):
    f1: float
    precision: float
    recall: float


def roc_auc(scored: ScoredSet) -> float:
    """
    Probability that a random anomalous drive scores lower than a random benign one (ties count 1/2).

    Raises:
        ValueError: If only one class is present
    """
    if not scored.has_both_classes:
        raise ValueError("ROC-AUC needs at least one benign and one anomalous drive")
    return float(roc_auc_score(scored.truth, -scored.scores))


def f_measure(scored: ScoredSet, threshold: float) -> FMeasure:
    """
    F1, precision and recall when drives scoring below threshold are flagged.

    Args:
        scored: Scored drives
        threshold: Finite decision threshold

    Returns:
        FMeasure (zero-denominator cases give 0)
    """
    if not np.isfinite(threshold):
        raise ValueError(f"threshold must be finite, got {threshold}")
    predicted = (scored.scores < threshold).astype(int)
    precision, recall, f1, _ = precision_recall_fscore_support(
        scored.truth, predicted, average="binary", pos_label=1, zero_division=0)
    return FMeasure(float(f1), float(precision), float(recall))


def roc_points(scored: ScoredSet) -> pd.DataFrame:
    """ROC curve as (fpr, tpr, threshold) rows; a drive is flagged when score <= threshold."""
    fpr, tpr, thresholds = roc_curve(scored.truth, -scored.scores)
    return pd.DataFrame({"fpr": fpr, "tpr": tpr, "threshold": -thresholds})


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """One threshold per distinct cut of the sorted scores, from flagging none to flagging all."""
    unique = np.unique(scores)
    if len(unique) == 0:
        return np.array([0.0])
    midpoints = (unique[:-1] + unique[1:]) / 2.0
    return np.concatenate([[unique[0]], midpoints, [unique[-1] + max(1.0, abs(unique[-1]))]])


def best_f1_threshold(scored: ScoredSet) -> Tuple[float, FMeasure]:
    """
    Threshold maximizing F1 over every distinct cut of the scores.

    Returns:
        (threshold, FMeasure at that threshold); ties go to the lowest threshold
    """
    thresholds = candidate_thresholds(scored.scores)
    order = np.argsort(scored.scores, kind="stable")
    sorted_scores = scored.scores[order]
    cum_positive = np.concatenate([[0], np.cumsum(scored.truth[order])])
    flagged = np.searchsorted(sorted_scores, thresholds, side="left")
    tp = cum_positive[flagged]
    denominator = flagged + int(scored.truth.sum())
    f1 = np.where(denominator > 0, 2.0 * tp / np.maximum(denominator, 1), 0.0)
    best = int(np.argmax(f1))
    threshold = float(thresholds[best])
    return threshold, f_measure(scored, threshold)


def split_calibration(scored: ScoredSet, fraction: float = 0.2, seed: int = 0) -> Tuple[ScoredSet, ScoredSet]:
    """
    Split scored drives into a calibration slice and the remainder.

    Stratified by class when both classes have at least two drives.
    """
    indices = np.arange(len(scored))
    counts = np.bincount(scored.truth, minlength=2)
    stratify = scored.truth if counts.min() >= 2 else None
    calibration, remainder = train_test_split(indices, train_size=fraction, random_state=seed, stratify=stratify)
    return scored.subset(np.sort(calibration)), scored.subset(np.sort(remainder))


def tuned_f_measure(scored: ScoredSet, fraction: float = 0.2, seed: int = 0) -> Tuple[float, FMeasure]:
    """Best-F1 threshold chosen on a calibration slice, F-measure reported on the remainder."""
    calibration, remainder = split_calibration(scored, fraction, seed)
    threshold, _ = best_f1_threshold(calibration)
    return threshold, f_measure(remainder, threshold)


class ModelEvaluator:
    """Detection metrics for one scored test set."""

    def __init__(self, scored: ScoredSet, threshold: Optional[float] = None):
        """
        Initialize evaluator.

        Args:
            scored: Scored drives
            threshold: Decision threshold of the technique (None to use the best-F1 cut)
        """
        self.scored = scored
        self.threshold = threshold
        self.metrics: Dict[str, float] = {}

    def calculate_basic_metrics(self) -> Dict[str, float]:
        """
        Calculate AUC and threshold metrics.

        Returns:
            Dictionary of metrics
        """
        logger.info("Calculating basic metrics...")
        threshold = self.threshold
        if threshold is None:
            threshold, _ = best_f1_threshold(self.scored)
        fm = f_measure(self.scored, threshold)
        predicted = self.scored.scores < threshold
        self.metrics = {
            "n_drives": float(len(self.scored)),
            "n_anomalous": float(self.scored.truth.sum()),
            "threshold": float(threshold),
            "accuracy": float((predicted == self.scored.truth.astype(bool)).mean()) if len(self.scored) else 0.0,
            "precision": fm.precision,
            "recall": fm.recall,
            "f1_score": fm.f1,
            "roc_auc": roc_auc(self.scored) if self.scored.has_both_classes else float("nan"),
        }
        logger.info(f"Basic metrics calculated: {self.metrics}")
        return self.metrics

    def generate_report(self) -> str:
        """
        Plain-text evaluation report.

        Returns:
            Report text
        """
        if not self.metrics:
            self.calculate_basic_metrics()
        m = self.metrics
        return "\n".join([
            "DETECTION EVALUATION REPORT",
            "=" * 40,
            f"Drives:     {int(m['n_drives'])} ({int(m['n_anomalous'])} anomalous)",
            f"ROC-AUC:    {m['roc_auc']:.4f}",
            f"Threshold:  {m['threshold']:.6g}",
            f"Precision:  {m['precision']:.4f}",
            f"Recall:     {m['recall']:.4f}",
            f"F1-Score:   {m['f1_score']:.4f}",
            f"Accuracy:   {m['accuracy']:.4f}",
        ])
