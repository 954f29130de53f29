"""
OOD Metrics - post-hoc scores, AUC, closed-set accuracy and H-score.

Every score follows the same convention: higher means more ID-like.
"""

import math
from dataclasses import dataclass, asdict
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import stats as scipy_stats
from scipy.special import logsumexp, softmax


class MetricError(ValueError):
    """Raised for invalid metric inputs."""
    pass


class OodScore(Enum):
    ENERGY = "energy"
    MSP = "msp"
    MAXLOGIT = "maxlogit"
    ENTROPY = "entropy"

    @classmethod
    def parse(cls, value) -> "OodScore":
        if isinstance(value, OodScore):
            return value
        try:
            return cls(str(value).lower())
        except ValueError as e:
            raise MetricError(f"Unknown OOD score '{value}'. Options: {[s.value for s in cls]}") from e


def _logits_2d(logits) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if arr.shape[-1] < 1:
        raise MetricError("scores need at least one logit")
    return arr


def _unwrap(values: np.ndarray, single: bool):
    return float(values[0]) if single else values


def energy_score(logits) -> np.ndarray:
    """logsumexp of the logits (temperature 1)."""
    single = np.ndim(logits) == 1
    return _unwrap(logsumexp(_logits_2d(logits), axis=-1), single)


def msp_score(logits) -> np.ndarray:
    single = np.ndim(logits) == 1
    return _unwrap(softmax(_logits_2d(logits), axis=-1).max(axis=-1), single)


def maxlogit_score(logits) -> np.ndarray:
    single = np.ndim(logits) == 1
    return _unwrap(_logits_2d(logits).max(axis=-1), single)


def entropy_score(logits) -> np.ndarray:
    """Negative Shannon entropy of softmax(logits)."""
    single = np.ndim(logits) == 1
    arr = _logits_2d(logits)
    if arr.shape[-1] < 2:
        raise MetricError("entropy score needs at least two classes")
    log_p = arr - logsumexp(arr, axis=-1, keepdims=True)
    p = np.exp(log_p)
    return _unwrap(np.sum(p * log_p, axis=-1), single)


SCORE_FUNCTIONS = {
    OodScore.ENERGY: energy_score,
    OodScore.MSP: msp_score,
    OodScore.MAXLOGIT: maxlogit_score,
    OodScore.ENTROPY: entropy_score,
}


def score_logits(logits, score) -> np.ndarray:
    """Vectorized scoring of (n, C) logits with the named score."""
    fn = SCORE_FUNCTIONS[OodScore.parse(score)]
    return np.atleast_1d(fn(_logits_2d(logits)))


def auc(id_scores: Sequence[float], ood_scores: Sequence[float]) -> Optional[float]:
    """
    P(random ID score > random OOD score), ties counted 1/2, via midranks.

    Returns None when either side is empty.
    """
    id_scores = np.asarray(id_scores, dtype=np.float64).ravel()
    ood_scores = np.asarray(ood_scores, dtype=np.float64).ravel()
    n_id, n_ood = id_scores.size, ood_scores.size
    if n_id == 0 or n_ood == 0:
        return None
    ranks = scipy_stats.rankdata(np.concatenate([id_scores, ood_scores]), method="average")
    u = ranks[:n_id].sum() - n_id * (n_id + 1) / 2.0
    return float(u / (n_id * n_ood))


def auc_pairwise(id_scores: Sequence[float], ood_scores: Sequence[float]) -> Optional[float]:
    """O(n*m) reference: mean over all (ID, OOD) pairs of [id > ood] + 0.5 [id == ood]."""
    id_scores = np.asarray(id_scores, dtype=np.float64).ravel()
    ood_scores = np.asarray(ood_scores, dtype=np.float64).ravel()
    if id_scores.size == 0 or ood_scores.size == 0:
        return None
    diff = id_scores[:, None] - ood_scores[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def closed_set_accuracy(predictions: np.ndarray, labels: np.ndarray) -> Optional[float]:
    """Accuracy over true-ID samples (labels >= 0); None without any."""
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    mask = labels >= 0
    if not mask.any():
        return None
    return float(np.mean(predictions[mask] == labels[mask]))


def h_score(acc: Optional[float], auc_value: Optional[float]) -> Optional[float]:
    """Harmonic mean of ACC and AUC; 0 when either is 0, None when either is missing."""
    if acc is None or auc_value is None:
        return None
    if acc + auc_value <= 0:
        return 0.0
    return 2.0 * acc * auc_value / (acc + auc_value)


@dataclass
class ScoredSample:
    ood_score: float
    predicted_class: int
    true_label: int  # ID class index, or -1 for OOD

    @property
    def is_ood(self) -> bool:
        return self.true_label < 0


@dataclass
class MetricSummary:
    acc: Optional[float]
    auc: Optional[float]
    h_score: Optional[float]

    @classmethod
    def from_samples(cls, samples: Sequence[ScoredSample]) -> "MetricSummary":
        preds = np.array([s.predicted_class for s in samples])
        labels = np.array([s.true_label for s in samples])
        scores = np.array([s.ood_score for s in samples], dtype=np.float64)
        return cls.from_arrays(preds, labels, scores)

    @classmethod
    def from_arrays(cls, predictions: np.ndarray, labels: np.ndarray, scores: np.ndarray) -> "MetricSummary":
        labels = np.asarray(labels)
        acc = closed_set_accuracy(predictions, labels)
        auc_value = auc(scores[labels >= 0], scores[labels < 0])
        return cls(acc, auc_value, h_score(acc, auc_value))

    def to_dict(self) -> Dict[str, Optional[float]]:
        return asdict(self)


def _mean(values: List[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(present)) if present else None


def aggregate(per_cell: Sequence[MetricSummary]) -> MetricSummary:
    """
    Arithmetic means of acc, auc and h_score across cells.

    H is averaged, not recomputed from the averaged ACC/AUC. Missing values are skipped.
    """
    if not per_cell:
        raise MetricError("aggregate needs at least one cell")
    return MetricSummary(
        acc=_mean([c.acc for c in per_cell]),
        auc=_mean([c.auc for c in per_cell]),
        h_score=_mean([c.h_score for c in per_cell]),
    )


@dataclass
class PairedComparison:
    mean_diff: float
    t_stat: Optional[float]
    p_value: Optional[float]
    n: int


def paired_comparison(a: Sequence[float], b: Sequence[float]) -> PairedComparison:
    """One-sided paired t-test of H1: mean(a - b) > 0."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"paired samples differ in length: {a.shape} vs {b.shape}")
    diff = a - b
    if diff.size < 2 or np.all(diff == diff[0]):
        return PairedComparison(float(diff.mean()) if diff.size else float("nan"), None, None, int(diff.size))
    res = scipy_stats.ttest_rel(a, b, alternative="greater")
    return PairedComparison(float(diff.mean()), float(res.statistic), float(res.pvalue), int(diff.size))


def summarize_run(record, score="energy", aggregation: str = "cell",
                  exclude_first_batch: bool = False) -> MetricSummary:
    """
    Per-domain MetricSummary cells of a RunRecord, averaged.

    `aggregation="pooled"` treats every sample of the run as one cell. Cells without ID
    or OOD samples give a missing AUC and drop out of the AUC and H means.
    """
    if aggregation not in ("cell", "pooled"):
        raise MetricError(f"aggregation must be 'cell' or 'pooled', got '{aggregation}'")
    cells: Dict[int, List[int]] = {}
    for i, batch in enumerate(record.batches):
        if exclude_first_batch and i == 0:
            continue
        key = 0 if aggregation == "pooled" else batch.domain_index
        cells.setdefault(key, []).append(i)
    if not cells:
        raise MetricError("no batches left to summarize")

    summaries = []
    for key in sorted(cells):
        logits = np.concatenate([record.logits[i] for i in cells[key]])
        labels = np.concatenate([record.labels[i] for i in cells[key]])
        summaries.append(MetricSummary.from_arrays(logits.argmax(axis=1), labels, score_logits(logits, score)))
    return aggregate(summaries)
