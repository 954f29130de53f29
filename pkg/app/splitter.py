"""
Splitter - Adaptation-conditioned ID/OOD sample splitting.

Each sample gets a prototypical distance d = 1 - max_c cos(z, w_c). The scores are cut
into two clusters by exact 1-D 2-means (sort, then scan every threshold); the
smaller-centroid cluster is ID.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Iterable, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

BUFFER_CAPACITY = 64
SMALL_BATCH_MAX = 8


@dataclass
class TwoMeansResult:
    id_mask: np.ndarray
    centroid_id: float
    centroid_ood: float
    threshold: float
    objective: float

    @property
    def degenerate(self) -> bool:
        return not np.any(~self.id_mask)


@dataclass
class SplitResult:
    id_indices: np.ndarray
    ood_indices: np.ndarray
    centroid_id: float
    centroid_ood: float
    scores: np.ndarray

    @property
    def n(self) -> int:
        return int(self.scores.shape[0])

    @property
    def id_mask(self) -> np.ndarray:
        mask = np.zeros(self.n, dtype=bool)
        mask[self.id_indices] = True
        return mask

    @classmethod
    def whole_batch(cls, scores: np.ndarray) -> "SplitResult":
        """Everything ID; used when splitting is switched off."""
        scores = np.asarray(scores, dtype=np.float64)
        c = float(scores.mean()) if scores.size else float("nan")
        return cls(np.arange(scores.size), np.array([], dtype=int), c, c, scores)


@dataclass
class ScoreBuffer:
    """FIFO of recent prototypical distances; the oldest score is evicted first."""
    capacity: int = BUFFER_CAPACITY
    values: Deque[float] = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError(f"buffer capacity must be >= 1, got {self.capacity}")
        self.values = deque(self.values, maxlen=self.capacity)

    def extend(self, scores: Iterable[float]):
        self.values.extend(float(s) for s in scores)

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.fromiter(self.values, dtype=np.float64, count=len(self.values))


def cosine_to_prototypes(features: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """(n, C) cosine matrix; zero-norm rows or prototypes give similarity 0."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    prototypes = np.atleast_2d(np.asarray(prototypes, dtype=np.float64))
    fn = np.linalg.norm(features, axis=1, keepdims=True)
    pn = np.linalg.norm(prototypes, axis=1, keepdims=True)
    fu = np.divide(features, fn, out=np.zeros_like(features), where=fn > 0)
    pu = np.divide(prototypes, pn, out=np.zeros_like(prototypes), where=pn > 0)
    return fu @ pu.T


def proto_distance(features: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """1 - max_c cos(z, w_c), for one feature vector or a batch of rows."""
    prototypes = np.atleast_2d(prototypes)
    if prototypes.shape[0] < 1:
        raise ValueError("proto_distance needs at least one prototype")
    single = np.ndim(features) == 1
    d = 1.0 - cosine_to_prototypes(features, prototypes).max(axis=1)
    return float(d[0]) if single else d


def within_cluster_sse(scores: np.ndarray, mask: np.ndarray) -> float:
    """Sum of squared deviations from each side's centroid; each side is summed in sorted order."""
    scores = np.asarray(scores, dtype=np.float64)
    total = 0.0
    for side in (np.sort(scores[mask]), np.sort(scores[~mask])):
        if side.size:
            total += float(np.sum((side - side.mean()) ** 2))
    return total


def two_means_1d(scores: Iterable[float]) -> TwoMeansResult:
    """
    Globally optimal 2-means of scalar scores.

    The optimum in 1-D is a threshold cut of the sorted values, so every cut between
    distinct values is scanned. Equal-objective cuts resolve to the smallest ID cluster;
    values equal to the threshold stay on the ID side. All-equal input (or a single
    score) puts everything in the ID cluster.
    """
    scores = np.asarray(list(scores) if not isinstance(scores, np.ndarray) else scores, dtype=np.float64)
    n = scores.size
    if n == 0:
        raise ValueError("two_means_1d needs at least one score")

    ordered = np.sort(scores, kind="mergesort")
    if n < 2 or ordered[0] == ordered[-1]:
        c = float(scores.mean())
        return TwoMeansResult(np.ones(n, dtype=bool), c, c, float(ordered[-1]), 0.0)

    best_k, best_obj = -1, np.inf
    for k in range(1, n):
        if ordered[k - 1] == ordered[k]:
            continue
        obj = within_cluster_sse(scores, scores <= ordered[k - 1])
        if obj < best_obj:
            best_k, best_obj = k, obj

    threshold = float(ordered[best_k - 1])
    id_mask = scores <= threshold
    return TwoMeansResult(
        id_mask=id_mask,
        centroid_id=float(scores[id_mask].mean()),
        centroid_ood=float(scores[~id_mask].mean()),
        threshold=threshold,
        objective=within_cluster_sse(scores, id_mask),
    )


def split_batch(features: np.ndarray, prototypes: np.ndarray,
                buffer: Optional[ScoreBuffer] = None,
                small_batch_max: int = SMALL_BATCH_MAX) -> SplitResult:
    """
    Partition a batch into likely-ID and likely-OOD samples.

    With a buffer and a batch of at most `small_batch_max` samples, the current scores
    are appended to the buffer, 2-means runs over the buffer, and each current sample
    joins the cluster with the nearer centroid (ties go to ID).
    """
    scores = proto_distance(np.atleast_2d(features), prototypes)
    n = scores.size
    if n == 0:
        raise ValueError("split_batch needs a nonempty batch")

    if buffer is not None and n <= small_batch_max:
        buffer.extend(scores)
        clusters = two_means_1d(buffer.as_array())
        c_id, c_ood = clusters.centroid_id, clusters.centroid_ood
        if clusters.degenerate:
            id_mask = np.ones(n, dtype=bool)
        else:
            id_mask = np.abs(scores - c_id) <= np.abs(scores - c_ood)
        logger.debug(f"Buffered split over {len(buffer)} scores: {int(id_mask.sum())}/{n} ID")
    else:
        clusters = two_means_1d(scores)
        c_id, c_ood = clusters.centroid_id, clusters.centroid_ood
        id_mask = clusters.id_mask

    return SplitResult(
        id_indices=np.flatnonzero(id_mask),
        ood_indices=np.flatnonzero(~id_mask),
        centroid_id=c_id,
        centroid_ood=c_ood,
        scores=scores,
    )


def split_precision_recall(split: SplitResult, is_id: np.ndarray) -> Tuple[float, float]:
    """
    Purity of the ID assignment against hidden labels.

    precision = true ID among assigned ID; recall = assigned ID among true ID.
    Undefined ratios are NaN.
    """
    is_id = np.asarray(is_id, dtype=bool)
    assigned = split.id_mask
    hits = int(np.sum(assigned & is_id))
    n_assigned, n_true = int(assigned.sum()), int(is_id.sum())
    precision = hits / n_assigned if n_assigned else float("nan")
    recall = hits / n_true if n_true else float("nan")
    return precision, recall
