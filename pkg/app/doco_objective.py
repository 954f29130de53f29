"""
DOCO objective: back-to-source statistical alignment plus structural preservation.

    L_stat = ||mean(Z_p) - mu_S||_2 + ||std(Z_p) - sigma_S||_2
    L_reg  = ||sim(Z_p) - sim(Z_raw)||_F
    L_DOCO = L_stat + beta * L_reg

Standard deviations are population statistics (divide by n) on both the source and
the test side.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from app import autodiff as ad
from app.autodiff import Tensor, DimensionError

DEFAULT_BETA = 0.5


@dataclass
class SourceStats:
    mu_s: np.ndarray
    sigma_s: np.ndarray
    n_source: int

    def __post_init__(self):
        self.mu_s = np.asarray(self.mu_s, dtype=np.float64)
        self.sigma_s = np.asarray(self.sigma_s, dtype=np.float64)
        if self.mu_s.shape != self.sigma_s.shape or self.mu_s.ndim != 1:
            raise DimensionError(f"mu_s {self.mu_s.shape} and sigma_s {self.sigma_s.shape} must be equal-length vectors")
        if np.any(self.sigma_s < 0):
            raise ValueError("sigma_s must be elementwise >= 0")

    @property
    def dim(self) -> int:
        return int(self.mu_s.shape[0])

    @classmethod
    def from_features(cls, features: np.ndarray) -> "SourceStats":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 2:
            raise ValueError(f"source statistics need at least 2 feature rows, got shape {features.shape}")
        return cls(features.mean(axis=0), features.std(axis=0), int(features.shape[0]))

    def to_dict(self) -> dict:
        return {"n_source": self.n_source, "std": "population",
                "mu_s": self.mu_s.tolist(), "sigma_s": self.sigma_s.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "SourceStats":
        return cls(np.array(data["mu_s"]), np.array(data["sigma_s"]), int(data["n_source"]))

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SourceStats":
        with open(path, "r") as f:
            return cls.from_dict(json.load(f))


@dataclass
class LossBreakdown:
    stat: float
    reg: float
    total: float
    beta: float


def batch_stats(features: Union[Tensor, np.ndarray]) -> Tuple[Tensor, Tensor]:
    """Per-dimension population mean and standard deviation."""
    features = ad.as_tensor(features)
    if features.ndim != 2:
        raise DimensionError(f"batch_stats expects (n, d) features, got {features.shape}")
    if features.shape[0] == 0:
        raise ValueError("batch_stats of an empty batch")
    mu = ad.mean(features, axis=0)
    centered = features - mu
    var = ad.mean(centered * centered, axis=0)
    return mu, ad.sqrt(var)


def _l2(v: Tensor) -> Tensor:
    return ad.sqrt(ad.sum(v * v))


def stat_loss(features: Union[Tensor, np.ndarray], src: SourceStats) -> Tensor:
    features = ad.as_tensor(features)
    if features.ndim != 2 or features.shape[1] != src.dim:
        raise DimensionError(f"features {features.shape} do not match source stats dim {src.dim}")
    mu, sigma = batch_stats(features)
    return _l2(mu - src.mu_s) + _l2(sigma - src.sigma_s)


def cosine(a: Union[Tensor, np.ndarray], b: Union[Tensor, np.ndarray]) -> Tensor:
    """Cosine similarity of two vectors; a zero-norm operand gives 0 with zero gradient."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"cosine needs two equal-length vectors, got {a.shape} and {b.shape}")
    return ad.sum(ad.normalize_rows(a) * ad.normalize_rows(b))


def pairwise_sim(features: Union[Tensor, np.ndarray]) -> Tensor:
    """
    n x n cosine-similarity matrix.

    The diagonal is exactly 1 (self-similarity); off-diagonal entries involving a
    zero-norm row are 0.
    """
    features = ad.as_tensor(features)
    if features.ndim != 2 or features.shape[0] < 1:
        raise DimensionError(f"pairwise_sim expects (n, d) with n >= 1, got {features.shape}")
    n = features.shape[0]
    unit = ad.normalize_rows(features)
    sim = ad.matmul(unit, ad.transpose(unit))
    eye = np.eye(n)
    return sim * (1.0 - eye) + eye


def structural_loss(prompted: Union[Tensor, np.ndarray], raw: Union[Tensor, np.ndarray]) -> Tensor:
    """Frobenius distance between similarity matrices; `raw` is treated as a constant."""
    prompted = ad.as_tensor(prompted)
    raw = np.asarray(raw.data if isinstance(raw, Tensor) else raw, dtype=np.float64)
    if prompted.shape != raw.shape:
        raise DimensionError(f"structural_loss shapes differ: {prompted.shape} vs {raw.shape}")
    if prompted.shape[0] < 2:
        return Tensor(0.0)
    diff = pairwise_sim(prompted) - pairwise_sim(raw).data
    return ad.sqrt(ad.sum(diff * diff))


def doco_loss(prompted: Union[Tensor, np.ndarray], raw: Union[Tensor, np.ndarray],
              src: SourceStats, beta: float = DEFAULT_BETA) -> Tuple[Tensor, LossBreakdown]:
    """
    L_DOCO and its breakdown.

    The structural term is forced to 0 when fewer than two samples are available.

    Returns:
        (total loss tensor for backward, LossBreakdown of plain floats)
    """
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    prompted = ad.as_tensor(prompted)
    if prompted.ndim != 2 or prompted.shape[0] < 1:
        raise DimensionError(f"doco_loss needs (n, d) features with n >= 1, got {prompted.shape}")

    stat = stat_loss(prompted, src)
    reg = structural_loss(prompted, raw) if prompted.shape[0] >= 2 else Tensor(0.0)
    total = stat + beta * reg if beta != 0 else stat
    breakdown = LossBreakdown(stat=stat.item(), reg=reg.item(),
                              total=total.item(), beta=float(beta))
    return total, breakdown
