"""
Stream Synth - Procedural open-set task and corrupted test streams.

ID and OOD classes are Gaussian token-grid patterns; a test stream walks through a
sequence of domains, each applying one corruption to every sample (ID or OOD) it emits.
Per-sample OOD membership follows a Huber mixture with ratio kappa.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field, asdict, fields
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from app import seeding
from app.doco_objective import SourceStats

logger = logging.getLogger(__name__)

OOD_LABEL = -1


class TaskError(Exception):
    """Raised when a synthetic task is invalid or not separable enough."""
    pass


class CorruptionError(ValueError):
    """Raised for unknown shift kinds or invalid severities."""
    pass


class ShiftKind(Enum):
    ADDITIVE_BIAS = "additive-bias"
    GAIN = "gain"
    TOKEN_DROPOUT = "token-dropout-mask"
    BLUR_MIX = "blur-mix"

    @classmethod
    def parse(cls, value: Union[str, "ShiftKind"]) -> "ShiftKind":
        if isinstance(value, ShiftKind):
            return value
        try:
            return cls(value)
        except ValueError as e:
            raise CorruptionError(f"Unknown shift kind '{value}'. Options: {[k.value for k in cls]}") from e


def _known_kwargs(cls, data: Optional[Dict]) -> Dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in (data or {}).items() if k in names}


@dataclass
class TaskSpec:
    n_id_classes: int = 8
    n_ood_classes: int = 4
    n_patches: int = 16
    d_in: int = 16
    noise_std: float = 0.6
    seed: int = 0
    calibration_floor: float = 0.9
    class_seeds: List[int] = field(default_factory=list)

    def __post_init__(self):
        if self.n_id_classes < 1 or self.n_ood_classes < 0:
            raise TaskError(f"invalid class counts: {self.n_id_classes} ID / {self.n_ood_classes} OOD")
        total = self.n_id_classes + self.n_ood_classes
        if not self.class_seeds:
            rng = seeding.substream(self.seed, seeding.TASK)
            self.class_seeds = [int(s) for s in rng.choice(2 ** 31, size=total, replace=False)]
        self.class_seeds = [int(s) for s in self.class_seeds]
        if len(self.class_seeds) != total:
            raise TaskError(f"expected {total} class seeds, got {len(self.class_seeds)}")
        if set(self.id_seeds) & set(self.ood_seeds):
            raise TaskError("ID and OOD class seeds must be disjoint")

    @property
    def id_seeds(self) -> List[int]:
        return self.class_seeds[:self.n_id_classes]

    @property
    def ood_seeds(self) -> List[int]:
        return self.class_seeds[self.n_id_classes:]

    @property
    def token_grid(self):
        return (self.n_patches, self.d_in)

    def patterns(self) -> np.ndarray:
        """(n_id + n_ood, k, d_in) class patterns; ID classes first."""
        grids = [np.random.default_rng(s).standard_normal(self.token_grid) for s in self.class_seeds]
        return np.stack(grids) if grids else np.zeros((0,) + self.token_grid)

    def sample(self, class_index: np.ndarray, rng: np.random.Generator,
               patterns: Optional[np.ndarray] = None) -> np.ndarray:
        """Clean tokens for the given pattern indices (ID classes first, then OOD)."""
        patterns = self.patterns() if patterns is None else patterns
        class_index = np.asarray(class_index, dtype=int)
        noise = rng.standard_normal((class_index.size,) + self.token_grid)
        return patterns[class_index] + self.noise_std * noise

    def sample_id(self, n: int, rng: np.random.Generator, patterns: Optional[np.ndarray] = None):
        labels = rng.integers(0, self.n_id_classes, size=n)
        return self.sample(labels, rng, patterns), labels

    def check_separability(self, n_per_class: int = 50) -> float:
        """
        Nearest-class-mean accuracy on fresh clean ID samples.

        Raises:
            TaskError: If accuracy is below `calibration_floor`
        """
        rng = seeding.substream(self.seed, seeding.TASK, 1)
        patterns = self.patterns()[:self.n_id_classes]
        labels = np.repeat(np.arange(self.n_id_classes), n_per_class)
        tokens = self.sample(labels, rng, patterns).reshape(labels.size, -1)
        flat = patterns.reshape(self.n_id_classes, -1)
        dists = ((tokens[:, None, :] - flat[None, :, :]) ** 2).sum(axis=-1)
        acc = float(np.mean(dists.argmin(axis=1) == labels))
        if acc < self.calibration_floor:
            raise TaskError(f"class patterns not separable enough: nearest-mean accuracy "
                            f"{acc:.3f} < floor {self.calibration_floor}")
        return acc

    @classmethod
    def from_dict(cls, data: Optional[Dict]) -> "TaskSpec":
        return cls(**_known_kwargs(cls, data))

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class DomainSpec:
    domain_index: int
    shift_kind: ShiftKind
    severity: float
    delta_seed: int
    ground_truth_delta: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.shift_kind = ShiftKind.parse(self.shift_kind)
        if self.severity < 0:
            raise CorruptionError(f"severity must be >= 0, got {self.severity}")

    @classmethod
    def build(cls, domain_index: int, shift_kind: Union[str, ShiftKind], severity: float,
              delta_seed: int, n_patches: int, d_in: int) -> "DomainSpec":
        """Draw the realized corruption parameters from `delta_seed`."""
        spec = cls(domain_index, shift_kind, float(severity), int(delta_seed))
        rng = np.random.default_rng(spec.delta_seed)
        s = spec.severity
        kind = spec.shift_kind
        if kind is ShiftKind.ADDITIVE_BIAS:
            delta = {"bias": s * rng.standard_normal(d_in)}
        elif kind is ShiftKind.GAIN:
            delta = {"gain": np.exp(0.5 * s * rng.standard_normal(d_in))}
        elif kind is ShiftKind.TOKEN_DROPOUT:
            n_drop = int(round(n_patches * min(0.75, 0.15 * s)))
            keep = np.ones(n_patches)
            keep[rng.permutation(n_patches)[:n_drop]] = 0.0
            delta = {"keep": keep}
        elif kind is ShiftKind.BLUR_MIX:
            delta = {"alpha": np.array([min(1.0, 0.3 * s)])}
        else:  # pragma: no cover - ShiftKind.parse already rejects
            raise CorruptionError(f"Unknown shift kind {kind}")
        spec.ground_truth_delta = delta
        return spec

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.shift_kind.value.encode())
        for name in sorted(self.ground_truth_delta):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.ground_truth_delta[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def to_dict(self) -> Dict:
        return {
            "domain_index": self.domain_index,
            "shift_kind": self.shift_kind.value,
            "severity": self.severity,
            "delta_seed": self.delta_seed,
            "ground_truth_delta": {k: v.tolist() for k, v in self.ground_truth_delta.items()},
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "DomainSpec":
        spec = cls(int(data["domain_index"]), data["shift_kind"], float(data["severity"]), int(data["delta_seed"]))
        spec.ground_truth_delta = {k: np.asarray(v, dtype=np.float64)
                                   for k, v in data.get("ground_truth_delta", {}).items()}
        return spec


def apply_corruption(tokens: np.ndarray, domain: DomainSpec) -> np.ndarray:
    """
    Corrupt tokens of shape (..., k, d_in) with the domain's realized parameters.

    additive-bias adds a per-domain d_in vector; gain multiplies by a positive per-domain
    diagonal; token-dropout-mask zeroes a fixed token subset; blur-mix blends every token
    with the mean of its two neighbors (edges replicated).
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    kind = ShiftKind.parse(domain.shift_kind)
    if domain.severity == 0:
        return tokens.copy()
    delta = domain.ground_truth_delta
    if kind is ShiftKind.ADDITIVE_BIAS:
        return tokens + delta["bias"]
    if kind is ShiftKind.GAIN:
        return tokens * delta["gain"]
    if kind is ShiftKind.TOKEN_DROPOUT:
        return tokens * delta["keep"][:, None]
    if kind is ShiftKind.BLUR_MIX:
        alpha = float(delta["alpha"][0])
        prev = np.concatenate([tokens[..., :1, :], tokens[..., :-1, :]], axis=-2)
        nxt = np.concatenate([tokens[..., 1:, :], tokens[..., -1:, :]], axis=-2)
        return (1.0 - alpha) * tokens + alpha * 0.5 * (prev + nxt)
    raise CorruptionError(f"Unknown shift kind {kind}")


DEFAULT_KINDS = (ShiftKind.ADDITIVE_BIAS, ShiftKind.GAIN, ShiftKind.TOKEN_DROPOUT, ShiftKind.BLUR_MIX)


def default_domains(task: TaskSpec, severity: float, seed: int,
                    kinds: Sequence[Union[str, ShiftKind]] = DEFAULT_KINDS) -> List[DomainSpec]:
    """One domain per shift kind, parameters drawn from the run's domain sub-stream."""
    rng = seeding.substream(seed, seeding.DOMAINS)
    delta_seeds = rng.integers(0, 2 ** 31, size=len(kinds))
    return [DomainSpec.build(i, kind, severity, int(delta_seeds[i]), task.n_patches, task.d_in)
            for i, kind in enumerate(kinds)]


def random_orders(n_domains: int, count: int, seed: int) -> List[List[int]]:
    """`count` distinct domain orders; the first is the identity order."""
    identity = list(range(n_domains))
    orders = [identity]
    limit = 1
    for i in range(2, n_domains + 1):
        limit *= i
    count = min(count, limit)
    rng = seeding.substream(seed, seeding.ORDERS)
    while len(orders) < count:
        perm = [int(i) for i in rng.permutation(n_domains)]
        if perm not in orders:
            orders.append(perm)
    return orders


def format_order(order: Sequence[int]) -> str:
    return "-".join(str(i) for i in order)


def parse_order(text: str) -> List[int]:
    parts = [p for p in text.replace("-", ",").split(",") if p.strip()]
    order = [int(p) for p in parts]
    if sorted(order) != list(range(len(order))):
        raise ValueError(f"'{text}' is not a permutation of 0..{len(order) - 1}")
    return order


@dataclass
class StreamConfig:
    kappa: float = 0.5
    batch_size: int = 64
    batches_per_domain: int = 20
    severity: float = 3.0
    domain_order: Optional[List[int]] = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.kappa < 1.0:
            raise ValueError(f"kappa must lie in [0, 1), got {self.kappa}")
        if self.batch_size < 1 or self.batches_per_domain < 1:
            raise ValueError("batch_size and batches_per_domain must be >= 1")
        if self.domain_order is not None:
            self.domain_order = [int(i) for i in self.domain_order]
            if sorted(self.domain_order) != list(range(len(self.domain_order))):
                raise ValueError(f"domain_order {self.domain_order} is not a permutation")

    @classmethod
    def from_dict(cls, data: Optional[Dict]) -> "StreamConfig":
        return cls(**_known_kwargs(cls, data))

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class UnlabeledBatch:
    """What the adapter is allowed to see."""
    tokens: np.ndarray
    position: int


@dataclass
class StreamBatch:
    tokens: np.ndarray
    labels: np.ndarray  # ID class index, or OOD_LABEL
    domain_index: int
    batch_index: int

    @property
    def is_id(self) -> np.ndarray:
        return self.labels != OOD_LABEL

    @property
    def size(self) -> int:
        return int(self.labels.size)

    def unlabeled(self) -> UnlabeledBatch:
        return UnlabeledBatch(tokens=self.tokens, position=self.batch_index)


def ordered_domains(config: StreamConfig, domains: List[DomainSpec]) -> List[DomainSpec]:
    order = config.domain_order if config.domain_order is not None else list(range(len(domains)))
    if len(order) != len(domains):
        raise ValueError(f"domain_order has {len(order)} entries for {len(domains)} domains")
    return [domains[i] for i in order]


def make_stream(config: StreamConfig, task: TaskSpec, domains: List[DomainSpec]) -> List[StreamBatch]:
    """
    Emit `batches_per_domain` batches per domain, in order.

    Every sample is independently OOD with probability kappa; its class is uniform within
    its pool; the current domain's corruption is applied to all samples.
    """
    rng = seeding.substream(config.seed, seeding.STREAM)
    patterns = task.patterns()
    batches = []
    index = 0
    for domain in ordered_domains(config, domains):
        for _ in range(config.batches_per_domain):
            is_ood = rng.random(config.batch_size) < config.kappa
            if task.n_ood_classes == 0:
                is_ood[:] = False
            id_class = rng.integers(0, task.n_id_classes, size=config.batch_size)
            ood_class = rng.integers(0, max(task.n_ood_classes, 1), size=config.batch_size)
            pattern_index = np.where(is_ood, task.n_id_classes + ood_class, id_class)
            tokens = apply_corruption(task.sample(pattern_index, rng, patterns), domain)
            labels = np.where(is_ood, OOD_LABEL, id_class)
            batches.append(StreamBatch(tokens, labels, domain.domain_index, index))
            index += 1
    logger.info(f"Stream generated: {len(batches)} batches over {len(domains)} domains (kappa={config.kappa})")
    return batches


def build_manifest(config: StreamConfig, task: TaskSpec, domains: List[DomainSpec]) -> Dict:
    """Everything needed to regenerate the stream byte-exactly, plus its digest."""
    body = {
        "seed": config.seed,
        "task": task.to_dict(),
        "domains": [d.to_dict() for d in domains],
        "domain_fingerprints": [d.fingerprint() for d in domains],
        "stream": config.to_dict(),
    }
    canonical = json.dumps(body, sort_keys=True, separators=(",", ":"))
    body["sha256"] = hashlib.sha256(canonical.encode("utf-8")).hexdigest()
    return body


def write_manifest(path: Union[str, Path], manifest: Dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def stream_from_manifest(manifest: Dict) -> List[StreamBatch]:
    task = TaskSpec.from_dict(manifest["task"])
    domains = [DomainSpec.from_dict(d) for d in manifest["domains"]]
    return make_stream(StreamConfig.from_dict(manifest["stream"]), task, domains)


def cache_source_stats(encoder, task: TaskSpec, n: int = 300, seed: int = 0) -> SourceStats:
    """Population mean/std of promptless features over n fresh clean ID samples."""
    if n < 2:
        raise ValueError(f"source statistics need n >= 2 samples, got {n}")
    rng = seeding.substream(seed, seeding.SOURCE_STATS)
    tokens, _ = task.sample_id(n, rng)
    stats = SourceStats.from_features(encoder.features(tokens))
    logger.info(f"Cached source statistics from {n} samples")
    return stats
