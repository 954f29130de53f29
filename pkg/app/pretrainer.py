"""
Source pretraining of the encoder and head by cross-entropy on clean ID samples.
The returned weights are frozen.
"""

import logging
import time
from dataclasses import dataclass, field, asdict, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from app import autodiff as ad
from app import seeding
from app.autodiff import Tape, Tensor
from app.encoder import Encoder, EncoderConfig, EncoderWeights
from app.optimizer import AdamW
from app.stream_synth import TaskSpec

logger = logging.getLogger(__name__)


class PretrainError(Exception):
    """Raised when pretraining cannot reach the accuracy floor."""
    pass


@dataclass
class PretrainConfig:
    batch_size: int = 64
    lr: float = 3e-3
    weight_decay: float = 0.01
    min_iters: int = 200
    max_iters: int = 1500
    eval_every: int = 50
    target_accuracy: float = 0.9
    n_holdout: int = 512

    def __post_init__(self):
        for name in ("batch_size", "max_iters", "eval_every", "n_holdout"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.min_iters < 0:
            raise ValueError(f"min_iters must be >= 0, got {self.min_iters}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")

    @classmethod
    def from_dict(cls, data: Optional[Dict]) -> "PretrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in (data or {}).items() if k in names})


@dataclass
class PretrainLog:
    iterations: int = 0
    holdout_accuracy: float = 0.0
    separability: float = 0.0
    wall_time_seconds: float = 0.0
    history: List[Dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return asdict(self)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.eye(logits.shape[1])[labels]
    picked = ad.sum(logits * onehot, axis=1)
    return ad.mean(ad.logsumexp(logits, axis=1) - picked)


def accuracy(weights: EncoderWeights, tokens: np.ndarray, labels: np.ndarray) -> float:
    encoder = Encoder(weights)
    logits = encoder.logits(encoder.features(tokens))
    return float(np.mean(logits.argmax(axis=1) == labels))


def check_compatible(task: TaskSpec, config: EncoderConfig):
    if config.n_classes != task.n_id_classes:
        raise PretrainError(f"encoder n_classes={config.n_classes} but task has {task.n_id_classes} ID classes")
    if (config.n_patches, config.d_in) != task.token_grid:
        raise PretrainError(f"encoder expects tokens {(config.n_patches, config.d_in)}, task emits {task.token_grid}")


def pretrain_source(task: TaskSpec, enc_config: EncoderConfig,
                    config: Optional[PretrainConfig] = None,
                    seed: int = 0) -> Tuple[EncoderWeights, PretrainLog]:
    """
    Train encoder + head until held-out accuracy reaches the target (after at least
    `min_iters` iterations) or `max_iters` is hit.

    Raises:
        PretrainError: If the held-out accuracy is below the target at the cap
    """
    config = config or PretrainConfig()
    check_compatible(task, enc_config)
    log = PretrainLog(separability=task.check_separability())
    start = time.time()

    rng = seeding.substream(seed, seeding.PRETRAIN)
    patterns = task.patterns()
    holdout_tokens, holdout_labels = task.sample_id(config.n_holdout, seeding.substream(seed, seeding.PRETRAIN, 1), patterns)

    weights = EncoderWeights.initialize(enc_config, rng)
    encoder = Encoder(weights)
    arrays = dict(weights.tensors)
    optimizer = AdamW(lr=config.lr, weight_decay=config.weight_decay)

    logger.info(f"Pretraining source model: {task.n_id_classes} classes, up to {config.max_iters} iterations")
    acc = 0.0
    for it in range(1, config.max_iters + 1):
        tokens, labels = task.sample_id(config.batch_size, rng, patterns)
        params = {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
        with Tape() as tape:
            logits = encoder.forward_logits(encoder.forward_features(tokens, params=params), params=params)
            loss = cross_entropy(logits, labels)
        tape.backward(loss)
        arrays = optimizer.step(arrays, {name: t.grad for name, t in params.items()})

        if it % config.eval_every == 0 or it == config.max_iters:
            acc = accuracy(EncoderWeights(enc_config, arrays), holdout_tokens, holdout_labels)
            log.history.append({"iteration": it, "loss": float(loss.data), "holdout_accuracy": acc})
            logger.info(f"  iter {it}: loss={float(loss.data):.4f} holdout_acc={acc:.3f}")
            if it >= config.min_iters and acc >= config.target_accuracy:
                break

    log.iterations = it
    log.holdout_accuracy = acc
    log.wall_time_seconds = time.time() - start
    if acc < config.target_accuracy:
        raise PretrainError(f"held-out accuracy {acc:.3f} below floor {config.target_accuracy} "
                            f"after {it} iterations; regenerate the task or raise the cap")

    logger.info(f"Pretraining done: accuracy {acc:.3f} after {it} iterations")
    return EncoderWeights(enc_config, arrays).freeze(), log
