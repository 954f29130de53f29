"""
Adaptation - The online DOCO loop and the frozen source-only comparator.

Per batch t >= 2: split on prompted features, predict likely-ID samples with p_t, take a
single AdamW step on the DOCO loss over the likely-ID subset, then predict likely-OOD
samples with p_{t+1}. The first batch is split on raw features and refines the prompt
for `init_iters` iterations on that fixed ID subset.
"""

import io
import logging
import math
from dataclasses import dataclass, field, asdict, fields
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from app import seeding
from app.autodiff import Tape, Tensor, NonFiniteError
from app.doco_objective import DEFAULT_BETA, LossBreakdown, SourceStats, doco_loss, stat_loss
from app.encoder import Encoder, PromptState, init_prompt
from app.ood_metrics import closed_set_accuracy
from app.optimizer import OptimizerState, adamw_step
from app.splitter import (BUFFER_CAPACITY, SMALL_BATCH_MAX, ScoreBuffer, SplitResult,
                          proto_distance, split_batch, split_precision_recall)
from app.stream_synth import StreamBatch

logger = logging.getLogger(__name__)

TSV_COLUMNS = ("batch_index", "domain_index", "n_id_assigned", "n_ood_assigned",
               "split_precision", "split_recall", "loss_stat", "loss_reg", "acc_batch")

# ablation name -> (use_split, use_propagate, use_reg)
ABLATIONS: Dict[str, Tuple[bool, bool, bool]] = {
    "full": (True, True, True),
    "no-R": (True, True, False),
    "no-S": (False, True, True),
    "no-O": (True, False, True),
    "no-S-O": (False, False, True),
    "no-S-O-R": (False, False, False),
}


@dataclass
class AdapterConfig:
    use_split: bool = True
    use_propagate: bool = True
    use_reg: bool = True
    beta: float = DEFAULT_BETA
    init_iters: int = 50
    small_batch_buffer: bool = True
    prompt_length: int = 8
    lr: float = 0.1
    weight_decay: float = 0.01
    buffer_capacity: int = BUFFER_CAPACITY
    small_batch_max: int = SMALL_BATCH_MAX

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.init_iters < 0 or self.prompt_length < 0:
            raise ValueError("init_iters and prompt_length must be >= 0")

    @property
    def effective_beta(self) -> float:
        return self.beta if self.use_reg else 0.0

    @property
    def ablation(self) -> str:
        missing = [tag for tag, on in zip("SOR", (self.use_split, self.use_propagate, self.use_reg)) if not on]
        return "no-" + "-".join(missing) if missing else "full"

    def with_ablation(self, name: str) -> "AdapterConfig":
        if name not in ABLATIONS:
            raise ValueError(f"Unknown ablation '{name}'. Options: {list(ABLATIONS)}")
        use_split, use_propagate, use_reg = ABLATIONS[name]
        data = self.to_dict()
        data.update(use_split=use_split, use_propagate=use_propagate, use_reg=use_reg)
        return AdapterConfig(**data)

    @classmethod
    def from_dict(cls, data: Optional[Dict]) -> "AdapterConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in (data or {}).items() if k in names})

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class AdapterState:
    prompt: PromptState
    optimizer: OptimizerState
    source_stats: SourceStats
    config: AdapterConfig
    buffer: Optional[ScoreBuffer] = None
    step_count: int = 0
    batches_seen: int = 0
    steps_attempted: int = 0
    skipped: int = 0


@dataclass
class BatchOutcome:
    """What an adapter returns for one batch; labels never appear here."""
    predictions: np.ndarray
    logits: np.ndarray
    split: SplitResult
    loss: Optional[LossBreakdown] = None
    rejected: bool = False


class Adapter:
    """Common surface of the methods run over a stream."""

    name = "adapter"

    def __init__(self, encoder: Encoder, source_stats: SourceStats):
        self.encoder = encoder
        self.source_stats = source_stats

    @property
    def current_prompt(self) -> Optional[PromptState]:
        return None

    @property
    def steps_attempted(self) -> int:
        return 0

    @property
    def steps_rejected(self) -> int:
        return 0

    def process(self, tokens: np.ndarray) -> BatchOutcome:
        raise NotImplementedError


class SourceOnlyAdapter(Adapter):
    """Frozen model; the split is still computed on raw features for comparison."""

    name = "source-only"

    def __init__(self, encoder: Encoder, source_stats: SourceStats, config: Optional[AdapterConfig] = None):
        super().__init__(encoder, source_stats)
        self.config = config or AdapterConfig()
        self.buffer = ScoreBuffer(self.config.buffer_capacity) if self.config.small_batch_buffer else None

    def process(self, tokens: np.ndarray) -> BatchOutcome:
        raw = self.encoder.features(tokens)
        split = split_batch(raw, self.encoder.weights.prototypes, self.buffer, self.config.small_batch_max)
        logits = self.encoder.logits(raw)
        stat = float(stat_loss(raw, self.source_stats).data)
        return BatchOutcome(logits.argmax(axis=1), logits, split,
                            LossBreakdown(stat=stat, reg=0.0, total=stat, beta=0.0))


class DocoAdapter(Adapter):
    """Prompt-tuning adapter; the encoder and head stay frozen, only the prompt moves."""

    name = "doco"

    def __init__(self, encoder: Encoder, source_stats: SourceStats,
                 config: Optional[AdapterConfig] = None, seed: int = 0):
        super().__init__(encoder, source_stats)
        config = config or AdapterConfig()
        rng = seeding.substream(seed, seeding.PROMPT_INIT)
        prompt = init_prompt(config.prompt_length, encoder.config.d_model, rng)
        self.state = AdapterState(
            prompt=prompt,
            optimizer=OptimizerState.zeros_like(prompt.tokens, lr=config.lr, weight_decay=config.weight_decay),
            source_stats=source_stats,
            config=config,
            buffer=ScoreBuffer(config.buffer_capacity) if config.small_batch_buffer else None,
        )

    @property
    def config(self) -> AdapterConfig:
        return self.state.config

    @property
    def current_prompt(self) -> PromptState:
        """Snapshot of the prompt the next batch will be read with."""
        return self.state.prompt.copy()

    @property
    def steps_attempted(self) -> int:
        return self.state.steps_attempted

    @property
    def steps_rejected(self) -> int:
        return self.state.optimizer.rejected

    def process(self, tokens: np.ndarray) -> BatchOutcome:
        if self.state.batches_seen == 0:
            outcome = self.init_first_batch(tokens)
        else:
            outcome = self.step_batch(tokens)
        self.state.batches_seen += 1
        return outcome

    def _split(self, features: np.ndarray) -> SplitResult:
        prototypes = self.encoder.weights.prototypes
        if not self.config.use_split:
            return SplitResult.whole_batch(proto_distance(features, prototypes))
        return split_batch(features, prototypes, self.state.buffer, self.config.small_batch_max)

    def _update(self, id_tokens: np.ndarray, raw_id: np.ndarray) -> Tuple[Optional[LossBreakdown], bool]:
        """One optimizer step on the DOCO loss of the ID subset; rolled back on non-finite values."""
        state = self.state
        state.steps_attempted += 1
        prompt_t = Tensor(state.prompt.tokens, requires_grad=True)
        try:
            with Tape() as tape:
                prompted = self.encoder.forward_features(id_tokens, prompt_t)
                total, breakdown = doco_loss(prompted, raw_id, state.source_stats, self.config.effective_beta)
            if not math.isfinite(breakdown.total):
                raise NonFiniteError(f"loss is {breakdown.total}")
            tape.backward(total)
        except NonFiniteError as e:
            state.optimizer.rejected += 1
            logger.warning(f"Adaptation step rejected: {e} (rejections so far: {state.optimizer.rejected})")
            return None, False

        grads = prompt_t.grad if prompt_t.grad is not None else np.zeros_like(prompt_t.data)
        new_tokens, accepted = adamw_step(state.optimizer, state.prompt.tokens, grads)
        if accepted:
            state.prompt = PromptState(new_tokens)
        return breakdown, accepted

    def init_first_batch(self, tokens: np.ndarray) -> BatchOutcome:
        """Split on raw features, predict ID raw, refine the prompt, predict OOD with p_2."""
        encoder = self.encoder
        raw = encoder.features(tokens)
        split = self._split(raw)
        logits = encoder.logits(raw)

        first_loss, rejected = None, False
        if split.id_indices.size == 0:
            self.state.skipped += 1
            logger.info("First batch has no likely-ID samples; prompt refinement skipped")
            return BatchOutcome(logits.argmax(axis=1), logits, split)

        id_tokens, raw_id = tokens[split.id_indices], raw[split.id_indices]
        for _ in range(self.config.init_iters):
            breakdown, accepted = self._update(id_tokens, raw_id)
            rejected = rejected or not accepted
            if first_loss is None:
                first_loss = breakdown

        if split.ood_indices.size and self.config.use_propagate:
            ood_features = encoder.features(tokens[split.ood_indices], self.state.prompt)
            logits[split.ood_indices] = encoder.logits(ood_features)
        logger.debug(f"First batch: {split.id_indices.size} ID, {split.ood_indices.size} OOD, "
                     f"{self.config.init_iters} refinement iterations")
        return BatchOutcome(logits.argmax(axis=1), logits, split, first_loss, rejected)

    def step_batch(self, tokens: np.ndarray) -> BatchOutcome:
        encoder, state = self.encoder, self.state
        prompt_t = state.prompt
        prompted = encoder.features(tokens, prompt_t)
        split = self._split(prompted)
        logits = encoder.logits(prompted)
        state.step_count += 1

        breakdown, rejected = None, False
        if split.id_indices.size == 0:
            state.skipped += 1
            logger.info(f"Batch {state.batches_seen}: no likely-ID samples, adaptation skipped")
        else:
            id_tokens = tokens[split.id_indices]
            breakdown, accepted = self._update(id_tokens, encoder.features(id_tokens))
            rejected = not accepted

        if split.ood_indices.size and self.config.use_propagate and state.prompt is not prompt_t:
            ood_features = encoder.features(tokens[split.ood_indices], state.prompt)
            logits[split.ood_indices] = encoder.logits(ood_features)
        return BatchOutcome(logits.argmax(axis=1), logits, split, breakdown, rejected)


@dataclass
class BatchRecord:
    batch_index: int
    domain_index: int
    n_id_assigned: int
    n_ood_assigned: int
    split_precision: float
    split_recall: float
    loss_stat: float
    loss_reg: float
    acc_batch: float

    def to_row(self) -> List[str]:
        return [format_cell(getattr(self, name)) for name in TSV_COLUMNS]


@dataclass
class DomainStatLoss:
    """Pre-update L_stat on the first batch of a domain, with and without the carried prompt."""
    domain_index: int
    batch_index: int
    loss_stat_prompt: float
    loss_stat_raw: float

    @property
    def prompt_wins(self) -> bool:
        return self.loss_stat_prompt < self.loss_stat_raw


@dataclass
class RunRecord:
    method: str
    batches: List[BatchRecord] = field(default_factory=list)
    logits: List[np.ndarray] = field(default_factory=list)
    labels: List[np.ndarray] = field(default_factory=list)
    domain_stat_losses: List[DomainStatLoss] = field(default_factory=list)
    steps_attempted: int = 0
    steps_rejected: int = 0

    @property
    def n_batches(self) -> int:
        return len(self.batches)

    @property
    def rejection_rate(self) -> float:
        return self.steps_rejected / self.steps_attempted if self.steps_attempted else 0.0

    def to_tsv(self) -> str:
        out = io.StringIO()
        out.write("\t".join(TSV_COLUMNS) + "\n")
        for record in self.batches:
            out.write("\t".join(record.to_row()) + "\n")
        return out.getvalue()

    def write_tsv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.to_tsv())


def format_cell(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None or math.isnan(value):
        return "nan"
    return f"{value:.10g}"


def _nan_if_none(value: Optional[float]) -> float:
    return float("nan") if value is None else float(value)


def run_stream(adapter: Adapter, stream: Iterable[StreamBatch]) -> RunRecord:
    """
    One in-order pass over the stream.

    The adapter only ever receives the unlabeled view of each batch; hidden labels are
    used afterwards, here, for split purity and per-batch accuracy.

    Raises:
        ValueError: If the stream is empty
    """
    record = RunRecord(method=adapter.name)
    encoder, src = adapter.encoder, adapter.source_stats
    current_domain = None

    for batch in stream:
        visible = batch.unlabeled()
        if batch.domain_index != current_domain:
            current_domain = batch.domain_index
            prompt = adapter.current_prompt
            record.domain_stat_losses.append(DomainStatLoss(
                domain_index=batch.domain_index,
                batch_index=batch.batch_index,
                loss_stat_prompt=float(stat_loss(encoder.features(visible.tokens, prompt), src).data),
                loss_stat_raw=float(stat_loss(encoder.features(visible.tokens), src).data),
            ))

        outcome = adapter.process(visible.tokens)

        precision, recall = split_precision_recall(outcome.split, batch.is_id)
        loss = outcome.loss
        record.batches.append(BatchRecord(
            batch_index=batch.batch_index,
            domain_index=batch.domain_index,
            n_id_assigned=int(outcome.split.id_indices.size),
            n_ood_assigned=int(outcome.split.ood_indices.size),
            split_precision=precision,
            split_recall=recall,
            loss_stat=loss.stat if loss else float("nan"),
            loss_reg=loss.reg if loss else float("nan"),
            acc_batch=_nan_if_none(closed_set_accuracy(outcome.predictions, batch.labels)),
        ))
        record.logits.append(outcome.logits)
        record.labels.append(batch.labels.copy())

    if not record.batches:
        raise ValueError("run_stream needs a nonempty stream")
    record.steps_attempted = adapter.steps_attempted
    record.steps_rejected = adapter.steps_rejected
    logger.info(f"{adapter.name}: processed {record.n_batches} batches, "
                f"{record.steps_attempted} steps ({record.steps_rejected} rejected)")
    return record
