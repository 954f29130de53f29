"""
Experiment - pretraining, single runs, sweeps and row verification.

Layout under the output root:
    model/                      encoder.ckpt, source_stats.json, task.json, pretrain_log.json
    runs/<hash>-s<seed>/        config.json, manifest.json, run_record.tsv, summary.json
    results.tsv                 one row per (config_hash, seed)
    sweep_<axis>.tsv            per-value mean/std and paired comparison
"""

import hashlib
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app import seeding
from app.adaptation import (Adapter, AdapterConfig, DocoAdapter, RunRecord, SourceOnlyAdapter,
                            format_cell, run_stream)
from app.config_manager import ConfigManager
from app.doco_objective import SourceStats
from app.encoder import Encoder, EncoderConfig, EncoderWeights
from app.ood_metrics import MetricSummary, OodScore, paired_comparison, summarize_run
from app.pretrainer import PretrainConfig, pretrain_source
from app.stream_synth import (DEFAULT_KINDS, StreamConfig, TaskSpec, build_manifest, cache_source_stats,
                              default_domains, format_order, make_stream, random_orders, write_manifest)

logger = logging.getLogger(__name__)

METHODS = ("doco", "source-only")
SWEEP_AXES = ("kappa", "severity", "order", "score", "ablation", "method", "beta", "prompt_length",
              "batch_size", "n_source")
RESULT_COLUMNS = ("config_hash", "method", "ablation", "kappa", "severity", "domain_order",
                  "ood_score", "seed", "acc", "auc", "h_score", "stream_sha256")
SWEEP_COLUMNS = ("axis", "value", "n", "acc_mean", "acc_std", "auc_mean", "auc_std",
                 "h_mean", "h_std", "h_diff_vs_first", "p_value")

CHECKPOINT_FILE = "encoder.ckpt"
STATS_FILE = "source_stats.json"
TASK_FILE = "task.json"
PRETRAIN_LOG_FILE = "pretrain_log.json"
RESULTS_FILE = "results.tsv"

DEFAULT_SWEEP = {
    "kappa": [0.1, 0.3, 0.5],
    "severity": [1.0, 3.0, 5.0],
    "order": 6,
    "score": [s.value for s in OodScore],
    "ablation": ["full", "no-R", "no-S-O", "no-S-O-R"],
    "method": ["source-only", "doco"],
    "beta": [0.0, 0.25, 0.5, 1.0],
    "prompt_length": [1, 4, 8, 16],
    "batch_size": [8, 16, 64],
    "n_source": [50, 300, 3000],
}


class MissingArtifactError(Exception):
    """A checkpoint, statistics file or run directory the command needs is absent."""
    pass


class AdaptationStormError(Exception):
    """Too many adaptation steps were rejected for non-finite values."""
    pass


@dataclass
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    method: str = "doco"
    ood_score: str = "energy"
    seeds: List[int] = field(default_factory=lambda: [0])
    aggregation: str = "cell"
    exclude_first_batch: bool = False
    pretrain_seed: int = 0
    n_source_stats: int = 300
    workers: int = 2
    storm_threshold: float = 0.5
    sweep: Dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_SWEEP))
    output_dir: str = "output"
    model_dir: str = "model"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"Unknown method '{self.method}'. Options: {list(METHODS)}")
        self.ood_score = OodScore.parse(self.ood_score).value
        if self.aggregation not in ("cell", "pooled"):
            raise ValueError(f"aggregation must be 'cell' or 'pooled', got '{self.aggregation}'")
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ValueError("at least one seed is required")

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    @property
    def model_path(self) -> Path:
        return self.output_path / self.model_dir

    @property
    def ablation(self) -> str:
        return self.adapter.ablation if self.method == "doco" else "none"

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        exp = dict(data.get("experiment", {}))
        paths = data.get("paths", {})
        sweep = dict(DEFAULT_SWEEP)
        sweep.update(exp.pop("sweep", {}) or {})
        known = {k: v for k, v in exp.items()
                 if k in ("method", "ood_score", "seeds", "aggregation", "exclude_first_batch",
                          "pretrain_seed", "n_source_stats", "workers", "storm_threshold")}
        return cls(
            task=TaskSpec.from_dict(data.get("task")),
            encoder=EncoderConfig.from_dict(data.get("encoder") or {}),
            stream=StreamConfig.from_dict(data.get("stream")),
            adapter=AdapterConfig.from_dict(data.get("adapter")),
            pretrain=PretrainConfig.from_dict(data.get("pretrain")),
            sweep=sweep,
            output_dir=paths.get("output_dir", "output"),
            model_dir=paths.get("model_dir", "model"),
            **known,
        )

    @classmethod
    def from_config(cls, config: ConfigManager) -> "ExperimentConfig":
        """Build from the section accessors of a loaded configuration file."""
        return cls.from_dict({
            "task": config.task_settings,
            "encoder": config.encoder_settings,
            "stream": config.stream_settings,
            "adapter": config.adapter_settings,
            "pretrain": config.pretrain_settings,
            "experiment": config.experiment_settings,
            "paths": {**config.paths, "output_dir": config.output_root},
        })

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task": self.task.to_dict(),
            "encoder": self.encoder.to_dict(),
            "stream": self.stream.to_dict(),
            "adapter": self.adapter.to_dict(),
            "pretrain": asdict(self.pretrain),
            "experiment": {
                "method": self.method,
                "ood_score": self.ood_score,
                "seeds": list(self.seeds),
                "aggregation": self.aggregation,
                "exclude_first_batch": self.exclude_first_batch,
                "pretrain_seed": self.pretrain_seed,
                "n_source_stats": self.n_source_stats,
                "workers": self.workers,
                "storm_threshold": self.storm_threshold,
                "sweep": self.sweep,
            },
            "paths": {"output_dir": self.output_dir, "model_dir": self.model_dir},
        }

    def config_hash(self) -> str:
        """Digest of everything that determines a run's numbers, except the seed."""
        stream = self.stream.to_dict()
        stream.pop("seed", None)
        identity = {
            "task": self.task.to_dict(),
            "encoder": self.encoder.to_dict(),
            "stream": stream,
            "adapter": self.adapter.to_dict(),
            "pretrain": asdict(self.pretrain),
            "pretrain_seed": self.pretrain_seed,
            "n_source_stats": self.n_source_stats,
            "method": self.method,
            "ood_score": self.ood_score,
            "aggregation": self.aggregation,
            "exclude_first_batch": self.exclude_first_batch,
        }
        canonical = json.dumps(identity, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def with_stream(self, **changes) -> "ExperimentConfig":
        return replace(self, stream=replace(self.stream, **changes))


@dataclass
class ResultRow:
    config_hash: str
    method: str
    ablation: str
    kappa: float
    severity: float
    domain_order: str
    ood_score: str
    seed: int
    acc: Optional[float]
    auc: Optional[float]
    h_score: Optional[float]
    stream_sha256: str
    wall_time_seconds: float = 0.0

    @property
    def key(self) -> Tuple[str, int]:
        return self.config_hash, self.seed

    def to_cells(self) -> List[str]:
        cells = []
        for name in RESULT_COLUMNS:
            value = getattr(self, name)
            cells.append(value if isinstance(value, str) else format_cell(value))
        return cells

    @classmethod
    def from_cells(cls, cells: Sequence[str]) -> "ResultRow":
        values = dict(zip(RESULT_COLUMNS, cells))

        def optional(name):
            return None if values[name] == "nan" else float(values[name])

        return cls(
            config_hash=values["config_hash"],
            method=values["method"],
            ablation=values["ablation"],
            kappa=float(values["kappa"]),
            severity=float(values["severity"]),
            domain_order=values["domain_order"],
            ood_score=values["ood_score"],
            seed=int(values["seed"]),
            acc=optional("acc"),
            auc=optional("auc"),
            h_score=optional("h_score"),
            stream_sha256=values["stream_sha256"],
        )


class ResultsFile:
    """Append-only TSV keyed by (config_hash, seed); rows already present are never rewritten."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def rows(self) -> List[ResultRow]:
        if not self.path.exists():
            return []
        with open(self.path, "r") as f:
            lines = [line.rstrip("\n") for line in f if line.strip()]
        return [ResultRow.from_cells(line.split("\t")) for line in lines[1:]]

    def completed_keys(self) -> set:
        return {row.key for row in self.rows()}

    def append(self, row: ResultRow):
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            new_file = not self.path.exists()
            with open(self.path, "a", newline="") as f:
                if new_file:
                    f.write("\t".join(RESULT_COLUMNS) + "\n")
                f.write("\t".join(row.to_cells()) + "\n")
                f.flush()


@dataclass
class Artifacts:
    encoder: Encoder
    source_stats: SourceStats

    def stats_for(self, exp: "ExperimentConfig") -> SourceStats:
        """The cached statistics, or fresh ones when the experiment asks for another sample count."""
        if self.source_stats.n_source == exp.n_source_stats:
            return self.source_stats
        logger.info(f"Recomputing source statistics from {exp.n_source_stats} samples")
        return cache_source_stats(self.encoder, exp.task, exp.n_source_stats, exp.pretrain_seed)


@dataclass
class RunResult:
    row: ResultRow
    record: RunRecord
    manifest: Dict[str, Any]
    summary: MetricSummary


def cmd_pretrain(exp: ExperimentConfig) -> Path:
    """Pretrain the source model, cache source statistics and write both to the model dir."""
    model_dir = exp.model_path
    model_dir.mkdir(parents=True, exist_ok=True)

    weights, log = pretrain_source(exp.task, exp.encoder, exp.pretrain, exp.pretrain_seed)
    stats = cache_source_stats(Encoder(weights), exp.task, exp.n_source_stats, exp.pretrain_seed)

    weights.save(model_dir / CHECKPOINT_FILE)
    stats.save(model_dir / STATS_FILE)
    with open(model_dir / TASK_FILE, "w") as f:
        json.dump(exp.task.to_dict(), f, indent=2, sort_keys=True)
    with open(model_dir / PRETRAIN_LOG_FILE, "w") as f:
        json.dump(log.to_dict(), f, indent=2)

    logger.info(f"Saved checkpoint and source statistics to {model_dir} "
                f"(held-out accuracy {log.holdout_accuracy:.3f})")
    return model_dir


def load_artifacts(exp: ExperimentConfig) -> Artifacts:
    """
    Raises:
        MissingArtifactError: If a file is absent or was produced for another task/encoder
    """
    model_dir = exp.model_path
    for name in (CHECKPOINT_FILE, STATS_FILE, TASK_FILE):
        if not (model_dir / name).exists():
            raise MissingArtifactError(f"{model_dir / name} not found; run the 'pretrain' command first")

    weights = EncoderWeights.load(model_dir / CHECKPOINT_FILE)
    if weights.config != exp.encoder:
        raise MissingArtifactError(f"checkpoint in {model_dir} was built for {weights.config}, "
                                   f"not {exp.encoder}")
    with open(model_dir / TASK_FILE, "r") as f:
        trained_task = json.load(f)
    if trained_task != exp.task.to_dict():
        raise MissingArtifactError(f"checkpoint in {model_dir} was pretrained on a different task")
    return Artifacts(Encoder(weights), SourceStats.load(model_dir / STATS_FILE))


def make_adapter(exp: ExperimentConfig, artifacts: Artifacts, seed: int) -> Adapter:
    source_stats = artifacts.stats_for(exp)
    if exp.method == "source-only":
        return SourceOnlyAdapter(artifacts.encoder, source_stats, exp.adapter)
    return DocoAdapter(artifacts.encoder, source_stats, exp.adapter, seed)


def execute_run(exp: ExperimentConfig, seed: int, artifacts: Artifacts) -> RunResult:
    """
    Generate the seed's stream, adapt over it and summarize.

    Raises:
        AdaptationStormError: If more than `storm_threshold` of the steps were rejected
    """
    start = time.time()
    stream_config = replace(exp.stream, seed=seed)
    domains = default_domains(exp.task, stream_config.severity, seed)
    batches = make_stream(stream_config, exp.task, domains)
    manifest = build_manifest(stream_config, exp.task, domains)

    record = run_stream(make_adapter(exp, artifacts, seed), batches)
    if record.steps_attempted and record.rejection_rate > exp.storm_threshold:
        raise AdaptationStormError(
            f"{record.steps_rejected}/{record.steps_attempted} adaptation steps rejected "
            f"(config {exp.config_hash()}, seed {seed}); lower the learning rate or check the source statistics")

    summary = summarize_run(record, exp.ood_score, exp.aggregation, exp.exclude_first_batch)
    order = stream_config.domain_order or list(range(len(domains)))
    row = ResultRow(
        config_hash=exp.config_hash(),
        method=exp.method,
        ablation=exp.ablation,
        kappa=stream_config.kappa,
        severity=stream_config.severity,
        domain_order=format_order(order),
        ood_score=exp.ood_score,
        seed=seed,
        acc=summary.acc,
        auc=summary.auc,
        h_score=summary.h_score,
        stream_sha256=manifest["sha256"],
        wall_time_seconds=time.time() - start,
    )
    return RunResult(row, record, manifest, summary)


def run_dir(exp: ExperimentConfig, seed: int) -> Path:
    return exp.output_path / "runs" / f"{exp.config_hash()}-s{seed}"


def write_run_dir(exp: ExperimentConfig, seed: int, result: RunResult) -> Path:
    path = run_dir(exp, seed)
    path.mkdir(parents=True, exist_ok=True)

    with open(path / "config.json", "w") as f:
        json.dump(replace(exp, seeds=[seed]).to_dict(), f, indent=2, sort_keys=True)
    write_manifest(path / "manifest.json", result.manifest)
    result.record.write_tsv(path / "run_record.tsv")

    record = result.record
    precisions = [b.split_precision for b in record.batches if not np.isnan(b.split_precision)]
    summary = {
        "metrics": result.summary.to_dict(),
        "wall_time_seconds": result.row.wall_time_seconds,
        "steps_attempted": record.steps_attempted,
        "steps_rejected": record.steps_rejected,
        "mean_split_precision": float(np.mean(precisions)) if precisions else None,
        "first_batch_stat_loss": [asdict(p) for p in record.domain_stat_losses],
    }
    with open(path / "summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    return path


def run_jobs(jobs: Sequence[Tuple[ExperimentConfig, int]], artifacts: Artifacts,
             results: ResultsFile, workers: int = 1) -> List[ResultRow]:
    """
    Execute (config, seed) jobs, skipping keys already in the results file.

    Rows are appended as soon as each job is collected. A failing job is logged and the
    rest still run; the first failure is re-raised at the end.
    """
    existing = {row.key: row for row in results.rows()}
    pending: List[Tuple[ExperimentConfig, int]] = []
    seen = set(existing)
    for exp, seed in jobs:
        key = (exp.config_hash(), seed)
        if key not in seen:
            seen.add(key)
            pending.append((exp, seed))
    if len(pending) < len(jobs):
        logger.info(f"Skipping {len(jobs) - len(pending)} runs already present in {results.path} "
                    f"or repeated in this batch")

    first_error: Optional[Exception] = None
    collected: Dict[Tuple[str, int], ResultRow] = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = [(exp, seed, executor.submit(execute_run, exp, seed, artifacts)) for exp, seed in pending]
        # collected in submission order so results.tsv does not depend on scheduling
        for exp, seed, future in futures:
            try:
                result = future.result()
            except Exception as e:
                logger.error(f"Run {exp.config_hash()} seed {seed} failed: {e}")
                first_error = first_error or e
                continue
            write_run_dir(exp, seed, result)
            results.append(result.row)
            collected[result.row.key] = result.row
            logger.info(f"{exp.method}/{exp.ablation} seed {seed}: acc={format_cell(result.row.acc)} "
                        f"auc={format_cell(result.row.auc)} h={format_cell(result.row.h_score)}")

    if first_error is not None:
        raise first_error
    rows = []
    for exp, seed in jobs:
        key = (exp.config_hash(), seed)
        rows.append(collected.get(key) or existing[key])
    return rows


def cmd_run(exp: ExperimentConfig) -> List[ResultRow]:
    artifacts = load_artifacts(exp)
    results = ResultsFile(exp.output_path / RESULTS_FILE)
    rows = run_jobs([(exp, seed) for seed in exp.seeds], artifacts, results, exp.workers)
    logger.info(f"Wrote {len(rows)} result rows to {results.path}")
    return rows


def axis_values(exp: ExperimentConfig, axis: str) -> List[Tuple[str, ExperimentConfig]]:
    """(label, variant) pairs for one sweep axis."""
    values = exp.sweep.get(axis, DEFAULT_SWEEP.get(axis))
    if axis == "kappa":
        return [(format_cell(float(k)), exp.with_stream(kappa=float(k))) for k in values]
    if axis == "severity":
        return [(format_cell(float(s)), exp.with_stream(severity=float(s))) for s in values]
    if axis == "order":
        count = values if isinstance(values, int) else len(values)
        orders = random_orders(len(DEFAULT_KINDS), count, exp.task.seed)
        return [(format_order(o), exp.with_stream(domain_order=o)) for o in orders]
    if axis == "score":
        return [(OodScore.parse(s).value, replace(exp, ood_score=OodScore.parse(s).value)) for s in values]
    if axis == "ablation":
        return [(a, replace(exp, method="doco", adapter=exp.adapter.with_ablation(a))) for a in values]
    if axis == "method":
        return [(m, replace(exp, method=m)) for m in values]
    if axis == "beta":
        return [(format_cell(float(b)), replace(exp, adapter=replace(exp.adapter, beta=float(b)))) for b in values]
    if axis == "prompt_length":
        return [(str(int(n)), replace(exp, adapter=replace(exp.adapter, prompt_length=int(n)))) for n in values]
    if axis == "batch_size":
        return [(str(int(n)), exp.with_stream(batch_size=int(n))) for n in values]
    if axis == "n_source":
        return [(str(int(n)), replace(exp, n_source_stats=int(n))) for n in values]
    raise ValueError(f"Unknown sweep axis '{axis}'. Options: {list(SWEEP_AXES)}")


def _mean_std(values: List[Optional[float]]) -> Tuple[Optional[float], Optional[float]]:
    present = [v for v in values if v is not None]
    if not present:
        return None, None
    return float(np.mean(present)), float(np.std(present, ddof=1)) if len(present) > 1 else 0.0


@dataclass
class SweepLine:
    axis: str
    value: str
    n: int
    acc_mean: Optional[float]
    acc_std: Optional[float]
    auc_mean: Optional[float]
    auc_std: Optional[float]
    h_mean: Optional[float]
    h_std: Optional[float]
    h_diff_vs_first: Optional[float]
    p_value: Optional[float]

    def to_cells(self) -> List[str]:
        return [v if isinstance(v, str) else format_cell(v) for v in (getattr(self, c) for c in SWEEP_COLUMNS)]


def summarize_sweep(axis: str, labelled_rows: List[Tuple[str, List[ResultRow]]]) -> List[SweepLine]:
    """Mean and std per axis value, plus a one-sided paired test of H against the first value."""
    lines = []
    base = {row.seed: row.h_score for row in labelled_rows[0][1]} if labelled_rows else {}
    for label, rows in labelled_rows:
        acc_mean, acc_std = _mean_std([r.acc for r in rows])
        auc_mean, auc_std = _mean_std([r.auc for r in rows])
        h_mean, h_std = _mean_std([r.h_score for r in rows])
        pairs = [(r.h_score, base[r.seed]) for r in rows
                 if r.h_score is not None and base.get(r.seed) is not None]
        diff, p_value = None, None
        if pairs and label != labelled_rows[0][0]:
            comparison = paired_comparison([a for a, _ in pairs], [b for _, b in pairs])
            diff, p_value = comparison.mean_diff, comparison.p_value
        lines.append(SweepLine(axis, label, len(rows), acc_mean, acc_std, auc_mean, auc_std,
                               h_mean, h_std, diff, p_value))
    return lines


def cmd_sweep(exp: ExperimentConfig, axis: str) -> List[SweepLine]:
    if axis not in SWEEP_AXES:
        raise ValueError(f"Unknown sweep axis '{axis}'. Options: {list(SWEEP_AXES)}")
    artifacts = load_artifacts(exp)
    results = ResultsFile(exp.output_path / RESULTS_FILE)
    variants = axis_values(exp, axis)
    logger.info(f"Sweeping {axis} over {len(variants)} values x {len(exp.seeds)} seeds")

    jobs = [(variant, seed) for _, variant in variants for seed in exp.seeds]
    rows = run_jobs(jobs, artifacts, results, exp.workers)

    per_value = len(exp.seeds)
    labelled = [(label, rows[i * per_value:(i + 1) * per_value]) for i, (label, _) in enumerate(variants)]
    lines = summarize_sweep(axis, labelled)

    path = exp.output_path / f"sweep_{axis}.tsv"
    with open(path, "w", newline="") as f:
        f.write("\t".join(SWEEP_COLUMNS) + "\n")
        for line in lines:
            f.write("\t".join(line.to_cells()) + "\n")
    for line in lines:
        logger.info(f"  {axis}={line.value}: H {format_cell(line.h_mean)} ± {format_cell(line.h_std)} "
                    f"(n={line.n}, p vs first={format_cell(line.p_value)})")
    return lines


def cmd_verify(exp: ExperimentConfig, row: Optional[int] = None) -> bool:
    """
    Re-run one results row from its run directory snapshot and compare every column exactly.

    Without `row`, the row is drawn from the verify sub-stream of the first seed.
    """
    results = ResultsFile(exp.output_path / RESULTS_FILE)
    rows = results.rows()
    if not rows:
        raise MissingArtifactError(f"{results.path} has no rows to verify")
    if row is None:
        row = int(seeding.substream(exp.seeds[0], seeding.VERIFY).integers(len(rows)))
    if not 0 <= row < len(rows):
        raise ValueError(f"row {row} out of range (results have {len(rows)} rows)")
    target = rows[row]

    snapshot_path = exp.output_path / "runs" / f"{target.config_hash}-s{target.seed}" / "config.json"
    if not snapshot_path.exists():
        raise MissingArtifactError(f"{snapshot_path} not found")
    with open(snapshot_path, "r") as f:
        snapshot = ExperimentConfig.from_dict(json.load(f))
    snapshot = replace(snapshot, output_dir=exp.output_dir)

    logger.info(f"Verifying row {row}: config {target.config_hash}, seed {target.seed}")
    if snapshot.config_hash() != target.config_hash:
        logger.error(f"Snapshot hashes to {snapshot.config_hash()}, row says {target.config_hash}")
        return False

    rerun = execute_run(snapshot, target.seed, load_artifacts(snapshot)).row
    ok = True
    for name, expected, actual in zip(RESULT_COLUMNS, target.to_cells(), rerun.to_cells()):
        if expected != actual:
            logger.error(f"  {name}: recorded {expected}, re-run gives {actual}")
            ok = False
    logger.info("Verification passed" if ok else "Verification FAILED")
    return ok
