"""
End-to-end checks on the default synthetic benchmark. Each needs a full pretraining
and tens of runs, so they are deselected unless `-m slow` is given.
"""

import json
from dataclasses import replace

import numpy as np
import pytest

from app.adaptation import DocoAdapter, SourceOnlyAdapter, run_stream
from app.experiment import ExperimentConfig, cmd_pretrain, execute_run, load_artifacts
from app.ood_metrics import OodScore, paired_comparison, summarize_run
from app.stream_synth import StreamConfig, default_domains, make_stream

pytestmark = pytest.mark.slow

SEEDS = list(range(10))


@pytest.fixture(scope="module")
def default_exp(tmp_path_factory) -> ExperimentConfig:
    return ExperimentConfig(output_dir=str(tmp_path_factory.mktemp("acceptance")))


@pytest.fixture(scope="module")
def artifacts(default_exp):
    cmd_pretrain(default_exp)
    return load_artifacts(default_exp)


@pytest.fixture(scope="module")
def doco_runs(default_exp, artifacts):
    return {seed: execute_run(default_exp, seed, artifacts) for seed in SEEDS}


@pytest.fixture(scope="module")
def source_runs(default_exp, artifacts):
    exp = replace(default_exp, method="source-only")
    return {seed: execute_run(exp, seed, artifacts) for seed in SEEDS}


def h_scores(runs):
    return np.array([runs[seed].row.h_score for seed in SEEDS])


def test_pretraining_reaches_floor(default_exp, artifacts):
    log = json.loads((default_exp.model_path / "pretrain_log.json").read_text())
    assert log["holdout_accuracy"] >= 0.9


def test_doco_beats_source_only(doco_runs, source_runs):
    doco, source = h_scores(doco_runs), h_scores(source_runs)
    assert doco.mean() - source.mean() >= 0.05
    assert paired_comparison(doco, source).p_value < 0.05


@pytest.mark.parametrize("ablation", ["no-R", "no-S-O-R"])
def test_full_method_beats_ablation(default_exp, artifacts, doco_runs, ablation):
    exp = replace(default_exp, adapter=default_exp.adapter.with_ablation(ablation))
    ablated = np.array([execute_run(exp, seed, artifacts).row.h_score for seed in SEEDS])
    full = h_scores(doco_runs)
    assert full.mean() >= ablated.mean()
    comparison = paired_comparison(full, ablated)
    assert comparison.p_value is None or comparison.p_value < 0.05


def test_carried_prompt_lowers_first_batch_stat_loss(doco_runs):
    transitions = [entry for seed in SEEDS for entry in doco_runs[seed].record.domain_stat_losses[1:]]
    assert len(transitions) >= 3 * len(SEEDS)
    assert np.mean([entry.prompt_wins for entry in transitions]) >= 0.7


def test_prompted_split_is_at_least_as_pure(doco_runs, source_runs):
    def mean_precision(runs):
        return np.nanmean([b.split_precision for seed in SEEDS for b in runs[seed].record.batches])

    assert mean_precision(doco_runs) >= mean_precision(source_runs)


def test_kappa_robustness(default_exp, artifacts):
    seeds = SEEDS[:5]

    def mean_h(method, kappa):
        exp = replace(default_exp.with_stream(kappa=kappa), method=method)
        return np.mean([execute_run(exp, seed, artifacts).row.h_score for seed in seeds])

    kappas = [0.1, 0.3, 0.5]
    doco = np.array([mean_h("doco", k) for k in kappas])
    source = np.array([mean_h("source-only", k) for k in kappas])
    assert doco.std() <= source.std() or doco.min() > source.max()


def test_score_choice_barely_matters(doco_runs):
    record = doco_runs[0].record
    values = [summarize_run(record, score).h_score for score in OodScore]
    assert max(values) - min(values) <= 0.05


def test_runs_are_deterministic(default_exp, artifacts, doco_runs):
    again = execute_run(default_exp, 0, artifacts)
    assert again.row.to_cells() == doco_runs[0].row.to_cells()


@pytest.mark.parametrize("kind", ["additive-bias", "gain"])
def test_source_accuracy_falls_with_severity(default_exp, artifacts, kind):
    severities = [0.0, 1.0, 3.0, 5.0]

    def mean_acc(severity):
        accs = []
        for seed in SEEDS:
            config = StreamConfig(kappa=0.0, batch_size=64, batches_per_domain=2, severity=severity, seed=seed)
            domains = default_domains(default_exp.task, severity, seed, kinds=[kind])
            record = run_stream(SourceOnlyAdapter(artifacts.encoder, artifacts.source_stats),
                                make_stream(config, default_exp.task, domains))
            accs.append(summarize_run(record).acc)
        return np.mean(accs)

    accs = [mean_acc(s) for s in severities]
    inversions = sum(later > earlier for earlier, later in zip(accs, accs[1:]))
    assert inversions <= 1


def test_pure_source_first_batch_is_mostly_id(default_exp, artifacts):
    fractions = []
    for seed in SEEDS:
        config = StreamConfig(kappa=0.0, batch_size=64, batches_per_domain=1, severity=0.0, seed=seed)
        domains = default_domains(default_exp.task, 0.0, seed, kinds=["additive-bias"])
        batch = make_stream(config, default_exp.task, domains)[0]
        adapter = DocoAdapter(artifacts.encoder, artifacts.source_stats, default_exp.adapter, seed)
        outcome = adapter.init_first_batch(batch.tokens)
        fractions.append(outcome.split.id_indices.size / batch.size)
    assert np.mean(fractions) >= 0.9
