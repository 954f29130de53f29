import dataclasses

import numpy as np
import pytest

from app.doco_objective import stat_loss
from app.stream_synth import (OOD_LABEL, CorruptionError, DomainSpec, ShiftKind, StreamConfig, TaskError,
                              TaskSpec, UnlabeledBatch, apply_corruption, build_manifest, cache_source_stats,
                              default_domains, format_order, make_stream, parse_order, random_orders,
                              stream_from_manifest)


def test_task_class_seeds_disjoint(small_task):
    assert not set(small_task.id_seeds) & set(small_task.ood_seeds)
    assert len(small_task.class_seeds) == 6


def test_task_rejects_overlapping_seeds():
    with pytest.raises(TaskError):
        TaskSpec(n_id_classes=2, n_ood_classes=1, class_seeds=[1, 2, 2])


def test_task_rejects_inseparable_patterns():
    task = TaskSpec(n_id_classes=4, n_ood_classes=0, n_patches=2, d_in=2, noise_std=10.0, calibration_floor=0.99)
    with pytest.raises(TaskError):
        task.check_separability()


def test_task_separability(small_task):
    assert small_task.check_separability() >= small_task.calibration_floor


def test_task_dict_round_trip(small_task):
    assert TaskSpec.from_dict(small_task.to_dict()) == small_task


def test_severity_zero_is_identity(small_task):
    tokens = np.random.default_rng(0).standard_normal((3,) + small_task.token_grid)
    for kind in ShiftKind:
        domain = DomainSpec.build(0, kind, 0.0, 11, small_task.n_patches, small_task.d_in)
        np.testing.assert_array_equal(apply_corruption(tokens, domain), tokens)


def test_token_dropout_zeroes_fixed_tokens(small_task):
    domain = DomainSpec.build(0, "token-dropout-mask", 5.0, 3, small_task.n_patches, small_task.d_in)
    tokens = np.ones((2,) + small_task.token_grid)
    out = apply_corruption(tokens, domain)
    dropped = domain.ground_truth_delta["keep"] == 0
    assert dropped.sum() == round(small_task.n_patches * 0.75)
    assert np.all(out[:, dropped] == 0)
    assert np.all(out[:, ~dropped] == 1)


def test_additive_bias_and_gain(small_task):
    tokens = np.random.default_rng(1).standard_normal((2,) + small_task.token_grid)
    bias = DomainSpec.build(0, "additive-bias", 2.0, 5, small_task.n_patches, small_task.d_in)
    np.testing.assert_allclose(apply_corruption(tokens, bias) - tokens,
                               np.broadcast_to(bias.ground_truth_delta["bias"], tokens.shape))
    gain = DomainSpec.build(1, "gain", 2.0, 5, small_task.n_patches, small_task.d_in)
    assert np.all(gain.ground_truth_delta["gain"] > 0)


def test_blur_mix_preserves_constant_tokens(small_task):
    domain = DomainSpec.build(0, "blur-mix", 3.0, 1, small_task.n_patches, small_task.d_in)
    tokens = np.full((1,) + small_task.token_grid, 2.5)
    np.testing.assert_allclose(apply_corruption(tokens, domain), tokens)


def test_unknown_shift_kind_and_negative_severity():
    with pytest.raises(CorruptionError):
        ShiftKind.parse("fog")
    with pytest.raises(CorruptionError):
        DomainSpec(0, "gain", -1.0, 0)


def test_domain_dict_round_trip(small_task):
    domain = DomainSpec.build(2, "gain", 3.0, 9, small_task.n_patches, small_task.d_in)
    assert DomainSpec.from_dict(domain.to_dict()).fingerprint() == domain.fingerprint()


def test_stream_shape_and_kappa_zero(small_task):
    config = StreamConfig(kappa=0.0, batch_size=10, batches_per_domain=2, seed=3)
    batches = make_stream(config, small_task, default_domains(small_task, 3.0, 3))
    assert len(batches) == 8
    assert all(b.size == 10 for b in batches)
    assert all(np.all(b.labels != OOD_LABEL) for b in batches)
    assert [b.batch_index for b in batches] == list(range(8))
    assert [b.domain_index for b in batches] == [0, 0, 1, 1, 2, 2, 3, 3]


def test_stream_ood_fraction(small_task):
    config = StreamConfig(kappa=0.3, batch_size=200, batches_per_domain=5, seed=1)
    batches = make_stream(config, small_task, default_domains(small_task, 1.0, 1))
    labels = np.concatenate([b.labels for b in batches])
    assert abs(np.mean(labels == OOD_LABEL) - 0.3) < 0.03


def test_domain_order(small_task):
    domains = default_domains(small_task, 3.0, 0)
    config = StreamConfig(batch_size=4, batches_per_domain=1, domain_order=[2, 0, 3, 1], seed=0)
    assert [b.domain_index for b in make_stream(config, small_task, domains)] == [2, 0, 3, 1]


def test_stream_is_deterministic(small_task, small_stream_config):
    domains = default_domains(small_task, 3.0, 0)
    a = make_stream(small_stream_config, small_task, domains)
    b = make_stream(small_stream_config, small_task, domains)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.tokens, y.tokens)
        np.testing.assert_array_equal(x.labels, y.labels)


def test_manifest_regenerates_stream(small_task, small_stream_config):
    domains = default_domains(small_task, 3.0, 0)
    batches = make_stream(small_stream_config, small_task, domains)
    manifest = build_manifest(small_stream_config, small_task, domains)
    assert len(manifest["sha256"]) == 64
    for x, y in zip(batches, stream_from_manifest(manifest)):
        np.testing.assert_array_equal(x.tokens, y.tokens)
    other = build_manifest(dataclasses.replace(small_stream_config, seed=1), small_task, domains)
    assert other["sha256"] != manifest["sha256"]


def test_unlabeled_view_has_no_labels(small_task, small_stream_config):
    batch = make_stream(small_stream_config, small_task, default_domains(small_task, 3.0, 0))[0]
    visible = batch.unlabeled()
    assert isinstance(visible, UnlabeledBatch)
    assert {f.name for f in dataclasses.fields(visible)} == {"tokens", "position"}


def test_stream_config_validation():
    with pytest.raises(ValueError):
        StreamConfig(kappa=1.0)
    with pytest.raises(ValueError):
        StreamConfig(domain_order=[0, 0, 1])


def test_random_orders():
    orders = random_orders(4, 6, seed=0)
    assert orders[0] == [0, 1, 2, 3]
    assert len({tuple(o) for o in orders}) == 6
    assert random_orders(2, 10, seed=0) == [[0, 1], [1, 0]]


def test_order_text_round_trip():
    assert parse_order(format_order([2, 0, 1])) == [2, 0, 1]
    assert parse_order("3,1,0,2") == [3, 1, 0, 2]
    with pytest.raises(ValueError):
        parse_order("0,2")


def test_ood_fraction_concentrates_at_kappa(small_task):
    config = StreamConfig(kappa=0.5, batch_size=64, batches_per_domain=250, seed=0)
    batches = make_stream(config, small_task, default_domains(small_task, 3.0, 0))
    assert len(batches) == 1000
    labels = np.concatenate([b.labels for b in batches])
    assert abs(np.mean(labels == OOD_LABEL) - 0.5) <= 0.02


def test_source_stats_same_seed_identical(encoder, small_task):
    a = cache_source_stats(encoder, small_task, n=64, seed=3)
    b = cache_source_stats(encoder, small_task, n=64, seed=3)
    np.testing.assert_array_equal(a.mu_s, b.mu_s)
    np.testing.assert_array_equal(a.sigma_s, b.sigma_s)


def test_source_stats_concentrate_with_more_samples(encoder, small_task):
    reference = cache_source_stats(encoder, small_task, n=3000, seed=1)

    def distance(stats):
        return np.linalg.norm(stats.mu_s - reference.mu_s) + np.linalg.norm(stats.sigma_s - reference.sigma_s)

    few = cache_source_stats(encoder, small_task, n=50, seed=0)
    many = cache_source_stats(encoder, small_task, n=3000, seed=0)
    assert distance(many) < distance(few)


def test_severity_zero_features_match_source_stats(encoder, source_stats, small_task):
    config = StreamConfig(kappa=0.0, batch_size=64, batches_per_domain=1, seed=2)

    def raw_stat_loss(severity):
        domains = default_domains(small_task, severity, 2, kinds=["additive-bias"])
        batch = make_stream(config, small_task, domains)[0]
        return float(stat_loss(encoder.features(batch.tokens), source_stats).data)

    clean = raw_stat_loss(0.0)
    assert clean < raw_stat_loss(5.0)
    assert clean < 0.5 * np.linalg.norm(source_stats.sigma_s)
