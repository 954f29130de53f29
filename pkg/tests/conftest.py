import numpy as np
import pytest

from app.doco_objective import SourceStats
from app.encoder import Encoder, EncoderConfig, EncoderWeights
from app.pretrainer import PretrainConfig, pretrain_source
from app.stream_synth import StreamConfig, TaskSpec, cache_source_stats

SMALL_TASK = dict(n_id_classes=4, n_ood_classes=2, n_patches=4, d_in=8, noise_std=0.3, seed=0)
SMALL_ENCODER = dict(depth=1, d_model=16, n_heads=2, n_patches=4, d_in=8, mlp_ratio=2, n_classes=4)
# fixed-length pretraining; accuracy floors are checked in the slow tests
SMALL_PRETRAIN = dict(batch_size=32, lr=3e-3, min_iters=60, max_iters=60, eval_every=60,
                      target_accuracy=0.0, n_holdout=64)


@pytest.fixture(scope="session")
def small_task() -> TaskSpec:
    return TaskSpec(**SMALL_TASK)


@pytest.fixture(scope="session")
def small_encoder_config() -> EncoderConfig:
    return EncoderConfig(**SMALL_ENCODER)


@pytest.fixture(scope="session")
def pretrained(small_task, small_encoder_config):
    """(frozen weights, pretraining log) of the small source model."""
    return pretrain_source(small_task, small_encoder_config, PretrainConfig(**SMALL_PRETRAIN), seed=0)


@pytest.fixture(scope="session")
def encoder(pretrained) -> Encoder:
    return Encoder(pretrained[0])


@pytest.fixture(scope="session")
def source_stats(encoder, small_task) -> SourceStats:
    return cache_source_stats(encoder, small_task, n=128, seed=0)


@pytest.fixture
def random_encoder(small_encoder_config) -> Encoder:
    weights = EncoderWeights.initialize(small_encoder_config, np.random.default_rng(7))
    return Encoder(weights.freeze())


@pytest.fixture
def small_stream_config() -> StreamConfig:
    return StreamConfig(kappa=0.5, batch_size=16, batches_per_domain=3, severity=3.0, seed=0)
