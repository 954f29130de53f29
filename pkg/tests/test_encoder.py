import numpy as np
import pytest

from app import autodiff as ad
from app.autodiff import DimensionError, NonFiniteError, Tape, Tensor
from app.encoder import (CHECKPOINT_MAGIC, CheckpointError, Encoder, EncoderConfig, EncoderWeights, PromptState,
                         init_prompt)


def tokens_for(config: EncoderConfig, n: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, config.n_patches, config.d_in))


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(depth=0)


def test_features_shape_and_finiteness(random_encoder, small_encoder_config):
    z = random_encoder.features(tokens_for(small_encoder_config, 5))
    assert z.shape == (5, small_encoder_config.d_model)
    assert np.all(np.isfinite(z))


def test_logits_shape(random_encoder, small_encoder_config):
    z = random_encoder.features(tokens_for(small_encoder_config, 3))
    assert random_encoder.logits(z).shape == (3, small_encoder_config.n_classes)


def test_empty_prompt_equals_no_prompt(random_encoder, small_encoder_config):
    tokens = tokens_for(small_encoder_config, 4)
    empty = PromptState(np.zeros((0, small_encoder_config.d_model)))
    np.testing.assert_array_equal(random_encoder.features(tokens, empty), random_encoder.features(tokens))


def test_prompt_changes_features(random_encoder, small_encoder_config):
    tokens = tokens_for(small_encoder_config, 4)
    prompt = PromptState.xavier(3, small_encoder_config.d_model, np.random.default_rng(1))
    assert not np.allclose(random_encoder.features(tokens, prompt), random_encoder.features(tokens))


def test_samples_are_encoded_independently(random_encoder, small_encoder_config):
    tokens = tokens_for(small_encoder_config, 6)
    prompt = PromptState.xavier(2, small_encoder_config.d_model, np.random.default_rng(1))
    full = random_encoder.features(tokens, prompt)
    np.testing.assert_allclose(random_encoder.features(tokens[[1, 4]], prompt), full[[1, 4]], atol=1e-12)


def test_bad_token_shape(random_encoder):
    with pytest.raises(DimensionError):
        random_encoder.features(np.zeros((2, 3, 3)))


def test_bad_prompt_width(random_encoder, small_encoder_config):
    with pytest.raises(DimensionError):
        random_encoder.features(tokens_for(small_encoder_config, 2), PromptState(np.zeros((2, 3))))


def test_non_finite_tokens_raise(random_encoder, small_encoder_config):
    tokens = tokens_for(small_encoder_config, 2)
    tokens[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        random_encoder.features(tokens)


def test_xavier_bound():
    prompt = init_prompt(8, 32, np.random.default_rng(0))
    bound = np.sqrt(6.0 / (8 + 32))
    assert prompt.tokens.shape == (8, 32)
    assert np.all(np.abs(prompt.tokens) <= bound)


def test_only_prompt_receives_gradient(random_encoder, small_encoder_config):
    prompt = Tensor(PromptState.xavier(2, small_encoder_config.d_model, np.random.default_rng(3)).tokens,
                    requires_grad=True)
    before = random_encoder.weights.checksum()
    with Tape() as tape:
        loss = ad.sum(random_encoder.forward_features(tokens_for(small_encoder_config, 3), prompt))
    tape.backward(loss)
    assert prompt.grad is not None and np.any(prompt.grad != 0)
    assert random_encoder.weights.checksum() == before


def test_prompt_gradient_matches_finite_differences(random_encoder, small_encoder_config):
    tokens = tokens_for(small_encoder_config, 2)
    x = PromptState.xavier(2, small_encoder_config.d_model, np.random.default_rng(4)).tokens
    weights = np.random.default_rng(5).standard_normal(small_encoder_config.d_model)

    def value(p):
        return ad.sum(random_encoder.forward_features(tokens, p) * weights)

    t = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = value(t)
    tape.backward(loss)
    numeric = ad.numerical_gradient(lambda v: float(value(Tensor(v)).data), x)
    assert ad.relative_error(t.grad, numeric) <= 1e-3


def test_frozen_weights_are_read_only(random_encoder):
    with pytest.raises(ValueError):
        random_encoder.weights.tensors["head_w"][0, 0] = 1.0


def test_checkpoint_round_trip(tmp_path, random_encoder):
    path = random_encoder.weights.save(tmp_path / "encoder.ckpt")
    loaded = EncoderWeights.load(path)
    assert loaded.config == random_encoder.config
    assert loaded.frozen
    for name, arr in random_encoder.weights.tensors.items():
        np.testing.assert_array_equal(loaded.tensors[name], arr)
    assert path.read_bytes().startswith(CHECKPOINT_MAGIC.encode())


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOT A CHECKPOINT\n")
    with pytest.raises(CheckpointError):
        EncoderWeights.load(path)


def test_checkpoint_rejects_truncated_payload(tmp_path, random_encoder):
    path = random_encoder.weights.save(tmp_path / "encoder.ckpt")
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        EncoderWeights.load(path)


def test_prototypes_are_head_rows(random_encoder):
    np.testing.assert_array_equal(random_encoder.weights.prototypes, random_encoder.weights.tensors["head_w"])
