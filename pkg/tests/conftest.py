import numpy as np
import pytest

from fastinject.encoders import EncoderConfig, ModelConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_model_config(vocab_size=6, num_phones=8, feature_dim=5,
                      acoustic_downsample=2, text_downsample=2):
    return ModelConfig(
        vocab_size=vocab_size, num_phones=num_phones, feature_dim=feature_dim,
        acoustic=EncoderConfig(num_layers=2, model_dim=16, ffn_dim=32, num_heads=2,
                               downsample_factor=acoustic_downsample),
        text=EncoderConfig(num_layers=1, model_dim=16, ffn_dim=32, num_heads=2,
                           downsample_factor=text_downsample))


@pytest.fixture
def tiny_model(rng):
    cfg = tiny_model_config()
    return cfg, init_params(cfg, rng)
