import dataclasses

import pytest
import torch

from aunet.config import (ConfigError, ModelConfig, TrainConfig, desk_model_config, dump_config, get_dtype,
                          parse_config_text)


def test_defaults_match_full_scale_recipe():
    m, t = ModelConfig(), TrainConfig()
    assert (m.image_size, m.n_aus, m.encoder_channels, m.encoder_size) == (256, 12, 256, 16)
    assert (t.batch_size, t.base_lr, t.warmup_steps, t.adam_beta1, t.weight_decay, t.lambda_rec) == \
        (10, 1e-5, 1000, 0.9, 1e-6, 0.001)


def test_round_trip_text():
    m, t = desk_model_config(variant="no_mask"), TrainConfig(seed=9, lambda_rec=0.5)
    assert parse_config_text(dump_config(m, t)) == (m, t)


def test_comments_and_blank_lines():
    m, t = parse_config_text("# header\n\nn_aus = 3  # trailing\nepochs=2\nmask_activation = 'softmax'\n")
    assert m.n_aus == 3 and t.epochs == 2 and m.mask_activation == "softmax"


@pytest.mark.parametrize("text", [
    "unknown_key = 1", "n_aus = three", "just words", "variant = nope", "image_size = 100",
    "downsample_factor = 6", "epochs = 0", "base_lr = -1", "margin = -0.1",
])
def test_rejected(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_tanh_warns():
    with pytest.warns(UserWarning):
        ModelConfig(mask_activation="tanh")


def test_precision(monkeypatch):
    monkeypatch.setenv("AUNET_PRECISION", "f64")
    assert get_dtype() is torch.float64
    monkeypatch.setenv("AUNET_PRECISION", "f16")
    with pytest.raises(ConfigError):
        get_dtype()
    monkeypatch.delenv("AUNET_PRECISION")
    assert get_dtype() is torch.float32


def test_config_error_is_value_error():
    with pytest.raises(ValueError):
        dataclasses.replace(ModelConfig(), n_aus=0)
