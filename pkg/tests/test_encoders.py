"""Encoder stack: shapes, determinism, classifier sharing, checkpoints."""

import numpy as np
import pytest

from fastinject.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from fastinject.ctc import CtcTarget, ctc_loss
from fastinject.encoders import (EncoderConfig, ModelConfig, acoustic_stack, classify,
                                 encode_speech, encode_text, init_params, load_model,
                                 model_config_from_manifest, model_config_manifest,
                                 output_length, save_model)
from fastinject.errors import ConfigError, DataError, ShapeError
from fastinject.tensor import Tensor, backward, tsum
from conftest import tiny_model_config


class TestConfig:
    def test_heads_must_divide_dim(self):
        with pytest.raises(ConfigError):
            EncoderConfig(num_layers=1, model_dim=30, ffn_dim=8, num_heads=4)

    def test_downsample_choices(self):
        with pytest.raises(ConfigError):
            EncoderConfig(num_layers=1, model_dim=8, ffn_dim=8, num_heads=2,
                          downsample_factor=3)

    def test_encoders_share_model_dim(self):
        with pytest.raises(ConfigError):
            ModelConfig(vocab_size=4, num_phones=4,
                        acoustic=EncoderConfig(1, 16, 8, 2),
                        text=EncoderConfig(1, 32, 8, 2))


class TestLengths:
    def test_speech_halves_time(self, tiny_model, rng):
        cfg, params = tiny_model
        out = encode_speech(rng.standard_normal((10, 5)), params, cfg)
        assert out.shape == (5, 16)

    @pytest.mark.parametrize("length,factor,expected", [(8, 4, 2), (7, 2, 4)])
    def test_text_ceiling(self, rng, length, factor, expected):
        cfg = tiny_model_config(text_downsample=factor)
        params = init_params(cfg, rng)
        out = encode_text(list(range(1, length + 1)), params, cfg)
        assert out.shape[0] == expected

    @pytest.mark.parametrize("factor", [1, 2, 4])
    def test_length_formula_all_t(self, rng, factor):
        cfg = tiny_model_config(acoustic_downsample=factor)
        params = init_params(cfg, rng)
        for t in range(factor, 65, 7):
            out = encode_speech(rng.standard_normal((t, 5)), params, cfg)
            assert out.shape[0] == output_length(t, factor)

    def test_too_short_rejected(self, tiny_model):
        cfg, params = tiny_model
        with pytest.raises(ShapeError):
            encode_speech(np.zeros((1, 5)), params, cfg)
        with pytest.raises(ShapeError):
            encode_text([], params, cfg)


class TestDeterminism:
    def test_eval_mode_bit_identical(self, tiny_model, rng):
        cfg, params = tiny_model
        feats = rng.standard_normal((12, 5))
        a = encode_speech(feats, params, cfg, train=False)
        b = encode_speech(feats, params, cfg, train=False)
        np.testing.assert_array_equal(a.data, b.data)

    def test_zero_weights_finite_and_deterministic(self, rng):
        cfg = tiny_model_config()
        params = init_params(cfg, rng)
        for t in params.tensors.values():
            t.data = np.zeros_like(t.data)
        out = encode_speech(np.ones((6, 5)), params, cfg)
        assert np.all(np.isfinite(out.data))
        out2 = encode_speech(np.ones((6, 5)), params, cfg)
        np.testing.assert_array_equal(out.data, out2.data)


class TestClassifier:
    def test_zero_classifier_uniform_posterior(self, tiny_model, rng):
        cfg, params = tiny_model
        params["cls.w"].data = np.zeros_like(params["cls.w"].data)
        params["cls.b"].data = np.zeros_like(params["cls.b"].data)
        h = encode_speech(rng.standard_normal((8, 5)), params, cfg)
        logits = classify(h, params)
        np.testing.assert_array_equal(logits.data, np.zeros_like(logits.data))

    def test_identity_map_passthrough(self, rng):
        cfg = ModelConfig(vocab_size=16, num_phones=8, feature_dim=5,
                          acoustic=EncoderConfig(1, 16, 32, 2, 2),
                          text=EncoderConfig(1, 16, 32, 2, 2))
        params = init_params(cfg, rng)
        params["cls.w"].data = np.eye(16)
        params["cls.b"].data = np.zeros(16)
        h = Tensor(rng.standard_normal((4, 16)))
        np.testing.assert_array_equal(classify(h, params).data, h.data)

    def test_dim_mismatch(self, tiny_model, rng):
        cfg, params = tiny_model
        with pytest.raises(ShapeError):
            classify(Tensor(rng.standard_normal((3, 7))), params)

    def test_all_branches_hit_same_classifier(self, tiny_model, rng):
        """Gradients from the speech, paired-text and unpaired-text paths all
        land in the one classifier weight tensor."""
        cfg, params = tiny_model
        target = CtcTarget([1, 2], blank_id=0)
        cls_w = params["cls.w"]

        s = encode_speech(rng.standard_normal((10, 5)), params, cfg)
        backward(ctc_loss(classify(s, params), target))
        g_speech = cls_w.grad.copy()
        params.zero_grad()

        p = encode_text([1, 2, 3, 4, 5, 6], params, cfg)
        backward(ctc_loss(classify(acoustic_stack(p, params, cfg), params), target))
        g_text = cls_w.grad.copy()
        params.zero_grad()

        assert np.abs(g_speech).max() > 0 and np.abs(g_text).max() > 0

    def test_classifier_perturbation_moves_all_branches(self, tiny_model, rng):
        cfg, params = tiny_model
        feats = rng.standard_normal((10, 5))
        phones = [1, 2, 3, 4]
        s_before = classify(encode_speech(feats, params, cfg), params).data.copy()
        p = encode_text(phones, params, cfg)
        p_before = classify(acoustic_stack(p, params, cfg), params).data.copy()
        params["cls.w"].data = params["cls.w"].data + 0.5
        s_after = classify(encode_speech(feats, params, cfg), params).data
        p2 = encode_text(phones, params, cfg)
        p_after = classify(acoustic_stack(p2, params, cfg), params).data
        assert np.abs(s_after - s_before).max() > 0
        assert np.abs(p_after - p_before).max() > 0


class TestEmbeddingTable:
    def test_row_count_matches_inventory(self, tiny_model):
        cfg, params = tiny_model
        assert params["text.emb"].shape[0] == cfg.num_phones


class TestCheckpointFormat:
    def test_round_trip(self, tmp_path, rng):
        arrays = {"a.w": rng.standard_normal((3, 4)), "b": rng.standard_normal(5)}
        config = {"kind": "test", "value": 3}
        path = tmp_path / "ck.fjckpt"
        save_checkpoint(path, arrays, config)
        assert path.read_bytes()[:8] == MAGIC
        back, cfg = load_checkpoint(path)
        assert cfg == config
        for name in arrays:
            np.testing.assert_array_equal(back[name], arrays[name])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.fjckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_model_round_trip(self, tmp_path, tiny_model, rng):
        cfg, params = tiny_model
        path = tmp_path / "model.fjckpt"
        save_model(path, params, cfg)
        params2, cfg2 = load_model(path)
        assert cfg2 == cfg
        feats = rng.standard_normal((8, 5))
        a = encode_speech(feats, params, cfg).data
        b = encode_speech(feats, params2, cfg2).data
        np.testing.assert_array_equal(a, b)

    def test_manifest_round_trip(self):
        cfg = tiny_model_config()
        assert model_config_from_manifest(model_config_manifest(cfg)) == cfg
