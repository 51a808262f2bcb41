"""Scikit-learn style estimator facade over the training loop and decoders.

``CtcRecognizer`` follows the usual conventions: constructor arguments are
stored verbatim (so ``get_params`` / ``set_params`` / ``clone`` work),
fitted state lives in trailing-underscore attributes, and ``fit`` returns
``self``. X is a list of per-utterance [T, feature_dim] arrays and y a list
of token-id sequences; unpaired text enters as a fit parameter.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .ctc import beam_search, greedy_decode
from .encoders import EncoderConfig, ModelConfig, ModelParams, classify, encode_speech
from .errors import ConfigError
from .scoring import SplitScore, align_counts
from .tensor import no_grad
from .training import (PairedExample, SpecAugmentConfig, TrainConfig, UnpairedExample,
                       evaluate_greedy, train, train_baseline)
from .validation import check_feature_sequences, check_paired, check_token_sequences


class CtcRecognizer(BaseEstimator):
    """CTC recognizer with optional unpaired-text injection.

    With ``text_injection=False`` this is a standard CTC model; with it on,
    training interleaves text-only CTC steps and adds the modality matching
    and paired-text CTC losses (each individually toggleable).

    Parameters mirror the training configuration; see ``TrainConfig`` and
    ``ModelConfig`` for semantics. ``predict`` decodes greedily unless a
    ``beam_size`` > 1 plus an optional language-model scorer are configured.
    """

    def __init__(self, vocab_size: int = 201, num_phones: int = 41,
                 feature_dim: int = 16, blank_id: int = 0,
                 acoustic_layers: int = 2, text_layers: int = 1,
                 model_dim: int = 32, ffn_dim: int = 64, num_heads: int = 2,
                 acoustic_downsample: int = 2, text_downsample: int = 2,
                 dropout: float = 0.0,
                 text_injection: bool = True, alpha: float = 0.5,
                 enable_am3: bool = True, enable_paired_ctc: bool = True,
                 text_through_acoustic_encoder: bool = True,
                 epochs: int = 15, paired_batch: int = 16, unpaired_batch: int = 16,
                 peak_lr: float = 1e-3, warmup_steps: int = 200,
                 grad_clip: float = 5.0, average_best_k: int = 5,
                 spec_augment_time_masks: int = 2, spec_augment_time_width: int = 6,
                 spec_augment_feat_masks: int = 1, spec_augment_feat_width: int = 4,
                 beam_size: int = 1, lm=None, lm_weight: float = 0.0,
                 seed: int = 0):
        self.vocab_size = vocab_size
        self.num_phones = num_phones
        self.feature_dim = feature_dim
        self.blank_id = blank_id
        self.acoustic_layers = acoustic_layers
        self.text_layers = text_layers
        self.model_dim = model_dim
        self.ffn_dim = ffn_dim
        self.num_heads = num_heads
        self.acoustic_downsample = acoustic_downsample
        self.text_downsample = text_downsample
        self.dropout = dropout
        self.text_injection = text_injection
        self.alpha = alpha
        self.enable_am3 = enable_am3
        self.enable_paired_ctc = enable_paired_ctc
        self.text_through_acoustic_encoder = text_through_acoustic_encoder
        self.epochs = epochs
        self.paired_batch = paired_batch
        self.unpaired_batch = unpaired_batch
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.grad_clip = grad_clip
        self.average_best_k = average_best_k
        self.spec_augment_time_masks = spec_augment_time_masks
        self.spec_augment_time_width = spec_augment_time_width
        self.spec_augment_feat_masks = spec_augment_feat_masks
        self.spec_augment_feat_width = spec_augment_feat_width
        self.beam_size = beam_size
        self.lm = lm
        self.lm_weight = lm_weight
        self.seed = seed

    # -- config assembly ---------------------------------------------------

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size, num_phones=self.num_phones,
            feature_dim=self.feature_dim, blank_id=self.blank_id,
            acoustic=EncoderConfig(num_layers=self.acoustic_layers,
                                   model_dim=self.model_dim, ffn_dim=self.ffn_dim,
                                   num_heads=self.num_heads,
                                   downsample_factor=self.acoustic_downsample,
                                   dropout=self.dropout),
            text=EncoderConfig(num_layers=self.text_layers, model_dim=self.model_dim,
                               ffn_dim=self.ffn_dim, num_heads=self.num_heads,
                               downsample_factor=self.text_downsample,
                               dropout=self.dropout))

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            alpha=self.alpha, epochs=self.epochs, paired_batch=self.paired_batch,
            unpaired_batch=self.unpaired_batch, peak_lr=self.peak_lr,
            warmup_steps=self.warmup_steps, grad_clip=self.grad_clip,
            average_best_k=self.average_best_k, seed=self.seed,
            enable_am3=self.enable_am3, enable_paired_ctc=self.enable_paired_ctc,
            text_through_acoustic_encoder=self.text_through_acoustic_encoder,
            specaugment=SpecAugmentConfig(
                num_time_masks=self.spec_augment_time_masks,
                max_time_width=self.spec_augment_time_width,
                num_feat_masks=self.spec_augment_feat_masks,
                max_feat_width=self.spec_augment_feat_width))

    # -- estimator API -----------------------------------------------------

    def fit(self, X, y, paired_text=None, unpaired=None, dev=None):
        """Train on paired (X, y) plus optional prepared unpaired text.

        ``paired_text``: per-utterance upsampled phone-id lists aligned with
        X (required when the text-side losses are enabled).
        ``unpaired``: list of (upsampled_phone_ids, token_ids) pairs.
        ``dev``: optional (X_dev, y_dev) pair used for best-epoch selection;
        defaults to a slice of the training data.
        """
        X = check_feature_sequences(X, self.feature_dim)
        y = check_token_sequences(y, self.vocab_size, self.blank_id)
        check_paired(X, y)
        mcfg = self._model_config()
        tcfg = self._train_config()

        needs_text = self.text_injection and (self.enable_am3 or self.enable_paired_ctc)
        if needs_text:
            if paired_text is None:
                raise ConfigError(
                    "paired_text is required when text-side losses are enabled")
            phones = check_token_sequences(paired_text, self.num_phones, name="paired_text")
            check_paired(X, phones)
        else:
            phones = [[] for _ in X]

        paired = [PairedExample(utt_id=f"train-{i:05d}", feats=f, tokens=t, phones=p)
                  for i, (f, t, p) in enumerate(zip(X, y, phones))]

        unpaired_examples: list[UnpairedExample] = []
        if self.text_injection and unpaired:
            for i, (u_phones, u_tokens) in enumerate(unpaired):
                unpaired_examples.append(UnpairedExample(
                    utt_id=f"unpaired-{i:05d}",
                    phones=check_token_sequences([u_phones], self.num_phones,
                                                 name="unpaired phones")[0],
                    tokens=check_token_sequences([u_tokens], self.vocab_size,
                                                 self.blank_id, name="unpaired tokens")[0]))

        if dev is not None:
            dev_X = check_feature_sequences(dev[0], self.feature_dim)
            dev_y = check_token_sequences(dev[1], self.vocab_size, self.blank_id)
            check_paired(dev_X, dev_y)
        else:
            take = min(len(X), 40)
            dev_X, dev_y = X[:take], y[:take]
        dev_examples = [PairedExample(utt_id=f"dev-{i:05d}", feats=f, tokens=t)
                        for i, (f, t) in enumerate(zip(dev_X, dev_y))]

        if self.text_injection:
            result = train(paired, unpaired_examples, dev_examples, mcfg, tcfg)
        else:
            result = train_baseline(paired, dev_examples, mcfg, tcfg)
        self.params_ = result.params
        self.model_config_ = mcfg
        self.history_ = result.history
        self.best_epochs_ = result.best_epochs
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "params_"):
            raise NotFittedError("this CtcRecognizer instance is not fitted yet")

    def predict(self, X) -> list[list[int]]:
        """Decode each utterance to a token-id sequence."""
        self._check_fitted()
        X = check_feature_sequences(X, self.feature_dim)
        mcfg = self.model_config_
        hyps: list[list[int]] = []
        with no_grad():
            for feats in X:
                s = encode_speech(feats, self.params_, mcfg, train=False)
                logits = classify(s, self.params_).data
                if self.beam_size > 1:
                    hyps.append(beam_search(logits, self.beam_size, mcfg.blank_id,
                                            lm=self.lm, lm_weight=self.lm_weight))
                else:
                    hyps.append(greedy_decode(logits, mcfg.blank_id))
        return hyps

    def score(self, X, y) -> float:
        """Token accuracy, 1 - TER/100 (can be negative with many insertions)."""
        self._check_fitted()
        y = check_token_sequences(y, self.vocab_size, self.blank_id)
        hyps = self.predict(X)
        total = SplitScore()
        for ref, hyp in zip(y, hyps):
            total.add(align_counts(ref, hyp))
        return 1.0 - total.ter / 100.0
