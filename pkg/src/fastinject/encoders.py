"""Trainable backbone: acoustic encoder, text encoder, shared classifier.

Both encoders are pre-norm Transformer stacks over the engine's primitive
ops, preceded by strided 1-D convolutions for downsampling (kernel 3,
padding 1, stride = factor; factor 4 is two stride-2 convolutions) and
sinusoidal position encodings. The linear classifier is a single shared
parameter pair used by every loss path, speech or text.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (NEG_INF, Tensor, add, conv1d, dropout, embedding, ffn_block,
                     layer_norm, linear, self_attention)


@dataclass
class EncoderConfig:
    num_layers: int
    model_dim: int
    ffn_dim: int
    num_heads: int
    downsample_factor: int = 1
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.downsample_factor not in (1, 2, 4):
            raise ConfigError(f"downsample_factor must be 1, 2 or 4, got {self.downsample_factor}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class ModelConfig:
    """Everything needed to build and run the recognizer."""

    vocab_size: int            # output units including the blank
    num_phones: int            # text-side input units including silence
    feature_dim: int = 16
    blank_id: int = 0
    acoustic: EncoderConfig = field(default_factory=lambda: EncoderConfig(
        num_layers=2, model_dim=32, ffn_dim=64, num_heads=2, downsample_factor=2))
    text: EncoderConfig = field(default_factory=lambda: EncoderConfig(
        num_layers=1, model_dim=32, ffn_dim=64, num_heads=2, downsample_factor=2))

    def __post_init__(self) -> None:
        if self.acoustic.model_dim != self.text.model_dim:
            raise ConfigError("acoustic and text encoders must share model_dim")
        if not 0 <= self.blank_id < self.vocab_size:
            raise ConfigError(f"blank_id {self.blank_id} outside vocabulary of {self.vocab_size}")

    def with_text_downsample(self, factor: int) -> "ModelConfig":
        return replace(self, text=replace(self.text, downsample_factor=factor))


class ModelParams:
    """Flat named-parameter container; the checkpoint format mirrors it."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: self.tensors[name].data.copy() for name in self.names()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, tensor in self.tensors.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint missing parameter {name!r}")
            if arrays[name].shape != tensor.shape:
                raise ShapeError(
                    f"parameter {name!r} has shape {arrays[name].shape}, expected {tensor.shape}")
            tensor.data = np.ascontiguousarray(arrays[name], dtype=np.float64)

    def clone(self) -> "ModelParams":
        out = ModelParams({name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                           for name, t in self.tensors.items()})
        return out


def _conv_stages(factor: int) -> list[int]:
    return {1: [1], 2: [2], 4: [2, 2]}[factor]


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Fan-in scaled Gaussian init for weights, zeros for biases, unit gains."""
    d = cfg.acoustic.model_dim
    tensors: dict[str, Tensor] = {}

    def w(name: str, shape, fan_in: int) -> None:
        tensors[name] = Tensor(rng.standard_normal(shape) / math.sqrt(fan_in),
                               requires_grad=True)

    def zero(name: str, shape) -> None:
        tensors[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(name: str, shape) -> None:
        tensors[name] = Tensor(np.ones(shape), requires_grad=True)

    def stack(prefix: str, enc: EncoderConfig, in_dim: int) -> None:
        for i, stride in enumerate(_conv_stages(enc.downsample_factor)):
            cin = in_dim if i == 0 else d
            w(f"{prefix}.conv{i}.w", (3, cin, d), 3 * cin)
            zero(f"{prefix}.conv{i}.b", (d,))
        dh = d // enc.num_heads
        for i in range(enc.num_layers):
            base = f"{prefix}.layer{i}"
            ones(f"{base}.ln1.g", (d,))
            zero(f"{base}.ln1.b", (d,))
            ones(f"{base}.ln2.g", (d,))
            zero(f"{base}.ln2.b", (d,))
            for h in range(enc.num_heads):
                w(f"{base}.attn.h{h}.wq", (d, dh), d)
                w(f"{base}.attn.h{h}.wk", (d, dh), d)
                w(f"{base}.attn.h{h}.wv", (d, dh), d)
                w(f"{base}.attn.h{h}.wo", (dh, d), dh)
            w(f"{base}.ffn.w1", (d, enc.ffn_dim), d)
            zero(f"{base}.ffn.b1", (enc.ffn_dim,))
            w(f"{base}.ffn.w2", (enc.ffn_dim, d), enc.ffn_dim)
            zero(f"{base}.ffn.b2", (d,))
        ones(f"{prefix}.ln_out.g", (d,))
        zero(f"{prefix}.ln_out.b", (d,))

    w("proj.w", (cfg.feature_dim, d), cfg.feature_dim)
    zero("proj.b", (d,))
    stack("acoustic", cfg.acoustic, d)
    w("text.emb", (cfg.num_phones, d), 1)
    stack("text", cfg.text, d)
    w("cls.w", (d, cfg.vocab_size), d)
    zero("cls.b", (cfg.vocab_size,))
    return ModelParams(tensors)


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positional_encoding(length: int, dim: int) -> Tensor:
    """Sinusoidal position table, cached per (length, dim)."""
    key = (length, dim)
    table = _PE_CACHE.get(key)
    if table is None:
        pos = np.arange(length)[:, None]
        i = np.arange(dim // 2)[None, :]
        angle = pos / np.power(10000.0, 2.0 * i / dim)
        table = np.zeros((length, dim))
        table[:, 0::2] = np.sin(angle)
        table[:, 1::2] = np.cos(angle)
        _PE_CACHE[key] = table
    return Tensor(table)


_MASK_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(n: int) -> np.ndarray:
    mask = _MASK_CACHE.get(n)
    if mask is None:
        mask = np.triu(np.full((n, n), NEG_INF), k=1)
        _MASK_CACHE[n] = mask
    return mask


def transformer_layer(x: Tensor, params: ModelParams, base: str, enc: EncoderConfig,
                      rng: np.random.Generator | None, train: bool,
                      causal: bool = False) -> Tensor:
    """One pre-norm block: self-attention then feed-forward, both residual."""
    h = layer_norm(x, params[f"{base}.ln1.g"], params[f"{base}.ln1.b"])
    mask = _causal_mask(x.shape[0]) if causal else None
    heads = [(params[f"{base}.attn.h{i}.wq"], params[f"{base}.attn.h{i}.wk"],
              params[f"{base}.attn.h{i}.wv"], params[f"{base}.attn.h{i}.wo"])
             for i in range(enc.num_heads)]
    attn_out = self_attention(h, heads, mask=mask)
    if train and enc.dropout > 0.0:
        attn_out = dropout(attn_out, enc.dropout, rng, train)
    x = add(x, attn_out)

    h = layer_norm(x, params[f"{base}.ln2.g"], params[f"{base}.ln2.b"])
    f = ffn_block(h, params[f"{base}.ffn.w1"], params[f"{base}.ffn.b1"],
                  params[f"{base}.ffn.w2"], params[f"{base}.ffn.b2"])
    if train and enc.dropout > 0.0:
        f = dropout(f, enc.dropout, rng, train)
    return add(x, f)


def _conv_stack(x: Tensor, params: ModelParams, prefix: str, enc: EncoderConfig) -> Tensor:
    for i, stride in enumerate(_conv_stages(enc.downsample_factor)):
        x = conv1d(x, params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"], stride)
    return x


def _encoder_stack(x: Tensor, params: ModelParams, prefix: str, enc: EncoderConfig,
                   rng: np.random.Generator | None, train: bool) -> Tensor:
    x = add(x, positional_encoding(x.shape[0], enc.model_dim))
    for i in range(enc.num_layers):
        x = transformer_layer(x, params, f"{prefix}.layer{i}", enc, rng, train)
    return layer_norm(x, params[f"{prefix}.ln_out.g"], params[f"{prefix}.ln_out.b"])


def encode_speech(feats: np.ndarray | Tensor, params: ModelParams, cfg: ModelConfig,
                  train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Project, downsample and encode [T, feature_dim] frames.

    Output has ceil(T / acoustic downsample factor) rows.
    """
    x = feats if isinstance(feats, Tensor) else Tensor(feats)
    if x.data.ndim != 2 or x.shape[1] != cfg.feature_dim:
        raise ShapeError(f"expected [T, {cfg.feature_dim}] features, got shape {x.shape}")
    if x.shape[0] < cfg.acoustic.downsample_factor:
        raise ShapeError(
            f"need at least {cfg.acoustic.downsample_factor} frames, got {x.shape[0]}")
    x = linear(x, params["proj.w"], params["proj.b"])
    x = _conv_stack(x, params, "acoustic", cfg.acoustic)
    return _encoder_stack(x, params, "acoustic", cfg.acoustic, rng, train)


def encode_text(phone_ids, params: ModelParams, cfg: ModelConfig,
                train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Embed and encode an upsampled phone-id sequence.

    Output has ceil(L / text downsample factor) rows.
    """
    ids = np.asarray(phone_ids, dtype=np.int64)
    if ids.size == 0:
        raise ShapeError("cannot encode an empty phone sequence")
    if ids.size < cfg.text.downsample_factor:
        raise ShapeError(
            f"need at least {cfg.text.downsample_factor} phones, got {ids.size}")
    x = embedding(params["text.emb"], ids)
    x = _conv_stack(x, params, "text", cfg.text)
    return _encoder_stack(x, params, "text", cfg.text, rng, train)


def acoustic_stack(h: Tensor, params: ModelParams, cfg: ModelConfig,
                   train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Run already-embedded rows through the acoustic Transformer layers.

    Entry point for text representations joining the speech pathway; skips
    projection, convolution and position encoding (the text side applied
    its own).
    """
    for i in range(cfg.acoustic.num_layers):
        h = transformer_layer(h, params, f"acoustic.layer{i}", cfg.acoustic, rng, train)
    return layer_norm(h, params["acoustic.ln_out.g"], params["acoustic.ln_out.b"])


def classify(h: Tensor, params: ModelParams) -> Tensor:
    """Shared linear classifier; one weight object for every branch."""
    if h.shape[1] != params["cls.w"].shape[0]:
        raise ShapeError(
            f"classifier expects dim {params['cls.w'].shape[0]}, got {h.shape[1]}")
    return linear(h, params["cls.w"], params["cls.b"])


def output_length(t: int, factor: int) -> int:
    """Sequence length after downsampling: ceil(t / factor)."""
    return -(-t // factor)


def model_config_manifest(cfg: ModelConfig) -> dict:
    return {
        "kind": "asr",
        "vocab_size": cfg.vocab_size,
        "num_phones": cfg.num_phones,
        "feature_dim": cfg.feature_dim,
        "blank_id": cfg.blank_id,
        "acoustic": vars(cfg.acoustic).copy(),
        "text": vars(cfg.text).copy(),
    }


def model_config_from_manifest(manifest: dict) -> ModelConfig:
    if manifest.get("kind") != "asr":
        raise ConfigError("checkpoint does not hold a recognizer model")
    return ModelConfig(
        vocab_size=manifest["vocab_size"], num_phones=manifest["num_phones"],
        feature_dim=manifest["feature_dim"], blank_id=manifest["blank_id"],
        acoustic=EncoderConfig(**manifest["acoustic"]),
        text=EncoderConfig(**manifest["text"]))


def save_model(path, params: ModelParams, cfg: ModelConfig) -> None:
    from .checkpoint import save_checkpoint
    save_checkpoint(path, params.state_arrays(), model_config_manifest(cfg))


def load_model(path) -> tuple[ModelParams, ModelConfig]:
    from .checkpoint import load_checkpoint
    arrays, manifest = load_checkpoint(path)
    cfg = model_config_from_manifest(manifest)
    params = ModelParams({name: Tensor(arr, requires_grad=True)
                          for name, arr in arrays.items()})
    return params, cfg
