"""Causal Transformer language model over the recognizer's output units.

Trained on the unpaired multi-domain text and consumed by the beam-search
decoder through shallow fusion. Scoring is a pure function of the token
prefix; the incremental scorer keeps per-layer key/value caches and is
checked against full-prefix recomputation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .encoders import EncoderConfig, ModelParams, positional_encoding, transformer_layer
from .errors import ConfigError, ShapeError
from .optim import Adam
from .tensor import (Tensor, backward, embedding, layer_norm, linear,
                     log_softmax_rows, mean, scale, take_per_row)


@dataclass
class LmConfig:
    vocab_size: int
    num_layers: int = 2
    model_dim: int = 32
    ffn_dim: int = 64
    num_heads: int = 2
    epochs: int = 5
    batch_size: int = 16
    peak_lr: float = 2e-3
    warmup_steps: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ConfigError("language model needs at least one layer")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")

    @property
    def bos_id(self) -> int:
        # extra embedding row marking sequence start; never predicted
        return self.vocab_size

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(num_layers=self.num_layers, model_dim=self.model_dim,
                             ffn_dim=self.ffn_dim, num_heads=self.num_heads)


def init_lm_params(cfg: LmConfig, rng: np.random.Generator) -> ModelParams:
    d = cfg.model_dim
    dh = d // cfg.num_heads
    tensors: dict[str, Tensor] = {}
    tensors["lm.emb"] = Tensor(rng.standard_normal((cfg.vocab_size + 1, d)), requires_grad=True)
    for i in range(cfg.num_layers):
        base = f"lm.layer{i}"
        tensors[f"{base}.ln1.g"] = Tensor(np.ones(d), requires_grad=True)
        tensors[f"{base}.ln1.b"] = Tensor(np.zeros(d), requires_grad=True)
        tensors[f"{base}.ln2.g"] = Tensor(np.ones(d), requires_grad=True)
        tensors[f"{base}.ln2.b"] = Tensor(np.zeros(d), requires_grad=True)
        for h in range(cfg.num_heads):
            for nm in ("wq", "wk", "wv"):
                tensors[f"{base}.attn.h{h}.{nm}"] = Tensor(
                    rng.standard_normal((d, dh)) / math.sqrt(d), requires_grad=True)
            tensors[f"{base}.attn.h{h}.wo"] = Tensor(
                rng.standard_normal((dh, d)) / math.sqrt(dh), requires_grad=True)
        tensors[f"{base}.ffn.w1"] = Tensor(
            rng.standard_normal((d, cfg.ffn_dim)) / math.sqrt(d), requires_grad=True)
        tensors[f"{base}.ffn.b1"] = Tensor(np.zeros(cfg.ffn_dim), requires_grad=True)
        tensors[f"{base}.ffn.w2"] = Tensor(
            rng.standard_normal((cfg.ffn_dim, d)) / math.sqrt(cfg.ffn_dim), requires_grad=True)
        tensors[f"{base}.ffn.b2"] = Tensor(np.zeros(d), requires_grad=True)
    tensors["lm.ln_out.g"] = Tensor(np.ones(d), requires_grad=True)
    tensors["lm.ln_out.b"] = Tensor(np.zeros(d), requires_grad=True)
    tensors["lm.head.w"] = Tensor(rng.standard_normal((d, cfg.vocab_size)) / math.sqrt(d),
                                  requires_grad=True)
    tensors["lm.head.b"] = Tensor(np.zeros(cfg.vocab_size), requires_grad=True)
    return ModelParams(tensors)


def lm_logprobs_tensor(ids: list[int], params: ModelParams, cfg: LmConfig) -> Tensor:
    """[len(ids)+1, V] next-token log-probs for positions 0..len(ids).

    Row t conditions on ids[:t] (row 0 on the start marker alone).
    """
    inputs = [cfg.bos_id] + list(ids)
    if any(t < 0 or t >= cfg.vocab_size for t in ids):
        raise ShapeError(f"token id out of range for vocabulary of {cfg.vocab_size}")
    enc = cfg.encoder()
    x = embedding(params["lm.emb"], inputs)
    x = x + positional_encoding(len(inputs), cfg.model_dim)
    for i in range(cfg.num_layers):
        x = transformer_layer(x, params, f"lm.layer{i}", enc, None, False, causal=True)
    x = layer_norm(x, params["lm.ln_out.g"], params["lm.ln_out.b"])
    logits = linear(x, params["lm.head.w"], params["lm.head.b"])
    return log_softmax_rows(logits)


def sequence_nll(ids: list[int], params: ModelParams, cfg: LmConfig) -> Tensor:
    """Mean per-token negative log-likelihood of one sequence."""
    if not ids:
        raise ShapeError("cannot score an empty sequence")
    logprobs = lm_logprobs_tensor(ids[:-1], params, cfg)
    picked = take_per_row(logprobs, ids)
    return scale(mean(picked), -1.0)


def lm_train(texts: list[list[int]], cfg: LmConfig,
             log=None) -> tuple[ModelParams, list[float]]:
    """Cross-entropy training; returns params and per-epoch perplexities."""
    texts = [t for t in texts if t]
    if not texts:
        raise ConfigError("language model training needs a non-empty corpus")
    rng = np.random.default_rng([cfg.seed, 29])
    params = init_lm_params(cfg, rng)
    trainable = [params[name] for name in params.names()]
    opt = Adam(trainable, peak_lr=cfg.peak_lr, warmup_steps=cfg.warmup_steps)
    perplexities: list[float] = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 31, epoch]).permutation(len(texts))
        total_nll = 0.0
        total_tokens = 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            for idx in chunk:
                ids = texts[int(idx)]
                loss = sequence_nll(ids, params, cfg)
                total_nll += loss.item() * len(ids)
                total_tokens += len(ids)
                backward(scale(loss, 1.0 / len(chunk)))
            opt.step()
            opt.zero_grad()
        ppl = math.exp(total_nll / max(1, total_tokens))
        perplexities.append(ppl)
        if log is not None:
            log(f"lm epoch {epoch} perplexity {ppl:.4f}")
    return params, perplexities


@dataclass(frozen=True)
class LmState:
    """Causal prefix plus cached per-layer keys/values (opaque to callers)."""

    ids: tuple[int, ...]
    caches: tuple = field(repr=False, default=())


class LmScorer:
    """Incremental next-token scorer on plain numpy arrays.

    ``start`` / ``advance`` / ``next_logprobs`` implement the interface the
    beam-search decoder fuses against; ``score`` is the one-call form.
    """

    def __init__(self, arrays: dict[str, np.ndarray], cfg: LmConfig):
        self.arrays = arrays
        self.cfg = cfg
        self._pe = _pe_table(512, cfg.model_dim)

    def start(self) -> LmState:
        state = LmState(ids=(), caches=self._empty_caches())
        return self._push(state, self.cfg.bos_id)

    def advance(self, state: LmState, token: int) -> LmState:
        if not 0 <= token < self.cfg.vocab_size:
            raise ShapeError(f"token id {token} out of range for vocabulary "
                             f"of {self.cfg.vocab_size}")
        new = self._push(state, token)
        return replace(new, ids=state.ids + (token,))

    def next_logprobs(self, state: LmState) -> np.ndarray:
        return state.caches[-1]

    def score(self, state: LmState, next_token: int) -> tuple[float, LmState]:
        lp = float(self.next_logprobs(state)[next_token])
        return lp, self.advance(state, next_token)

    def score_sequence(self, ids: list[int]) -> float:
        state = self.start()
        total = 0.0
        for tok in ids:
            lp, state = self.score(state, tok)
            total += lp
        return total

    def _empty_caches(self) -> tuple:
        d = self.cfg.model_dim
        dh = d // self.cfg.num_heads
        per_layer = tuple(
            tuple((np.zeros((0, dh)), np.zeros((0, dh)))
                  for _ in range(self.cfg.num_heads))
            for _ in range(self.cfg.num_layers))
        return per_layer + (np.zeros(self.cfg.vocab_size),)

    def _push(self, state: LmState, token: int) -> LmState:
        cfg = self.cfg
        a = self.arrays
        d = cfg.model_dim
        dh = d // cfg.num_heads
        pos = state.caches[0][0][0].shape[0]
        x = a["lm.emb"][token] + self._pe[pos]
        new_layers = []
        for i in range(cfg.num_layers):
            base = f"lm.layer{i}"
            h = _ln(x, a[f"{base}.ln1.g"], a[f"{base}.ln1.b"])
            attn = np.zeros(d)
            heads = []
            for hd in range(cfg.num_heads):
                hp = f"{base}.attn.h{hd}"
                q = h @ a[f"{hp}.wq"]
                k_new = h @ a[f"{hp}.wk"]
                v_new = h @ a[f"{hp}.wv"]
                k_cache, v_cache = state.caches[i][hd]
                k_all = np.vstack([k_cache, k_new[None, :]])
                v_all = np.vstack([v_cache, v_new[None, :]])
                logits = (k_all @ q) / math.sqrt(dh)
                w = np.exp(logits - logits.max())
                w /= w.sum()
                attn += (w @ v_all) @ a[f"{hp}.wo"]
                heads.append((k_all, v_all))
            x = x + attn
            h2 = _ln(x, a[f"{base}.ln2.g"], a[f"{base}.ln2.b"])
            f = np.maximum(0.0, h2 @ a[f"{base}.ffn.w1"] + a[f"{base}.ffn.b1"])
            x = x + f @ a[f"{base}.ffn.w2"] + a[f"{base}.ffn.b2"]
            new_layers.append(tuple(heads))
        y = _ln(x, a["lm.ln_out.g"], a["lm.ln_out.b"])
        logits = y @ a["lm.head.w"] + a["lm.head.b"]
        logprobs = logits - _logsumexp(logits)
        return LmState(ids=state.ids, caches=tuple(new_layers) + (logprobs,))


def _ln(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = x.mean()
    var = x.var()
    return (x - mu) / math.sqrt(var + eps) * g + b


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


_PE_TABLES: dict[tuple[int, int], np.ndarray] = {}


def _pe_table(length: int, dim: int) -> np.ndarray:
    key = (length, dim)
    if key not in _PE_TABLES:
        _PE_TABLES[key] = positional_encoding(length, dim).data
    return _PE_TABLES[key]


def full_prefix_logprobs(arrays: dict[str, np.ndarray], cfg: LmConfig,
                         ids: list[int]) -> np.ndarray:
    """Next-token log-probs by recomputing the whole prefix (no caches).

    Reference path for cache-correctness checks.
    """
    params = ModelParams({name: Tensor(arr) for name, arr in arrays.items()})
    out = lm_logprobs_tensor(list(ids), params, cfg)
    return out.data[-1].copy()


def save_lm(path, params: ModelParams, cfg: LmConfig) -> None:
    config = {
        "kind": "lm",
        "vocab_size": cfg.vocab_size,
        "num_layers": cfg.num_layers,
        "model_dim": cfg.model_dim,
        "ffn_dim": cfg.ffn_dim,
        "num_heads": cfg.num_heads,
    }
    save_checkpoint(path, params.state_arrays(), config)


def load_lm(path) -> tuple[dict[str, np.ndarray], LmConfig]:
    arrays, config = load_checkpoint(path)
    if config.get("kind") != "lm":
        raise ConfigError(f"{path} is not a language-model checkpoint")
    cfg = LmConfig(vocab_size=config["vocab_size"], num_layers=config["num_layers"],
                   model_dim=config["model_dim"], ffn_dim=config["ffn_dim"],
                   num_heads=config["num_heads"])
    return arrays, cfg
