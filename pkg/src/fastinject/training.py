"""Joint training over interleaved paired and unpaired batches.

The composite objective is

    total = l_main + alpha * (l_paired_ctc + l_unpaired_ctc) + l_am3

with the auxiliary terms individually toggleable (the ablation axes) and
the unpaired term coming from its own alternating steps. Each batch
element is an independent graph; gradients are accumulated in utterance
order and the optimizer steps once per batch.

Random streams are keyed as (seed, stream, epoch, batch) so that disabling
injection leaves the paired-side randomness untouched: the plain baseline
loop and the joint loop with injection disabled follow bit-identical
trajectories under a shared seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .am3 import am3_loss
from .ctc import CtcTarget, ctc_loss, greedy_decode, min_frames
from .encoders import (ModelConfig, ModelParams, acoustic_stack, classify,
                       encode_speech, encode_text, init_params, output_length)
from .errors import DataError, NumericError
from .optim import Adam
from .scoring import SplitScore, align_counts
from .tensor import Tensor, add, backward, no_grad, scale

logger = logging.getLogger(__name__)

# random-stream tags; paired-side streams are identical in both loops
_S_INIT = 11
_S_SHUFFLE = 13
_S_UNPAIRED = 17
_S_AUGMENT = 19
_S_DROPOUT = 23
_S_UDROPOUT = 27


@dataclass
class SpecAugmentConfig:
    num_time_masks: int = 2
    max_time_width: int = 6
    num_feat_masks: int = 1
    max_feat_width: int = 4


@dataclass
class TrainConfig:
    alpha: float = 0.5
    epochs: int = 15
    paired_batch: int = 16
    unpaired_batch: int = 16
    peak_lr: float = 1e-3
    warmup_steps: int = 200
    grad_clip: float = 5.0
    average_best_k: int = 5
    seed: int = 0
    enable_am3: bool = True
    enable_paired_ctc: bool = True
    text_through_acoustic_encoder: bool = True
    # The matching loss between readout sequences is a mean squared error;
    # with this flag the objective reads it per frame (squared Euclidean
    # distance per position, averaged over positions), i.e. the plain
    # element-mean scaled by the feature dimension.
    am3_per_frame: bool = False
    specaugment: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise DataError(f"alpha must be >= 0, got {self.alpha}")
        if self.average_best_k < 1:
            raise DataError(f"average_best_k must be >= 1, got {self.average_best_k}")


@dataclass
class LossReport:
    """Per-step loss components; ``total`` recomposes exactly from them."""

    l_main: float = 0.0
    l_paired_ctc: float = 0.0
    l_unpaired_ctc: float = 0.0
    l_am3: float = 0.0
    alpha: float = 0.0
    total: float = 0.0

    @classmethod
    def compose(cls, alpha: float, l_main: float = 0.0, l_paired_ctc: float = 0.0,
                l_unpaired_ctc: float = 0.0, l_am3: float = 0.0) -> "LossReport":
        total = l_main + alpha * (l_paired_ctc + l_unpaired_ctc) + l_am3
        return cls(l_main=l_main, l_paired_ctc=l_paired_ctc,
                   l_unpaired_ctc=l_unpaired_ctc, l_am3=l_am3,
                   alpha=alpha, total=total)


@dataclass
class PairedExample:
    utt_id: str
    feats: np.ndarray
    tokens: list[int]
    phones: list[int] = field(default_factory=list)   # upsampled, prepared offline


@dataclass
class UnpairedExample:
    utt_id: str
    phones: list[int]
    tokens: list[int]


def spec_augment(feats: np.ndarray, cfg: SpecAugmentConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """Zero random time and feature bands; returns a masked copy."""
    out = feats.copy()
    t, d = out.shape
    for _ in range(cfg.num_time_masks):
        width = int(rng.integers(0, min(cfg.max_time_width, t) + 1))
        start = int(rng.integers(0, t - width + 1))
        out[start:start + width, :] = 0.0
    for _ in range(cfg.num_feat_masks):
        width = int(rng.integers(0, min(cfg.max_feat_width, d) + 1))
        start = int(rng.integers(0, d - width + 1))
        out[:, start:start + width] = 0.0
    return out


def paired_feasible(ex: PairedExample, mcfg: ModelConfig, tcfg: TrainConfig) -> bool:
    if not ex.tokens:
        return False
    need = min_frames(ex.tokens)
    if output_length(ex.feats.shape[0], mcfg.acoustic.downsample_factor) < need:
        return False
    if (tcfg.enable_paired_ctc or tcfg.enable_am3) and not ex.phones:
        return False
    if tcfg.enable_paired_ctc and \
            output_length(len(ex.phones), mcfg.text.downsample_factor) < need:
        return False
    return True


def unpaired_feasible(ex: UnpairedExample, mcfg: ModelConfig) -> bool:
    if not ex.tokens or not ex.phones:
        return False
    return output_length(len(ex.phones), mcfg.text.downsample_factor) >= min_frames(ex.tokens)


def _filter_feasible(items: list, predicate: Callable, kind: str) -> list:
    kept = [ex for ex in items if predicate(ex)]
    dropped = len(items) - len(kept)
    if dropped:
        logger.warning("dropped %d infeasible %s utterances of %d", dropped, kind, len(items))
    return kept


def _speech_branch_loss(feats: np.ndarray, tokens: list[int], params: ModelParams,
                        mcfg: ModelConfig, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    s = encode_speech(feats, params, mcfg, train=True, rng=rng)
    loss = ctc_loss(classify(s, params), CtcTarget(tokens, mcfg.blank_id))
    return s, loss


def _text_branch_logits(phones: list[int], params: ModelParams, mcfg: ModelConfig,
                        tcfg: TrainConfig, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    p = encode_text(phones, params, mcfg, train=True, rng=rng)
    h = acoustic_stack(p, params, mcfg, train=True, rng=rng) \
        if tcfg.text_through_acoustic_encoder else p
    return p, classify(h, params)


def paired_step(batch: list[PairedExample], params: ModelParams, mcfg: ModelConfig,
                tcfg: TrainConfig, aug_rng: np.random.Generator,
                dropout_rng: np.random.Generator) -> LossReport:
    """Forward/backward over one paired batch; grads accumulate in params."""
    b = len(batch)
    sums = {"main": 0.0, "paired": 0.0, "am3": 0.0}
    for ex in batch:
        feats = spec_augment(ex.feats, tcfg.specaugment, aug_rng)
        s, l_main = _speech_branch_loss(feats, ex.tokens, params, mcfg, dropout_rng)
        composite = l_main
        sums["main"] += l_main.item()
        if tcfg.enable_am3 or tcfg.enable_paired_ctc:
            p = encode_text(ex.phones, params, mcfg, train=True, rng=dropout_rng)
            if tcfg.enable_am3:
                l_am3 = am3_loss(s, p).loss
                if tcfg.am3_per_frame:
                    l_am3 = scale(l_am3, float(s.shape[1]))
                sums["am3"] += l_am3.item()
                composite = add(composite, l_am3)
            if tcfg.enable_paired_ctc:
                h = acoustic_stack(p, params, mcfg, train=True, rng=dropout_rng) \
                    if tcfg.text_through_acoustic_encoder else p
                l_paired = ctc_loss(classify(h, params), CtcTarget(ex.tokens, mcfg.blank_id))
                sums["paired"] += l_paired.item()
                composite = add(composite, scale(l_paired, tcfg.alpha))
        backward(scale(composite, 1.0 / b))
    return LossReport.compose(tcfg.alpha, l_main=sums["main"] / b,
                              l_paired_ctc=sums["paired"] / b,
                              l_am3=sums["am3"] / b)


def unpaired_step(batch: list[UnpairedExample], params: ModelParams, mcfg: ModelConfig,
                  tcfg: TrainConfig, dropout_rng: np.random.Generator) -> LossReport:
    """Text-only CTC step; contributes alpha * l_unpaired to the objective."""
    b = len(batch)
    total = 0.0
    for ex in batch:
        _, logits = _text_branch_logits(ex.phones, params, mcfg, tcfg, dropout_rng)
        loss = ctc_loss(logits, CtcTarget(ex.tokens, mcfg.blank_id))
        total += loss.item()
        backward(scale(loss, tcfg.alpha / b))
    return LossReport.compose(tcfg.alpha, l_unpaired_ctc=total / b)


def evaluate_greedy(params: ModelParams, mcfg: ModelConfig,
                    examples: Iterable[tuple[str, np.ndarray]]) -> dict[str, list[int]]:
    """Greedy CTC hypotheses keyed by utterance id."""
    out: dict[str, list[int]] = {}
    with no_grad():
        for utt_id, feats in examples:
            s = encode_speech(feats, params, mcfg, train=False)
            logits = classify(s, params)
            out[utt_id] = greedy_decode(logits.data, mcfg.blank_id)
    return out


def _dev_ter(params: ModelParams, mcfg: ModelConfig,
             dev: list[PairedExample]) -> float:
    hyps = evaluate_greedy(params, mcfg, ((ex.utt_id, ex.feats) for ex in dev))
    total = SplitScore()
    for ex in dev:
        total.add(align_counts(ex.tokens, hyps[ex.utt_id]))
    return total.ter


@dataclass
class EpochStats:
    epoch: int
    dev_ter: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochStats]
    best_epochs: list[int]
    step_lines: list[str]

    @property
    def final_dev_ter(self) -> float:
        return min(h.dev_ter for h in self.history) if self.history else float("nan")


LOG_HEADER = "step,epoch,l_main,l_paired,l_unpaired,l_am3,total,lr"


def _log_line(step: int, epoch: int, report: LossReport, lr: float) -> str:
    if not math.isfinite(report.total):
        raise NumericError(f"non-finite loss at step {step}: {report}")
    return "{},{},{!r},{!r},{!r},{!r},{!r},{!r}".format(
        step, epoch, report.l_main, report.l_paired_ctc, report.l_unpaired_ctc,
        report.l_am3, report.total, lr)


def average_checkpoints(trail: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Arithmetic mean of named-parameter snapshots."""
    if not trail:
        raise DataError("cannot average an empty checkpoint trail")
    out = {name: arr.copy() for name, arr in trail[0].items()}
    for snap in trail[1:]:
        for name in out:
            out[name] += snap[name]
    for name in out:
        out[name] /= len(trail)
    return out


def _select_best(history: list[EpochStats], k: int) -> list[int]:
    ranked = sorted(history, key=lambda h: (h.dev_ter, h.epoch))
    return sorted(h.epoch for h in ranked[:k])


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    return [order[i:i + size] for i in range(0, len(order), size)]


def train(paired: list[PairedExample], unpaired: list[UnpairedExample],
          dev: list[PairedExample], mcfg: ModelConfig, tcfg: TrainConfig,
          on_line: Callable[[str], None] | None = None) -> TrainResult:
    """Joint loop: strict paired/unpaired alternation, one optimizer step each.

    Dev TER is tracked per epoch and the returned parameters are the mean of
    the ``average_best_k`` best epochs.
    """
    paired = _filter_feasible(paired, lambda ex: paired_feasible(ex, mcfg, tcfg), "paired")
    unpaired = _filter_feasible(unpaired, lambda ex: unpaired_feasible(ex, mcfg), "unpaired")
    if not paired:
        raise DataError("no feasible paired utterances to train on")

    params = init_params(mcfg, np.random.default_rng([tcfg.seed, _S_INIT]))
    opt = Adam([params[n] for n in params.names()], peak_lr=tcfg.peak_lr,
               warmup_steps=tcfg.warmup_steps, grad_clip=tcfg.grad_clip)
    step = 0
    lines: list[str] = [LOG_HEADER]
    history: list[EpochStats] = []
    trail: list[dict[str, np.ndarray]] = []

    def emit(line: str) -> None:
        lines.append(line)
        if on_line is not None:
            on_line(line)

    for epoch in range(tcfg.epochs):
        order = np.random.default_rng([tcfg.seed, _S_SHUFFLE, epoch]).permutation(len(paired))
        uorder = None
        upos = 0
        if unpaired:
            uorder = np.random.default_rng([tcfg.seed, _S_UNPAIRED, epoch]) \
                .permutation(len(unpaired))
        for bi, chunk in enumerate(_batches(order, tcfg.paired_batch)):
            batch = [paired[int(i)] for i in chunk]
            aug_rng = np.random.default_rng([tcfg.seed, _S_AUGMENT, epoch, bi])
            drop_rng = np.random.default_rng([tcfg.seed, _S_DROPOUT, epoch, bi])
            report = paired_step(batch, params, mcfg, tcfg, aug_rng, drop_rng)
            lr = opt.step()
            opt.zero_grad()
            step += 1
            emit(_log_line(step, epoch, report, lr))

            if uorder is not None:
                ubatch = [unpaired[int(uorder[(upos + j) % len(unpaired)])]
                          for j in range(tcfg.unpaired_batch)]
                upos += tcfg.unpaired_batch
                udrop_rng = np.random.default_rng([tcfg.seed, _S_UDROPOUT, epoch, bi])
                ureport = unpaired_step(ubatch, params, mcfg, tcfg, udrop_rng)
                lr = opt.step()
                opt.zero_grad()
                step += 1
                emit(_log_line(step, epoch, ureport, lr))

        history.append(EpochStats(epoch=epoch, dev_ter=_dev_ter(params, mcfg, dev)))
        trail.append(params.state_arrays())

    best = _select_best(history, min(tcfg.average_best_k, len(trail)))
    averaged = average_checkpoints([trail[e] for e in best])
    final = params.clone()
    final.load_state(averaged)
    return TrainResult(params=final, history=history, best_epochs=best, step_lines=lines)


def train_baseline(paired: list[PairedExample], dev: list[PairedExample],
                   mcfg: ModelConfig, tcfg: TrainConfig,
                   on_line: Callable[[str], None] | None = None) -> TrainResult:
    """Reference standard-CTC loop: paired speech CTC only, no text machinery.

    Kept as an independent loop (rather than a configuration of
    :func:`train`) so the zero-injection equivalence is a real check.
    """
    usable = [ex for ex in paired
              if ex.tokens and output_length(ex.feats.shape[0],
                                             mcfg.acoustic.downsample_factor)
              >= min_frames(ex.tokens)]
    if len(usable) != len(paired):
        logger.warning("dropped %d infeasible paired utterances of %d",
                       len(paired) - len(usable), len(paired))
    if not usable:
        raise DataError("no feasible paired utterances to train on")

    params = init_params(mcfg, np.random.default_rng([tcfg.seed, _S_INIT]))
    opt = Adam([params[n] for n in params.names()], peak_lr=tcfg.peak_lr,
               warmup_steps=tcfg.warmup_steps, grad_clip=tcfg.grad_clip)
    step = 0
    lines: list[str] = [LOG_HEADER]
    history: list[EpochStats] = []
    trail: list[dict[str, np.ndarray]] = []

    def emit(line: str) -> None:
        lines.append(line)
        if on_line is not None:
            on_line(line)

    for epoch in range(tcfg.epochs):
        order = np.random.default_rng([tcfg.seed, _S_SHUFFLE, epoch]).permutation(len(usable))
        for bi, chunk in enumerate(_batches(order, tcfg.paired_batch)):
            batch = [usable[int(i)] for i in chunk]
            aug_rng = np.random.default_rng([tcfg.seed, _S_AUGMENT, epoch, bi])
            drop_rng = np.random.default_rng([tcfg.seed, _S_DROPOUT, epoch, bi])
            b = len(batch)
            total = 0.0
            for ex in batch:
                feats = spec_augment(ex.feats, tcfg.specaugment, aug_rng)
                _, l_main = _speech_branch_loss(feats, ex.tokens, params, mcfg, drop_rng)
                total += l_main.item()
                backward(scale(l_main, 1.0 / b))
            lr = opt.step()
            opt.zero_grad()
            step += 1
            emit(_log_line(step, epoch, LossReport.compose(tcfg.alpha, l_main=total / b), lr))

        history.append(EpochStats(epoch=epoch, dev_ter=_dev_ter(params, mcfg, dev)))
        trail.append(params.state_arrays())

    best = _select_best(history, min(tcfg.average_best_k, len(trail)))
    averaged = average_checkpoints([trail[e] for e in best])
    final = params.clone()
    final.load_state(averaged)
    return TrainResult(params=final, history=history, best_epochs=best, step_lines=lines)
