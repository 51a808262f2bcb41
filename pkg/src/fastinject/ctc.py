"""CTC loss, brute-force oracle, greedy decoding and prefix beam search.

The loss marginalizes over every frame-level alignment that collapses
(dedup adjacent, then drop blanks) to the target, via the log-space forward
recursion over the blank-interleaved label sequence. All probability
arithmetic stays in log space; "minus infinity" is the ``NEG_INF`` sentinel
from the tensor engine (large negative, exp underflows to exactly 0).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .errors import InfeasibleTargetError, ShapeError
from .tensor import NEG_INF, Tensor, custom_op, log_softmax_rows


@dataclass
class CtcTarget:
    """Output-unit id sequence (no blanks) plus the blank id."""

    token_ids: list[int]
    blank_id: int

    def __post_init__(self) -> None:
        if self.blank_id in self.token_ids:
            raise ShapeError(f"blank id {self.blank_id} must not appear in the target")


def min_frames(token_ids: Sequence[int]) -> int:
    """Fewest frames that can realize the target: its length plus one blank
    between each adjacent repeated pair."""
    repeats = sum(1 for a, b in zip(token_ids, token_ids[1:]) if a == b)
    return len(token_ids) + repeats


def _extended_labels(token_ids: Sequence[int], blank_id: int) -> list[int]:
    ext = [blank_id]
    for tok in token_ids:
        ext.append(tok)
        ext.append(blank_id)
    return ext


def _skip_allowed(ext: list[int], blank_id: int) -> np.ndarray:
    """State indices that may be entered by a two-step (skip) transition:
    non-blank labels differing from the label two states back."""
    return np.array([s for s in range(2, len(ext))
                     if ext[s] != blank_id and ext[s] != ext[s - 2]], dtype=np.int64)


def _forward_log_alphas(logp: np.ndarray, ext: list[int], blank_id: int) -> np.ndarray:
    t_len = logp.shape[0]
    s_len = len(ext)
    emis = logp[:, ext]
    alpha = np.empty((t_len, s_len))
    alpha[0] = NEG_INF
    alpha[0, 0] = emis[0, 0]
    if s_len > 1:
        alpha[0, 1] = emis[0, 1]
    skip_idx = _skip_allowed(ext, blank_id)
    merged = np.empty(s_len)
    for t in range(1, t_len):
        prev = alpha[t - 1]
        merged[0] = prev[0]
        np.logaddexp(prev[1:], prev[:-1], out=merged[1:])
        if skip_idx.size:
            merged[skip_idx] = np.logaddexp(merged[skip_idx], prev[skip_idx - 2])
        np.add(merged, emis[t], out=alpha[t])
    return alpha


def _backward_log_betas(logp: np.ndarray, ext: list[int], blank_id: int) -> np.ndarray:
    t_len = logp.shape[0]
    s_len = len(ext)
    emis = logp[:, ext]
    beta = np.empty((t_len, s_len))
    beta[t_len - 1] = NEG_INF
    beta[t_len - 1, s_len - 1] = emis[t_len - 1, s_len - 1]
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = emis[t_len - 1, s_len - 2]
    skip_from = _skip_allowed(ext, blank_id) - 2   # states that may skip forward
    merged = np.empty(s_len)
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        merged[s_len - 1] = nxt[s_len - 1]
        np.logaddexp(nxt[:-1], nxt[1:], out=merged[:-1])
        if skip_from.size:
            merged[skip_from] = np.logaddexp(merged[skip_from], nxt[skip_from + 2])
        np.add(merged, emis[t], out=beta[t])
    return beta


def ctc_log_likelihood(logp: np.ndarray, target: CtcTarget) -> float:
    """Log of the total alignment probability under per-frame log-probs."""
    ext = _extended_labels(target.token_ids, target.blank_id)
    alpha = _forward_log_alphas(logp, ext, target.blank_id)
    s_len = len(ext)
    ll = alpha[-1, s_len - 1]
    if s_len > 1:
        ll = np.logaddexp(ll, alpha[-1, s_len - 2])
    return float(ll)


def ctc_loss(logits: Tensor, target: CtcTarget) -> Tensor:
    """Negative log-probability of the target given [T, V] logits.

    Differentiable w.r.t. the logits. Raises InfeasibleTargetError when the
    target cannot fit in T frames (that is a structural condition, reported
    before any arithmetic runs).
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"ctc_loss expects [T, V] logits, got shape {logits.shape}")
    t_len, vocab = logits.shape
    if vocab <= 1:
        raise ShapeError(f"ctc_loss needs at least 2 output units, got {vocab}")
    if any(tok < 0 or tok >= vocab for tok in target.token_ids):
        raise ShapeError(f"target ids out of range for vocabulary of size {vocab}")
    need = min_frames(target.token_ids)
    if t_len < need:
        raise InfeasibleTargetError(
            f"target of length {len(target.token_ids)} needs at least {need} frames, got {t_len}")

    logp = log_softmax_rows(logits)
    ext = _extended_labels(target.token_ids, target.blank_id)
    alpha = _forward_log_alphas(logp.data, ext, target.blank_id)
    s_len = len(ext)
    ll = alpha[-1, s_len - 1]
    if s_len > 1:
        ll = np.logaddexp(ll, alpha[-1, s_len - 2])
    logp_data = logp.data

    def bw(out: Tensor):
        def run():
            beta = _backward_log_betas(logp_data, ext, target.blank_id)
            # occupancy[t, s]: log P(paths through state s at frame t);
            # alpha and beta both include the frame-t emission, remove one
            occ = alpha + beta - logp_data[:, ext]
            w = np.exp(occ - ll)
            grad = np.zeros_like(logp_data)
            for s, lab in enumerate(ext):
                grad[:, lab] += w[:, s]
            logp._accumulate(-float(out.grad.reshape(())) * grad)
        return run

    return custom_op(-ll, (logp,), bw)


def ctc_brute_force(logprobs: np.ndarray, target: CtcTarget, max_paths: int = 10 ** 6) -> float:
    """Total target probability by enumerating all V**T frame-label paths.

    Test oracle for the forward recursion; refuses instances with more than
    ``max_paths`` paths. Returns the probability (not the log).
    """
    logprobs = np.asarray(logprobs, dtype=np.float64)
    t_len, vocab = logprobs.shape
    if vocab ** t_len > max_paths:
        raise ShapeError(f"brute force limited to {max_paths} paths, got {vocab}**{t_len}")
    want = tuple(target.token_ids)
    total = 0.0
    for path in itertools.product(range(vocab), repeat=t_len):
        if collapse_path(path, target.blank_id) == want:
            total += float(np.exp(sum(logprobs[t, k] for t, k in enumerate(path))))
    return total


def collapse_path(path: Sequence[int], blank_id: int) -> tuple[int, ...]:
    """CTC collapse: merge adjacent duplicates, then remove blanks."""
    out = []
    prev: Optional[int] = None
    for label in path:
        if label != prev:
            if label != blank_id:
                out.append(label)
            prev = label
    return tuple(out)


def greedy_decode(logits: np.ndarray, blank_id: int) -> list[int]:
    """Per-frame argmax followed by CTC collapse; ties go to the lowest id."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"greedy_decode expects [T, V] logits, got shape {logits.shape}")
    best = logits.argmax(axis=1)
    return list(collapse_path(best.tolist(), blank_id))


@dataclass
class DecodeHypothesis:
    """One beam entry: a token prefix with split blank/non-blank mass."""

    prefix: tuple[int, ...]
    logp_blank: float
    logp_nonblank: float
    lm_state: Any = None
    fused_score: float = NEG_INF
    lm_logp: float = 0.0

    @property
    def logp_total(self) -> float:
        return float(np.logaddexp(self.logp_blank, self.logp_nonblank)) \
            if self.logp_blank > NEG_INF and self.logp_nonblank > NEG_INF \
            else max(self.logp_blank, self.logp_nonblank)


def beam_search(logits: np.ndarray, beam: int, blank_id: int,
                lm: Any = None, lm_weight: float = 0.0,
                prune_tokens: int | None = None) -> list[int]:
    """CTC prefix beam search with optional shallow LM fusion.

    Hypotheses are merged by prefix; ranking uses
    ``log P_ctc(prefix) + lm_weight * log P_lm(prefix)`` where the LM term
    is added on non-blank emissions only. ``beam=1`` without an effective LM
    is served by the exact greedy path (a single-hypothesis sum-merge search
    is strictly a degraded greedy, so the degenerate case short-circuits).

    ``prune_tokens`` caps the number of non-blank candidates considered per
    frame (by logit); None means all.
    """
    if beam < 1:
        raise ShapeError(f"beam must be >= 1, got {beam}")
    logits = np.asarray(logits, dtype=np.float64)
    use_lm = lm is not None and lm_weight != 0.0
    if beam == 1 and not use_lm:
        return greedy_decode(logits, blank_id)

    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    t_len, vocab = logp.shape

    lm_start = lm.start() if use_lm else None
    beams: dict[tuple[int, ...], DecodeHypothesis] = {
        (): DecodeHypothesis(prefix=(), logp_blank=0.0, logp_nonblank=NEG_INF,
                             lm_state=lm_start, lm_logp=0.0)
    }
    # per-prefix next-token LM log-prob vectors, computed once per prefix
    lm_next: dict[tuple[int, ...], np.ndarray] = {}

    def lm_vector(hyp: DecodeHypothesis) -> np.ndarray:
        vec = lm_next.get(hyp.prefix)
        if vec is None:
            vec = lm.next_logprobs(hyp.lm_state)
            lm_next[hyp.prefix] = vec
        return vec

    nonblank_ids = np.array([v for v in range(vocab) if v != blank_id])

    for t in range(t_len):
        frame = logp[t]
        if prune_tokens is not None and prune_tokens < nonblank_ids.size:
            order = np.argsort(frame[nonblank_ids])[::-1][:prune_tokens]
            candidates = nonblank_ids[order]
        else:
            candidates = nonblank_ids
        next_beams: dict[tuple[int, ...], DecodeHypothesis] = {}

        def bump(prefix, blank_part, nonblank_part, parent, emitted=None):
            hyp = next_beams.get(prefix)
            if hyp is None:
                if emitted is None:
                    lm_state, lm_logp = parent.lm_state, parent.lm_logp
                else:
                    if use_lm:
                        step = float(lm_vector(parent)[emitted])
                        lm_state = lm.advance(parent.lm_state, emitted)
                        lm_logp = parent.lm_logp + step
                    else:
                        lm_state, lm_logp = None, 0.0
                hyp = DecodeHypothesis(prefix=prefix, logp_blank=NEG_INF,
                                       logp_nonblank=NEG_INF,
                                       lm_state=lm_state, lm_logp=lm_logp)
                next_beams[prefix] = hyp
            if blank_part > NEG_INF:
                hyp.logp_blank = float(np.logaddexp(hyp.logp_blank, blank_part)) \
                    if hyp.logp_blank > NEG_INF else blank_part
            if nonblank_part > NEG_INF:
                hyp.logp_nonblank = float(np.logaddexp(hyp.logp_nonblank, nonblank_part)) \
                    if hyp.logp_nonblank > NEG_INF else nonblank_part

        for hyp in beams.values():
            total = hyp.logp_total
            # stay on this prefix via a blank frame
            bump(hyp.prefix, total + frame[blank_id], NEG_INF, hyp)
            for tok in candidates:
                tok = int(tok)
                lp = float(frame[tok])
                if hyp.prefix and tok == hyp.prefix[-1]:
                    # repeated label with no separating blank merges into the
                    # same prefix; only the post-blank mass extends it
                    bump(hyp.prefix, NEG_INF, hyp.logp_nonblank + lp, hyp)
                    if hyp.logp_blank > NEG_INF:
                        bump(hyp.prefix + (tok,), NEG_INF, hyp.logp_blank + lp, hyp, emitted=tok)
                else:
                    bump(hyp.prefix + (tok,), NEG_INF, total + lp, hyp, emitted=tok)

        for hyp in next_beams.values():
            hyp.fused_score = hyp.logp_total + lm_weight * hyp.lm_logp
        ranked = sorted(next_beams.values(), key=lambda h: (-h.fused_score, h.prefix))
        beams = {h.prefix: h for h in ranked[:beam]}

    best = min(beams.values(), key=lambda h: (-h.fused_score, h.prefix))
    return list(best.prefix)


def prefix_beam_marginals(logits: np.ndarray, blank_id: int) -> dict[tuple[int, ...], float]:
    """Exact collapse-output marginals by path enumeration; tiny instances only.

    Used by tests to cross-check beam scores against the total probability
    mass behind each prefix.
    """
    logits = np.asarray(logits, dtype=np.float64)
    t_len, vocab = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs: dict[tuple[int, ...], float] = {}
    for path in itertools.product(range(vocab), repeat=t_len):
        key = collapse_path(path, blank_id)
        p = float(np.exp(sum(logp[t, k] for t, k in enumerate(path))))
        probs[key] = probs.get(key, 0.0) + p
    return probs
