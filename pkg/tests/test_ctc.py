"""CTC loss against the enumeration oracle, plus decoding contracts."""

import itertools

import numpy as np
import pytest

from fastinject.ctc import (CtcTarget, beam_search, collapse_path, ctc_brute_force,
                            ctc_log_likelihood, ctc_loss, greedy_decode, min_frames,
                            prefix_beam_marginals)
from fastinject.errors import InfeasibleTargetError, ShapeError
from fastinject.tensor import Tensor, check_gradients, log_softmax_rows


def random_instance(rng, t_max=6, v_max=4, tgt_max=3):
    while True:
        t_len = int(rng.integers(1, t_max + 1))
        vocab = int(rng.integers(2, v_max + 1))
        tgt_len = int(rng.integers(1, tgt_max + 1))
        target = [int(x) for x in rng.integers(1, vocab, size=tgt_len)]
        if t_len >= min_frames(target):
            logits = rng.standard_normal((t_len, vocab)) * 2
            return logits, CtcTarget(target, blank_id=0)


class TestCtcLoss:
    def test_uniform_two_frame_case(self):
        # 4 equally likely frame-label paths, 3 collapse to the target
        loss = ctc_loss(Tensor(np.zeros((2, 2))), CtcTarget([1], 0))
        np.testing.assert_allclose(loss.item(), -np.log(3.0 / 4.0), atol=1e-12)

    def test_single_forced_path(self):
        logits = Tensor(np.array([[-200.0, 200.0]]))
        loss = ctc_loss(logits, CtcTarget([1], 0))
        assert loss.item() < 1e-12

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            logits, target = random_instance(rng)
            loss = ctc_loss(Tensor(logits), target)
            logp = log_softmax_rows(Tensor(logits)).data
            prob = ctc_brute_force(logp, target)
            np.testing.assert_allclose(loss.item(), -np.log(prob), atol=1e-9)

    def test_gradients(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            logits, target = random_instance(rng)
            err = check_gradients(lambda x: ctc_loss(x, target), Tensor(logits))
            assert err < 1e-4

    def test_infeasible_target_typed_error(self):
        with pytest.raises(InfeasibleTargetError):
            ctc_loss(Tensor(np.zeros((2, 3))), CtcTarget([1, 2, 1], 0))
        # adjacent repeats need a separating blank frame
        with pytest.raises(InfeasibleTargetError):
            ctc_loss(Tensor(np.zeros((2, 3))), CtcTarget([1, 1], 0))

    def test_blank_in_target_rejected(self):
        with pytest.raises(ShapeError):
            CtcTarget([0, 1], 0)

    def test_monotone_in_path_label_scores(self):
        """Raising the emission log-prob of any label that lies on a feasible
        alignment can only raise the target probability."""
        rng = np.random.default_rng(9)
        for _ in range(30):
            logits, target = random_instance(rng, t_max=5, v_max=3, tgt_max=2)
            logp = log_softmax_rows(Tensor(logits)).data
            base = ctc_log_likelihood(logp, target)
            t = int(rng.integers(0, logp.shape[0]))
            # a label guaranteed on some alignment: blank or first target token
            for lab in (0, target.token_ids[0]):
                bumped = logp.copy()
                bumped[t, lab] += 0.1
                assert ctc_log_likelihood(bumped, target) >= base - 1e-12

    def test_total_probability_partitions(self):
        """Summing exp(log-likelihood) over every possible target of length
        up to T accounts for all probability mass."""
        rng = np.random.default_rng(10)
        logits = rng.standard_normal((3, 3))
        logp = log_softmax_rows(Tensor(logits)).data
        total = 0.0
        for length in range(0, 4):
            for target in itertools.product((1, 2), repeat=length):
                if 3 < min_frames(list(target)):
                    continue
                total += np.exp(ctc_log_likelihood(logp, CtcTarget(list(target), 0)))
        np.testing.assert_allclose(total, 1.0, atol=1e-9)


class TestBruteForce:
    def test_infeasible_probability_zero(self):
        logp = np.log(np.full((2, 3), 1 / 3))
        assert ctc_brute_force(logp, CtcTarget([1, 2, 1], 0)) == 0.0

    def test_uniform_case(self):
        logp = np.log(np.full((2, 2), 0.5))
        np.testing.assert_allclose(ctc_brute_force(logp, CtcTarget([1], 0)), 0.75)

    def test_too_large_rejected(self):
        with pytest.raises(ShapeError):
            ctc_brute_force(np.zeros((30, 4)), CtcTarget([1], 0))


class TestGreedy:
    def test_collapse_repeats(self):
        logits = np.array([[0, 5, 0], [0, 5, 0], [5, 0, 0], [0, 0, 5]], dtype=float)
        assert greedy_decode(logits, 0) == [1, 2]

    def test_all_blank(self):
        logits = np.array([[5, 0], [5, 0]], dtype=float)
        assert greedy_decode(logits, 0) == []

    def test_blank_separates_repeats(self):
        logits = np.array([[0, 5], [5, 0], [0, 5]], dtype=float)
        assert greedy_decode(logits, 0) == [1, 1]

    def test_ties_break_to_lowest_id(self):
        logits = np.zeros((1, 3))
        assert greedy_decode(logits, 2) == [0]

    def test_collapse_path_rule(self):
        assert collapse_path([1, 1, 0, 2, 2, 0, 0, 2], 0) == (1, 2, 2)


class _FixedLm:
    """Deterministic stub scorer with arbitrary nonuniform scores."""

    def __init__(self, vocab):
        self.vocab = vocab

    def start(self):
        return ()

    def next_logprobs(self, state):
        scores = np.arange(self.vocab, dtype=float) * -0.3 - 1.0
        return scores - np.log(np.exp(scores).sum())

    def advance(self, state, token):
        return state + (token,)


class TestBeamSearch:
    def test_beam_one_no_lm_equals_greedy(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            logits = rng.standard_normal((int(rng.integers(1, 8)),
                                          int(rng.integers(2, 6))))
            assert beam_search(logits, 1, 0) == greedy_decode(logits, 0)

    def test_zero_lm_weight_is_lm_independent(self):
        rng = np.random.default_rng(12)
        for _ in range(25):
            logits = rng.standard_normal((5, 4))
            without = beam_search(logits, 4, 0)
            with_lm = beam_search(logits, 4, 0, lm=_FixedLm(4), lm_weight=0.0)
            assert without == with_lm

    def test_exhaustive_beam_matches_path_enumeration(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            logits = rng.standard_normal((3, 3))
            marginals = prefix_beam_marginals(logits, 0)
            best = max(sorted(marginals), key=lambda k: marginals[k])
            assert tuple(beam_search(logits, 10 ** 4, 0)) == best

    def test_lm_fusion_changes_result(self):
        # two near-tied labels; LM strongly prefers the higher id
        logits = np.array([[0.0, 1.0, 0.95]])

        class Prefer2:
            def start(self):
                return ()

            def next_logprobs(self, state):
                return np.log(np.array([1e-6, 1e-6, 1.0 - 2e-6]))

            def advance(self, state, token):
                return state + (token,)

        plain = beam_search(logits, 3, 0)
        fused = beam_search(logits, 3, 0, lm=Prefer2(), lm_weight=1.0)
        assert plain == [1] and fused == [2]

    def test_pruning_keeps_argmax(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            logits = rng.standard_normal((6, 10))
            full = beam_search(logits, 4, 0)
            pruned = beam_search(logits, 4, 0, prune_tokens=9)
            assert full == pruned

    def test_beam_must_be_positive(self):
        with pytest.raises(ShapeError):
            beam_search(np.zeros((2, 2)), 0, 0)
