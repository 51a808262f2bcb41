"""Offline text preparation: lookup, silence, upsampling, corpus files."""

import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastinject.errors import ConfigError, DataError, OovError
from fastinject.text import (CORPUS_HEADER, Lexicon, PhoneSequence, UpsampleConfig,
                             insert_silence, phonemize, prepare_sequence,
                             prepare_unpaired_corpus, read_lexicon,
                             read_prepared_corpus, upsample, utterance_rng,
                             write_lexicon)

SIL = 9


@pytest.fixture
def lex():
    return Lexicon(entries={"ab": [0, 1], "c": [2], "dd": [3, 3]},
                   phone_inventory=list(range(10)), sil_id=SIL)


class TestPhonemize:
    def test_empty_text(self, lex):
        assert phonemize("", lex).ids == []

    def test_single_word(self, lex):
        assert phonemize("ab", lex).ids == [0, 1]

    def test_concatenation(self, lex):
        assert phonemize("ab ab", lex).ids == [0, 1, 0, 1]

    def test_oov_names_word(self, lex):
        with pytest.raises(OovError) as err:
            phonemize("ab zz", lex)
        assert "zz" in str(err.value)


class TestInsertSilence:
    def test_prob_zero_unchanged(self, lex, rng):
        p = phonemize("ab c", lex)
        out = insert_silence(p, SIL, 0.0, rng)
        assert out.ids == p.ids

    def test_prob_one_brackets_words(self, lex, rng):
        p = phonemize("ab", lex)
        out = insert_silence(p, SIL, 1.0, rng)
        assert out.ids == [SIL, 0, 1, SIL]

    def test_phones_preserved_in_order(self, lex, rng):
        p = phonemize("ab c dd", lex)
        out = insert_silence(p, SIL, 0.7, rng)
        assert [i for i in out.ids if i != SIL] == p.ids

    def test_monte_carlo_rate(self, lex):
        rng = np.random.default_rng(0)
        p = phonemize("ab", lex)   # 3 boundaries per call
        inserted = 0
        trials = 34000             # > 1e5 boundaries total
        for _ in range(trials):
            out = insert_silence(p, SIL, 0.25, rng)
            inserted += sum(1 for i in out.ids if i == SIL)
        rate = inserted / (3 * trials)
        assert abs(rate - 0.25) < 0.01

    def test_bad_probability(self, lex, rng):
        with pytest.raises(ConfigError):
            insert_silence(phonemize("ab", lex), SIL, 1.5, rng)


class TestUpsample:
    def test_degenerate_gaussian(self, rng):
        cfg = UpsampleConfig(mean=3.0, std=0.0)
        out = upsample(PhoneSequence([0, 1], "ab"), cfg, rng)
        assert out.ids == [0, 0, 0, 1, 1, 1]
        assert out.repeat_counts == [3, 3]

    def test_monte_carlo_mean(self):
        cfg = UpsampleConfig(mean=4.0, std=1.0, min_repeats=1)
        rng = np.random.default_rng(1)
        total = 0
        n = 100000
        out = upsample(PhoneSequence([0] * n, "x"), cfg, rng)
        total = sum(out.repeat_counts)
        assert abs(total / n - 4.0) < 0.05

    def test_same_seed_identical(self):
        cfg = UpsampleConfig(mean=4.0, std=1.5)
        p = PhoneSequence([0, 1, 2, 3], "x")
        a = upsample(p, cfg, np.random.default_rng(42))
        b = upsample(p, cfg, np.random.default_rng(42))
        assert a.ids == b.ids and a.repeat_counts == b.repeat_counts

    def test_min_repeats_respected(self):
        cfg = UpsampleConfig(mean=1.0, std=3.0, min_repeats=1)
        out = upsample(PhoneSequence(list(range(50)), "x"), cfg,
                       np.random.default_rng(3))
        assert min(out.repeat_counts) >= 1

    def test_empty_rejected(self, rng):
        with pytest.raises(DataError):
            upsample(PhoneSequence([], ""), UpsampleConfig(), rng)

    @given(ids=st.lists(st.integers(0, 8), min_size=1, max_size=30),
           seed=st.integers(0, 2 ** 20))
    @settings(max_examples=60, deadline=None)
    def test_collapse_recovers_input(self, ids, seed):
        cfg = UpsampleConfig(mean=3.0, std=1.2)
        out = upsample(PhoneSequence(list(ids), "x"), cfg,
                       np.random.default_rng(seed))
        assert out.collapse() == list(ids)


class TestUpsampleConfig:
    @pytest.mark.parametrize("kwargs", [
        {"min_repeats": 0}, {"mean": 0.5, "min_repeats": 1},
        {"std": -1.0}, {"silence_prob": 1.5},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            UpsampleConfig(**kwargs)


class TestPreparedCorpus:
    def test_empty_corpus_has_header(self, lex, tmp_path):
        path = tmp_path / "out.fjt"
        n = prepare_unpaired_corpus([], lex, UpsampleConfig(), {"ab": 1}, path)
        assert n == 0
        assert path.read_text() == CORPUS_HEADER + "\n"

    def test_degenerate_record_length(self, lex, tmp_path):
        cfg = UpsampleConfig(mean=3.0, std=0.0, silence_prob=0.0)
        path = tmp_path / "out.fjt"
        prepare_unpaired_corpus([("u0", "ab c")], lex, cfg, {"ab": 1, "c": 2}, path)
        records = read_prepared_corpus(path)
        assert records == [("u0", [0, 0, 0, 1, 1, 1, 2, 2, 2], [1, 2])]

    def test_rerun_byte_identical(self, lex, tmp_path):
        cfg = UpsampleConfig(mean=4.0, std=1.0, seed=11)
        texts = [(f"u{i}", "ab c dd") for i in range(20)]
        vocab = {"ab": 1, "c": 2, "dd": 3}
        h = []
        for name in ("a.fjt", "b.fjt"):
            path = tmp_path / name
            prepare_unpaired_corpus(texts, lex, cfg, vocab, path)
            h.append(hashlib.sha256(path.read_bytes()).hexdigest())
        assert h[0] == h[1]

    def test_streams_decorrelate_files(self, lex, tmp_path):
        cfg = UpsampleConfig(mean=4.0, std=1.0, seed=11)
        texts = [(f"u{i}", "ab c dd") for i in range(10)]
        vocab = {"ab": 1, "c": 2, "dd": 3}
        prepare_unpaired_corpus(texts, lex, cfg, vocab, tmp_path / "a.fjt", stream=1)
        prepare_unpaired_corpus(texts, lex, cfg, vocab, tmp_path / "b.fjt", stream=2)
        assert (tmp_path / "a.fjt").read_bytes() != (tmp_path / "b.fjt").read_bytes()

    def test_oov_propagates(self, lex, tmp_path):
        with pytest.raises(OovError):
            prepare_unpaired_corpus([("u0", "zz")], lex, UpsampleConfig(),
                                    {"zz": 1}, tmp_path / "x.fjt")

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.fjt"
        path.write_text("not a header\n")
        with pytest.raises(DataError):
            read_prepared_corpus(path)


def test_lexicon_round_trip(lex, tmp_path):
    path = tmp_path / "lexicon.txt"
    write_lexicon(lex, path)
    back = read_lexicon(path, lex.phone_inventory, lex.sil_id)
    assert back.entries == lex.entries


def test_lexicon_validation():
    with pytest.raises(ConfigError):
        Lexicon(entries={"a": [99]}, phone_inventory=[0, 1], sil_id=1)
    with pytest.raises(ConfigError):
        Lexicon(entries={"a": [1]}, phone_inventory=[0, 1], sil_id=1)


def test_prepare_sequence_deterministic(lex):
    cfg = UpsampleConfig(seed=5)
    a = prepare_sequence("ab c", lex, cfg, utterance_rng(5, 0))
    b = prepare_sequence("ab c", lex, cfg, utterance_rng(5, 0))
    assert a.ids == b.ids
