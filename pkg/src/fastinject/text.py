"""Offline text preparation: phonemization, silence insertion, upsampling.

Everything here runs before training (data preprocessing); the training
loop only ever reads the prepared-corpus files written by
:func:`prepare_unpaired_corpus`.

File formats
------------
Lexicon: one ``word<TAB>phone phone ...`` entry per line, UTF-8, lines
starting with ``#`` ignored.

Prepared corpus: header line ``#fastinject-text v1`` then one record per
utterance: ``utt_id<TAB>space-separated upsampled phone ids<TAB>
space-separated target token ids``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, OovError

CORPUS_HEADER = "#fastinject-text v1"


@dataclass
class Lexicon:
    """Word-to-phone-sequence map over a fixed phone inventory.

    ``sil_id`` is part of the inventory but never produced by word lookup;
    it only enters sequences through silence insertion.
    """

    entries: dict[str, list[int]]
    phone_inventory: list[int]
    sil_id: int

    def __post_init__(self) -> None:
        inventory = set(self.phone_inventory)
        if self.sil_id not in inventory:
            raise ConfigError(f"silence id {self.sil_id} missing from phone inventory")
        for word, phones in self.entries.items():
            bad = [p for p in phones if p not in inventory]
            if bad:
                raise ConfigError(f"lexicon entry {word!r} uses unknown phone ids {bad}")
            if self.sil_id in phones:
                raise ConfigError(f"lexicon entry {word!r} must not contain the silence id")


@dataclass
class PhoneSequence:
    ids: list[int]
    source_text: str
    # Word-boundary positions (indices into ids where a word starts/ends),
    # kept so silence insertion can target boundaries only.
    boundaries: list[int] = field(default_factory=list)


@dataclass
class UpsampledPhoneSequence:
    ids: list[int]
    repeat_counts: list[int]

    def collapse(self) -> list[int]:
        """Undo the upsampling using the recorded per-phone counts."""
        out = []
        pos = 0
        for count in self.repeat_counts:
            run = self.ids[pos:pos + count]
            if len(set(run)) != 1:
                raise DataError("repeat_counts inconsistent with ids")
            out.append(run[0])
            pos += count
        if pos != len(self.ids):
            raise DataError("repeat_counts do not cover the id sequence")
        return out


@dataclass
class UpsampleConfig:
    """Gaussian random-repetition settings.

    Repeats per phone are max(min_repeats, round(N(mean, std**2))), with
    round-half-away-from-zero; silence is inserted at word boundaries with
    probability ``silence_prob`` before upsampling.
    """

    mean: float = 4.0
    std: float = 1.0
    min_repeats: int = 1
    silence_prob: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.min_repeats < 1:
            raise ConfigError(f"min_repeats must be >= 1, got {self.min_repeats}")
        if self.mean < self.min_repeats:
            raise ConfigError(f"mean ({self.mean}) must be >= min_repeats ({self.min_repeats})")
        if self.std < 0:
            raise ConfigError(f"std must be >= 0, got {self.std}")
        if not 0.0 <= self.silence_prob <= 1.0:
            raise ConfigError(f"silence_prob must be in [0, 1], got {self.silence_prob}")


def phonemize(text: str, lex: Lexicon) -> PhoneSequence:
    """Concatenate per-word phone sequences; unknown words raise OovError."""
    ids: list[int] = []
    boundaries = [0]
    for word in text.split():
        if word not in lex.entries:
            raise OovError(f"word {word!r} not in lexicon")
        ids.extend(lex.entries[word])
        boundaries.append(len(ids))
    return PhoneSequence(ids=ids, source_text=text, boundaries=boundaries)


def insert_silence(p: PhoneSequence, sil_id: int, prob: float,
                   rng: np.random.Generator) -> PhoneSequence:
    """Insert SIL independently at each word boundary, start and end included.

    Original phones are preserved in order; with prob=1 every word is
    bracketed by silence.
    """
    if not 0.0 <= prob <= 1.0:
        raise ConfigError(f"silence probability must be in [0, 1], got {prob}")
    if prob == 0.0 or not p.ids:
        return PhoneSequence(ids=list(p.ids), source_text=p.source_text,
                             boundaries=list(p.boundaries))
    boundaries = set(p.boundaries) if p.boundaries else {0, len(p.ids)}
    out: list[int] = []
    new_bounds: list[int] = []
    for pos in range(len(p.ids) + 1):
        if pos in boundaries:
            new_bounds.append(len(out))
            if rng.random() < prob:
                out.append(sil_id)
        if pos < len(p.ids):
            out.append(p.ids[pos])
    return PhoneSequence(ids=out, source_text=p.source_text, boundaries=new_bounds)


def upsample(p: PhoneSequence, cfg: UpsampleConfig,
             rng: np.random.Generator) -> UpsampledPhoneSequence:
    """Repeat each phone a Gaussian-sampled number of times.

    Deterministic given the generator state; the count distribution is
    max(min_repeats, round_half_away(N(mean, std))).
    """
    if not p.ids:
        raise DataError("cannot upsample an empty phone sequence")
    samples = rng.normal(cfg.mean, cfg.std, size=len(p.ids))
    # round half away from zero, then clamp
    rounded = np.sign(samples) * np.floor(np.abs(samples) + 0.5)
    counts = np.maximum(cfg.min_repeats, rounded.astype(np.int64))
    ids: list[int] = []
    for phone, count in zip(p.ids, counts):
        ids.extend([phone] * int(count))
    return UpsampledPhoneSequence(ids=ids, repeat_counts=[int(c) for c in counts])


def prepare_sequence(text: str, lex: Lexicon, cfg: UpsampleConfig,
                     rng: np.random.Generator) -> UpsampledPhoneSequence:
    """Full offline pipeline for one utterance: phonemize, SIL, upsample."""
    phones = phonemize(text, lex)
    if not phones.ids:
        raise DataError(f"empty text cannot be prepared: {text!r}")
    with_sil = insert_silence(phones, lex.sil_id, cfg.silence_prob, rng)
    return upsample(with_sil, cfg, rng)


def utterance_rng(base_seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Per-utterance stream so corpora can be prepared in any order."""
    return np.random.default_rng([base_seed, stream, index])


def prepare_unpaired_corpus(texts: list[tuple[str, str]], lex: Lexicon,
                            cfg: UpsampleConfig, vocab: dict[str, int],
                            out_path: str | Path, stream: int = 0) -> int:
    """Write prepared records for (utt_id, text) pairs; returns record count.

    Target token ids come from ``vocab`` over the original words, not from
    the phones: the unpaired branch trains the same output units as speech.
    ``stream`` decorrelates files prepared from the same base seed.
    """
    out_path = Path(out_path)
    lines = [CORPUS_HEADER]
    for index, (utt_id, text) in enumerate(texts):
        rng = utterance_rng(cfg.seed, index, stream)
        seq = prepare_sequence(text, lex, cfg, rng)
        tokens = []
        for word in text.split():
            if word not in vocab:
                raise OovError(f"word {word!r} not in output vocabulary")
            tokens.append(vocab[word])
        lines.append("{}\t{}\t{}".format(
            utt_id,
            " ".join(str(i) for i in seq.ids),
            " ".join(str(t) for t in tokens),
        ))
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return len(texts)


def read_prepared_corpus(path: str | Path) -> list[tuple[str, list[int], list[int]]]:
    """Read records written by :func:`prepare_unpaired_corpus`."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"prepared corpus not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CORPUS_HEADER:
        raise DataError(f"{path}: missing prepared-corpus header {CORPUS_HEADER!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
        utt_id, phone_str, token_str = parts
        phones = [int(x) for x in phone_str.split()] if phone_str else []
        tokens = [int(x) for x in token_str.split()] if token_str else []
        records.append((utt_id, phones, tokens))
    return records


def write_lexicon(lex: Lexicon, path: str | Path, phone_names: dict[int, str] | None = None) -> None:
    path = Path(path)
    lines = ["# word<TAB>phone ids"]
    for word in sorted(lex.entries):
        lines.append("{}\t{}".format(word, " ".join(str(p) for p in lex.entries[word])))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_lexicon(path: str | Path, phone_inventory: list[int], sil_id: int) -> Lexicon:
    path = Path(path)
    if not path.exists():
        raise DataError(f"lexicon file not found: {path}")
    entries: dict[str, list[int]] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected word<TAB>phones")
        word, phone_str = parts
        entries[word] = [int(x) for x in phone_str.split()]
    return Lexicon(entries=entries, phone_inventory=phone_inventory, sil_id=sil_id)
