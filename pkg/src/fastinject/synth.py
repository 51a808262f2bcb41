"""Synthetic experiment generator: paired speech, multi-domain text, domain shift.

The generative family is deliberately simple: every phone has a base
prototype vector, every domain applies a well-conditioned affine transform
to the prototypes, and an utterance's features are its phones' transformed
prototypes repeated for a Gaussian-sampled duration plus white noise. Word
sequences are drawn from per-domain weighted pools, so both the acoustics
and the text distribution shift across domains, and a closed-form
nearest-prototype oracle exists to validate learnability.

Bundle layout (all deterministic given the seed):

* ``vocab.txt``: one word per line; token id = line index + 1, blank = 0;
* ``lexicon.txt``: ``word<TAB>phone ids``;
* ``<split>.trans.txt``: ``utt_id<TAB>text`` per line;
* ``<split>.feats.bin`` / ``.idx``: binary feature records plus manifest;
* ``manifest.json``: split table, domain descriptions, config echo.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .text import Lexicon

SOURCE_DOMAIN = "read"
TARGET_DOMAINS = ("podcast", "lecture")
UNSEEN_DOMAIN = "commands"
ALL_DOMAINS = (SOURCE_DOMAIN,) + TARGET_DOMAINS + (UNSEEN_DOMAIN,)


@dataclass
class DomainSpec:
    """Per-domain acoustic transform and word-sequence distribution."""

    name: str
    phone_prototypes: np.ndarray      # [phones incl. silence, feature_dim]
    affine_matrix: np.ndarray         # [feature_dim, feature_dim]
    affine_offset: np.ndarray         # [feature_dim]
    duration_mean: float
    duration_std: float
    noise_std: float
    word_weights: np.ndarray          # multinomial over word ids

    def __post_init__(self) -> None:
        cond = float(np.linalg.cond(self.affine_matrix))
        if not np.isfinite(cond) or cond > 100.0:
            raise ConfigError(
                f"domain {self.name!r} affine transform badly conditioned (cond={cond:.1f})")
        total = float(self.word_weights.sum())
        if not np.isclose(total, 1.0):
            raise ConfigError(f"domain {self.name!r} word weights sum to {total}, expected 1")

    def transformed_prototypes(self) -> np.ndarray:
        return self.phone_prototypes @ self.affine_matrix.T + self.affine_offset


@dataclass
class Utterance:
    utt_id: str
    domain: str
    words: list[str]
    phone_ids: list[int]                  # true sequence incl. sampled silences
    feats: np.ndarray | None = None       # [T, feature_dim] for paired/eval data

    @property
    def text(self) -> str:
        return " ".join(self.words)


@dataclass
class ExperimentConfig:
    """Knobs for the default desk-scale experiment."""

    seed: int = 0
    num_phones: int = 40              # non-silence phones; silence id = num_phones
    vocab_size: int = 200             # words; output units = words + blank (id 0)
    feature_dim: int = 16
    word_min_phones: int = 2
    word_max_phones: int = 4
    utt_min_words: int = 3
    utt_max_words: int = 7
    paired_utterances: int = 500
    dev_utterances: int = 40
    test_utterances: int = 50
    unpaired_ratio: float = 20.0      # unpaired texts per paired transcript
    duration_mean: float = 3.5
    duration_std: float = 0.8
    noise_std: float = 0.25
    silence_prob: float = 0.25
    target_affine_scale: float = 0.12
    unseen_affine_scale: float = 0.18
    pool_fraction: float = 0.35       # vocabulary share in each non-source window
    zipf_exponent: float = 0.5
    # A slice of the vocabulary comes in near-homophone pairs: a source-common
    # head word and a rare twin differing in one phone whose prototype sits
    # ``twin_phone_gap`` away. Per-frame acoustics then under-determine the
    # word and the learned sequence prior decides, which is the behaviour the
    # unpaired text is meant to correct.
    confusable_fraction: float = 0.12
    twin_phone_gap: float = 0.35

    @property
    def num_confusable_pairs(self) -> int:
        return int(round(self.confusable_fraction * self.vocab_size))

    @property
    def num_twin_phone_pairs(self) -> int:
        return max(2, self.num_phones // 6)

    @property
    def sil_id(self) -> int:
        return self.num_phones

    @property
    def blank_id(self) -> int:
        return 0

    def token_id(self, word_index: int) -> int:
        return word_index + 1

    @property
    def num_output_units(self) -> int:
        return self.vocab_size + 1


def _domain_weights(cfg: ExperimentConfig, domain: str,
                    drng: np.random.Generator) -> np.ndarray:
    """Word distribution for a domain.

    The source domain covers the whole vocabulary with frequency falling in
    word index, so every output unit has paired acoustic coverage and the
    confusable-pair tails sit deep in its tail. Each other domain
    concentrates on a window into the upper half of the vocabulary (words
    that are rare in paired speech, twins included), reweighted by a
    domain-specific permutation: sequence statistics shift while the unit
    inventory stays shared.
    """
    v = cfg.vocab_size
    weights = np.zeros(v)
    if domain == SOURCE_DOMAIN:
        ranks = np.arange(v, dtype=np.float64)
        weights[:] = (ranks + 3.0) ** (-cfg.zipf_exponent)
        return weights / weights.sum()

    size = max(1, int(round(cfg.pool_fraction * v)))
    starts = {
        TARGET_DOMAINS[0]: int(0.40 * v),
        TARGET_DOMAINS[1]: int(0.64 * v),
        UNSEEN_DOMAIN: int(0.50 * v),
    }
    pool = np.sort(np.arange(starts[domain], starts[domain] + size) % v)
    ranks = np.empty(pool.size)
    ranks[drng.permutation(pool.size)] = np.arange(pool.size)
    weights[pool] = (ranks + 3.0) ** (-cfg.zipf_exponent)
    return weights / weights.sum()


def make_prototypes(cfg: ExperimentConfig) -> np.ndarray:
    """Phone prototype vectors; twin phone pairs (2j, 2j+1) sit only
    ``twin_phone_gap`` apart so they are hard to separate under noise."""
    rng = np.random.default_rng([cfg.seed, 101])
    prototypes = rng.standard_normal((cfg.num_phones + 1, cfg.feature_dim))
    for j in range(cfg.num_twin_phone_pairs):
        direction = rng.standard_normal(cfg.feature_dim)
        direction /= np.linalg.norm(direction)
        prototypes[2 * j + 1] = prototypes[2 * j] + cfg.twin_phone_gap * direction
    return prototypes


def make_domain_specs(cfg: ExperimentConfig) -> dict[str, DomainSpec]:
    prototypes = make_prototypes(cfg)

    specs: dict[str, DomainSpec] = {}
    for index, name in enumerate(ALL_DOMAINS):
        drng = np.random.default_rng([cfg.seed, 103, index])
        if name == SOURCE_DOMAIN:
            eps = 0.0
        elif name == UNSEEN_DOMAIN:
            eps = cfg.unseen_affine_scale
        else:
            eps = cfg.target_affine_scale
        f = cfg.feature_dim
        perturb = drng.standard_normal((f, f)) / np.sqrt(f)
        matrix = np.eye(f) + eps * perturb
        offset = eps * drng.standard_normal(f)

        weights = _domain_weights(cfg, name, drng)

        specs[name] = DomainSpec(
            name=name,
            phone_prototypes=prototypes,
            affine_matrix=matrix,
            affine_offset=offset,
            duration_mean=cfg.duration_mean,
            duration_std=cfg.duration_std,
            noise_std=cfg.noise_std,
            word_weights=weights,
        )
    return specs


def confusable_pairs(cfg: ExperimentConfig) -> list[tuple[int, int]]:
    """(head word index, tail twin index) pairs.

    Heads sit at the top of the source frequency order; twins are spread
    over the upper half of the vocabulary, inside the non-source windows.
    """
    n = cfg.num_confusable_pairs
    v = cfg.vocab_size
    if n > v // 2 - 3:
        raise ConfigError(f"too many confusable pairs ({n}) for vocabulary of {v}")
    pairs = []
    for j in range(n):
        head = 3 + j
        tail = v // 2 + (int(round(j * (v / 2 - 1) / (n - 1))) if n > 1 else 0)
        pairs.append((head, tail))
    if len({t for _, t in pairs}) != n:
        raise ConfigError("confusable tail indices collide; reduce the pair count")
    return pairs


def make_vocabulary(cfg: ExperimentConfig) -> tuple[list[str], Lexicon]:
    """Word list plus a collision-free word-to-phones lexicon.

    Confusable pairs share all phones except one position, where the head
    word carries twin phone 2j and the tail twin carries 2j+1."""
    rng = np.random.default_rng([cfg.seed, 102])
    words = [f"w{i:03d}" for i in range(cfg.vocab_size)]
    entries: dict[str, list[int]] = {}
    seen: set[tuple[int, ...]] = set()

    def fresh_word(force_phone: int | None = None) -> list[int]:
        while True:
            length = int(rng.integers(cfg.word_min_phones, cfg.word_max_phones + 1))
            phones = [int(p) for p in rng.integers(0, cfg.num_phones, size=length)]
            if force_phone is not None:
                phones[int(rng.integers(0, length))] = force_phone
            if tuple(phones) not in seen:
                seen.add(tuple(phones))
                return phones

    pairs = confusable_pairs(cfg)
    head_pair = {head: j for j, (head, _) in enumerate(pairs)}
    tails = {tail for _, tail in pairs}

    for i, word in enumerate(words):
        if i in tails:
            continue  # derived from their heads below
        if i in head_pair:
            twin = 2 * (head_pair[i] % cfg.num_twin_phone_pairs)
            entries[word] = fresh_word(force_phone=twin)
        else:
            entries[word] = fresh_word()

    for j, (head, tail) in enumerate(pairs):
        twin = 2 * (j % cfg.num_twin_phone_pairs)
        phones = list(entries[words[head]])
        phones[phones.index(twin)] = twin + 1
        if tuple(phones) in seen:
            phones = fresh_word(force_phone=twin + 1)
        else:
            seen.add(tuple(phones))
        entries[words[tail]] = phones

    lexicon = Lexicon(entries=entries,
                      phone_inventory=list(range(cfg.num_phones + 1)),
                      sil_id=cfg.sil_id)
    return words, lexicon


def sample_words(spec: DomainSpec, cfg: ExperimentConfig,
                 rng: np.random.Generator, words: list[str]) -> list[str]:
    count = int(rng.integers(cfg.utt_min_words, cfg.utt_max_words + 1))
    picks = rng.choice(cfg.vocab_size, size=count, p=spec.word_weights)
    return [words[int(i)] for i in picks]


def true_phone_sequence(utt_words: list[str], lexicon: Lexicon, prob: float,
                        rng: np.random.Generator) -> list[int]:
    """Spoken phone sequence: lexicon phones with silences at word boundaries."""
    ids: list[int] = []
    if rng.random() < prob:
        ids.append(lexicon.sil_id)
    for word in utt_words:
        ids.extend(lexicon.entries[word])
        if rng.random() < prob:
            ids.append(lexicon.sil_id)
    return ids


def synthesize_speech(phone_ids: list[int], spec: DomainSpec,
                      rng: np.random.Generator) -> np.ndarray:
    """Emit per-phone prototype frames with Gaussian durations and noise."""
    protos = spec.transformed_prototypes()
    for p in phone_ids:
        if p < 0 or p >= protos.shape[0]:
            raise ConfigError(f"phone id {p} has no prototype")
    durations = np.maximum(
        1, np.rint(rng.normal(spec.duration_mean, spec.duration_std,
                              size=len(phone_ids))).astype(np.int64))
    frames = np.repeat(protos[np.asarray(phone_ids, dtype=np.int64)], durations, axis=0)
    if spec.noise_std > 0.0:
        frames = frames + spec.noise_std * rng.standard_normal(frames.shape)
    return frames


def oracle_phone_decode(feats: np.ndarray, spec: DomainSpec) -> list[int]:
    """Nearest-prototype frame labels after undoing the domain affine,
    collapsed over repeats. Learnability floor for the generator."""
    centered = feats - spec.affine_offset
    recovered = np.linalg.solve(spec.affine_matrix, centered.T).T
    dists = ((recovered[:, None, :] - spec.phone_prototypes[None, :, :]) ** 2).sum(axis=2)
    labels = dists.argmin(axis=1)
    out: list[int] = []
    for lab in labels:
        if not out or out[-1] != lab:
            out.append(int(lab))
    return out


def _make_utterance(utt_id: str, spec: DomainSpec, cfg: ExperimentConfig,
                    words: list[str], lexicon: Lexicon,
                    rng: np.random.Generator, with_features: bool) -> Utterance:
    utt_words = sample_words(spec, cfg, rng, words)
    phone_ids = true_phone_sequence(utt_words, lexicon, cfg.silence_prob, rng)
    feats = synthesize_speech(phone_ids, spec, rng) if with_features else None
    return Utterance(utt_id=utt_id, domain=spec.name, words=utt_words,
                     phone_ids=phone_ids, feats=feats)


# ---------------------------------------------------------------------------
# feature archive I/O


def write_feature_archive(path_base: str | Path, utterances: list[Utterance]) -> None:
    """Write ``<base>.bin`` records and a ``<base>.idx`` manifest.

    Record layout: uint32 id length, UTF-8 id, uint32 T, uint32 dim, then
    T*dim little-endian float64 values.
    """
    base = Path(path_base)
    bin_path = base.with_suffix(".bin")
    idx_lines = []
    offset = 0
    with bin_path.open("wb") as fh:
        for utt in utterances:
            if utt.feats is None:
                raise DataError(f"utterance {utt.utt_id} has no features to archive")
            ident = utt.utt_id.encode("utf-8")
            t, dim = utt.feats.shape
            rec = struct.pack("<I", len(ident)) + ident + struct.pack("<II", t, dim)
            rec += np.ascontiguousarray(utt.feats, dtype="<f8").tobytes()
            fh.write(rec)
            idx_lines.append(f"{utt.utt_id}\t{offset}\t{t}\t{dim}")
            offset += len(rec)
    base.with_suffix(".idx").write_text("\n".join(idx_lines) + ("\n" if idx_lines else ""),
                                        encoding="utf-8")


def read_feature_archive(path_base: str | Path) -> dict[str, np.ndarray]:
    base = Path(path_base)
    bin_path = base.with_suffix(".bin")
    idx_path = base.with_suffix(".idx")
    if not bin_path.exists() or not idx_path.exists():
        raise DataError(f"feature archive not found: {base}.bin/.idx")
    raw = bin_path.read_bytes()
    out: dict[str, np.ndarray] = {}
    for line in idx_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        utt_id, offset_s, t_s, dim_s = line.split("\t")
        offset, t, dim = int(offset_s), int(t_s), int(dim_s)
        (id_len,) = struct.unpack_from("<I", raw, offset)
        pos = offset + 4 + id_len + 8
        feats = np.frombuffer(raw, dtype="<f8", count=t * dim, offset=pos)
        out[utt_id] = feats.reshape(t, dim).astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# experiment bundle


def generate_experiment(cfg: ExperimentConfig, out_dir: str | Path) -> dict:
    """Write the full corpus bundle; returns the manifest dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    words, lexicon = make_vocabulary(cfg)
    specs = make_domain_specs(cfg)

    (out / "vocab.txt").write_text("\n".join(words) + "\n", encoding="utf-8")
    lex_lines = ["# word<TAB>phone ids"]
    for word in words:
        lex_lines.append("{}\t{}".format(word, " ".join(str(p) for p in lexicon.entries[word])))
    (out / "lexicon.txt").write_text("\n".join(lex_lines) + "\n", encoding="utf-8")

    manifest: dict = {
        "version": 1,
        "config": asdict(cfg),
        "domains": {
            name: {
                "affine_condition": float(np.linalg.cond(spec.affine_matrix)),
                "pool": [int(w) for w in np.flatnonzero(spec.word_weights > 0)],
            }
            for name, spec in specs.items()
        },
        "splits": {},
    }

    def eval_split(split: str, domain: str, count: int, stream: int) -> list[Utterance]:
        utts = []
        for i in range(count):
            rng = np.random.default_rng([cfg.seed, stream, i])
            utts.append(_make_utterance(f"{domain}-{split}-{i:05d}", specs[domain],
                                        cfg, words, lexicon, rng, with_features=True))
        return utts

    def write_split(split: str, utts: list[Utterance], with_features: bool) -> None:
        trans = "\n".join(f"{u.utt_id}\t{u.text}" for u in utts)
        (out / f"{split}.trans.txt").write_text(trans + ("\n" if trans else ""),
                                                encoding="utf-8")
        entry = {"transcripts": f"{split}.trans.txt", "count": len(utts),
                 "domain": utts[0].domain if utts else None, "features": None}
        if with_features:
            write_feature_archive(out / f"{split}.feats", utts)
            entry["features"] = f"{split}.feats"
        manifest["splits"][split] = entry

    write_split("train_paired", eval_split("train", SOURCE_DOMAIN,
                                           cfg.paired_utterances, 201), True)
    write_split("dev", eval_split("dev", SOURCE_DOMAIN, cfg.dev_utterances, 202), True)
    write_split("test_source", eval_split("test", SOURCE_DOMAIN,
                                          cfg.test_utterances, 203), True)
    for k, domain in enumerate(TARGET_DOMAINS):
        write_split(f"test_{domain}", eval_split("test", domain,
                                                 cfg.test_utterances, 204 + k), True)

    # unpaired text: source plus the seen target domains, text only
    unpaired_total = int(round(cfg.unpaired_ratio * cfg.paired_utterances))
    unpaired_domains = (SOURCE_DOMAIN,) + TARGET_DOMAINS
    unpaired: list[Utterance] = []
    unpaired_texts: set[str] = set()
    for d_index, domain in enumerate(unpaired_domains):
        count = unpaired_total // len(unpaired_domains)
        if d_index == 0:
            count += unpaired_total - count * len(unpaired_domains)
        for i in range(count):
            rng = np.random.default_rng([cfg.seed, 210 + d_index, i])
            utt = _make_utterance(f"{domain}-unpaired-{i:05d}", specs[domain],
                                  cfg, words, lexicon, rng, with_features=False)
            unpaired.append(utt)
            unpaired_texts.add(utt.text)
    write_split("train_unpaired_text", unpaired, False)

    # the unseen-domain test set must not share a transcript with the
    # unpaired training text (rejection sampled, deterministic)
    unseen: list[Utterance] = []
    attempt = 0
    while len(unseen) < cfg.test_utterances:
        rng = np.random.default_rng([cfg.seed, 220, attempt])
        utt = _make_utterance(f"{UNSEEN_DOMAIN}-test-{len(unseen):05d}",
                              specs[UNSEEN_DOMAIN], cfg, words, lexicon, rng,
                              with_features=True)
        attempt += 1
        if utt.text in unpaired_texts:
            continue
        unseen.append(utt)
    write_split(f"test_{UNSEEN_DOMAIN}", unseen, True)

    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return manifest


def load_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def load_vocab(data_dir: str | Path) -> tuple[list[str], dict[str, int]]:
    """Word list and word -> token-id map (ids start at 1; blank is 0)."""
    path = Path(data_dir) / "vocab.txt"
    if not path.exists():
        raise DataError(f"vocabulary not found: {path}")
    words = [w for w in path.read_text(encoding="utf-8").splitlines() if w.strip()]
    return words, {w: i + 1 for i, w in enumerate(words)}


def load_split(data_dir: str | Path, manifest: dict, split: str) -> list[Utterance]:
    """Read one split back as utterances (features attached when archived)."""
    entry = manifest["splits"].get(split)
    if entry is None:
        raise DataError(f"split {split!r} not in manifest")
    base = Path(data_dir)
    feats = read_feature_archive(base / entry["features"]) if entry["features"] else {}
    utts: list[Utterance] = []
    for line in (base / entry["transcripts"]).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        utt_id, _, text = line.partition("\t")
        utts.append(Utterance(utt_id=utt_id, domain=entry["domain"] or utt_id.split("-")[0],
                              words=text.split(), phone_ids=[],
                              feats=feats.get(utt_id)))
    return utts
