"""Experiment protocol: train system variants over seeds, tabulate TER.

One comparison run covers, per seed: corpus generation, offline text
preparation, training every requested system variant, greedy decoding of
every evaluation split, and optionally language-model training plus fused
beam decoding for the baseline and the full injection system.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .ctc import beam_search
from .encoders import ModelConfig, ModelParams, classify, encode_speech
from .errors import ConfigError
from .lm import LmConfig, LmScorer, lm_train
from .scoring import SplitScore, align_counts
from .synth import (ExperimentConfig, Utterance, generate_experiment, load_manifest,
                    load_split, load_vocab)
from .tensor import no_grad
from .text import (UpsampleConfig, prepare_unpaired_corpus, read_lexicon,
                   read_prepared_corpus)
from .training import (PairedExample, TrainConfig, TrainResult, UnpairedExample,
                       evaluate_greedy, train, train_baseline)

logger = logging.getLogger(__name__)

EVAL_SPLITS = ("test_source", "test_podcast", "test_lecture", "test_commands")

# Table 3 / Table 4 style system grid; falsy fields keep TrainConfig defaults.
SYSTEM_VARIANTS: dict[str, dict] = {
    "baseline": {"baseline": True},
    "fastinject": {},
    "fastinject-no-am3": {"enable_am3": False},
    "fastinject-no-paired-ctc": {"enable_paired_ctc": False},
    "fastinject-no-aux": {"enable_am3": False, "enable_paired_ctc": False},
    "fastinject-ds1": {"text_downsample": 1},
    "fastinject-ds4": {"text_downsample": 4},
}

LM_SYSTEMS = ("baseline", "fastinject")


@dataclass
class CompareConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    systems: tuple[str, ...] = tuple(SYSTEM_VARIANTS)
    with_lm: bool = True
    beam_size: int = 10
    lm_weight: float = 0.3
    prune_tokens: int = 24
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    upsample: UpsampleConfig = field(default_factory=UpsampleConfig)
    lm: LmConfig | None = None
    model: ModelConfig | None = None   # None: built from the experiment config

    def __post_init__(self) -> None:
        unknown = [s for s in self.systems if s not in SYSTEM_VARIANTS]
        if unknown:
            raise ConfigError(f"unknown systems {unknown}; known: {sorted(SYSTEM_VARIANTS)}")

    def model_config(self) -> ModelConfig:
        if self.model is not None:
            return self.model
        return ModelConfig(vocab_size=self.experiment.num_output_units,
                           num_phones=self.experiment.num_phones + 1,
                           feature_dim=self.experiment.feature_dim)


@dataclass
class SeedData:
    """Everything one seed's runs share, loaded once."""

    vocab_words: list[str]
    paired: list[PairedExample]
    unpaired: list[UnpairedExample]
    dev: list[PairedExample]
    eval_splits: dict[str, list[Utterance]]
    eval_refs: dict[str, dict[str, list[int]]]


def tokens_of(words: list[str], vocab: dict[str, int]) -> list[int]:
    return [vocab[w] for w in words]


PAIRED_TEXT_STREAM = 1
UNPAIRED_TEXT_STREAM = 2


def prepare_text_files(data_dir: Path, ucfg: UpsampleConfig) -> tuple[Path, Path]:
    """Offline text preparation for a generated bundle.

    Writes ``prepared_paired.fjt`` (paired transcripts, upsampled) and
    ``prepared_unpaired.fjt`` (unpaired multi-domain text) next to the
    bundle; returns both paths.
    """
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    _, vocab = load_vocab(data_dir)
    num_phones = manifest["config"]["num_phones"]
    lexicon = read_lexicon(data_dir / "lexicon.txt",
                           list(range(num_phones + 1)), num_phones)
    paired_path = data_dir / "prepared_paired.fjt"
    unpaired_path = data_dir / "prepared_unpaired.fjt"
    paired_texts = [(u.utt_id, u.text)
                    for u in load_split(data_dir, manifest, "train_paired")]
    unpaired_texts = [(u.utt_id, u.text)
                      for u in load_split(data_dir, manifest, "train_unpaired_text")]
    prepare_unpaired_corpus(paired_texts, lexicon, ucfg, vocab, paired_path,
                            stream=PAIRED_TEXT_STREAM)
    prepare_unpaired_corpus(unpaired_texts, lexicon, ucfg, vocab, unpaired_path,
                            stream=UNPAIRED_TEXT_STREAM)
    return paired_path, unpaired_path


def load_training_data(data_dir: Path) -> SeedData:
    """Read a generated bundle plus its prepared text files into memory."""
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    words, vocab = load_vocab(data_dir)

    prepared_paired = {utt_id: (phones, tokens) for utt_id, phones, tokens
                       in read_prepared_corpus(data_dir / "prepared_paired.fjt")}
    paired_utts = load_split(data_dir, manifest, "train_paired")
    paired = []
    for u in paired_utts:
        phones, tokens = prepared_paired[u.utt_id]
        paired.append(PairedExample(u.utt_id, u.feats, tokens, phones))

    unpaired = [UnpairedExample(utt_id, phones, tokens)
                for utt_id, phones, tokens
                in read_prepared_corpus(data_dir / "prepared_unpaired.fjt")]

    dev = [PairedExample(u.utt_id, u.feats, tokens_of(u.words, vocab))
           for u in load_split(data_dir, manifest, "dev")]

    eval_splits = {s: load_split(data_dir, manifest, s) for s in EVAL_SPLITS}
    eval_refs = {s: {u.utt_id: tokens_of(u.words, vocab) for u in utts}
                 for s, utts in eval_splits.items()}
    return SeedData(vocab_words=words, paired=paired, unpaired=unpaired, dev=dev,
                    eval_splits=eval_splits, eval_refs=eval_refs)


def prepare_seed_data(data_dir: Path, cfg: CompareConfig, seed: int) -> SeedData:
    """Generate the corpus bundle and prepared text for one seed, then load."""
    exp = replace(cfg.experiment, seed=seed)
    generate_experiment(exp, data_dir)
    prepare_text_files(Path(data_dir), replace(cfg.upsample, seed=seed))
    return load_training_data(Path(data_dir))


def train_system(system: str, data: SeedData, cfg: CompareConfig, seed: int,
                 mcfg: ModelConfig | None = None) -> tuple[TrainResult, ModelConfig]:
    variant = SYSTEM_VARIANTS[system]
    if mcfg is None:
        mcfg = cfg.model_config()
    if "text_downsample" in variant:
        mcfg = mcfg.with_text_downsample(variant["text_downsample"])
    tcfg = replace(cfg.train, seed=seed,
                   enable_am3=variant.get("enable_am3", cfg.train.enable_am3),
                   enable_paired_ctc=variant.get("enable_paired_ctc",
                                                 cfg.train.enable_paired_ctc))
    if variant.get("baseline"):
        result = train_baseline(data.paired, data.dev, mcfg, tcfg)
    else:
        result = train(data.paired, data.unpaired, data.dev, mcfg, tcfg)
    return result, mcfg


def ter_for_split(params: ModelParams, mcfg: ModelConfig, utts: list[Utterance],
                  refs: dict[str, list[int]]) -> float:
    hyps = evaluate_greedy(params, mcfg, ((u.utt_id, u.feats) for u in utts))
    total = SplitScore()
    for utt_id, ref in refs.items():
        total.add(align_counts(ref, hyps[utt_id]))
    return total.ter


def ter_for_split_beam(params: ModelParams, mcfg: ModelConfig, utts: list[Utterance],
                       refs: dict[str, list[int]], beam: int, scorer, lm_weight: float,
                       prune_tokens: int | None) -> float:
    total = SplitScore()
    with no_grad():
        for u in utts:
            s = encode_speech(u.feats, params, mcfg, train=False)
            logits = classify(s, params).data
            hyp = beam_search(logits, beam, mcfg.blank_id, lm=scorer,
                              lm_weight=lm_weight, prune_tokens=prune_tokens)
            total.add(align_counts(refs[u.utt_id], hyp))
    return total.ter


@dataclass
class CompareResult:
    """TER per (system, decode mode, seed, split)."""

    cells: dict[tuple[str, str, int, str], float] = field(default_factory=dict)
    seeds: tuple[int, ...] = ()
    splits: tuple[str, ...] = EVAL_SPLITS

    def mean_ter(self, system: str, split: str, mode: str = "greedy") -> float:
        vals = [self.cells[(system, mode, seed, split)] for seed in self.seeds]
        return float(np.mean(vals))

    def macro_mean(self, system: str, mode: str = "greedy") -> float:
        return float(np.mean([self.mean_ter(system, split, mode)
                              for split in self.splits]))

    def rows(self) -> list[tuple[str, str, int, str, float]]:
        return [(sys, mode, seed, split, ter)
                for (sys, mode, seed, split), ter in sorted(self.cells.items())]

    def to_csv(self) -> str:
        lines = ["system,decode,seed,split,ter"]
        for sys, mode, seed, split, ter in self.rows():
            lines.append(f"{sys},{mode},{seed},{split},{ter!r}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        systems = sorted({r[0] for r in self.rows()})
        modes = sorted({(r[0], r[1]) for r in self.rows()})
        width = max(len(s) for s, _ in modes) + len("+beam+lm") + 2
        out = []
        header = "{:<{w}}".format("system", w=width)
        for split in self.splits:
            header += f"{split:>16}"
        out.append(header)
        for sys, mode in modes:
            label = sys if mode == "greedy" else f"{sys}+{mode}"
            line = "{:<{w}}".format(label, w=width)
            for split in self.splits:
                per_seed = [self.cells[(sys, mode, seed, split)] for seed in self.seeds]
                line += "{:>16}".format(
                    "{:.2f} ({})".format(float(np.mean(per_seed)),
                                         "/".join(f"{v:.1f}" for v in per_seed)))
            out.append(line)
        return "\n".join(out) + "\n"


def run_compare(cfg: CompareConfig, out_dir: str | Path,
                log=print) -> CompareResult:
    """Run the full (system x seed) grid; artifacts land under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = CompareResult(seeds=tuple(cfg.seeds))
    for seed in cfg.seeds:
        seed_dir = out / f"seed{seed}"
        data = prepare_seed_data(seed_dir / "data", cfg, seed)
        scorer = None
        if cfg.with_lm:
            lm_cfg = cfg.lm or LmConfig(vocab_size=cfg.experiment.num_output_units)
            lm_cfg = replace(lm_cfg, seed=seed)
            lm_params, ppl = lm_train([ex.tokens for ex in data.unpaired], lm_cfg)
            scorer = LmScorer(lm_params.state_arrays(), lm_cfg)
            if log:
                log(f"[seed {seed}] lm perplexity {ppl[-1]:.2f}")
        for system in cfg.systems:
            try:
                res, mcfg = train_system(system, data, cfg, seed)
            except Exception as exc:   # keep other cells alive per protocol
                logger.exception("cell (%s, seed %d) failed", system, seed)
                if log:
                    log(f"[seed {seed}] {system}: FAILED ({exc})")
                continue
            for split, utts in data.eval_splits.items():
                ter = ter_for_split(res.params, mcfg, utts, data.eval_refs[split])
                result.cells[(system, "greedy", seed, split)] = ter
            if log:
                terse = " ".join(f"{split.split('_')[1]}={result.cells[(system, 'greedy', seed, split)]:.1f}"
                                 for split in data.eval_splits)
                log(f"[seed {seed}] {system}: dev={res.final_dev_ter:.1f} {terse}")
            if cfg.with_lm and system in LM_SYSTEMS and scorer is not None:
                for split, utts in data.eval_splits.items():
                    ter = ter_for_split_beam(res.params, mcfg, utts,
                                             data.eval_refs[split], cfg.beam_size,
                                             scorer, cfg.lm_weight, cfg.prune_tokens)
                    result.cells[(system, "beam+lm", seed, split)] = ter
                if log:
                    terse = " ".join(f"{split.split('_')[1]}={result.cells[(system, 'beam+lm', seed, split)]:.1f}"
                                     for split in data.eval_splits)
                    log(f"[seed {seed}] {system}+lm: {terse}")
    (out / "comparison.csv").write_text(result.to_csv(), encoding="utf-8")
    (out / "comparison.txt").write_text(result.to_text(), encoding="utf-8")
    return result
