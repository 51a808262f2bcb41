"""Command-line entry point.

Subcommands: gen-data, prep-text, train, train-lm, decode, score, compare.
Every command accepts --config (JSON), --seed and --out-dir; command-line
flags override config-file values which override built-in defaults.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .compare import (CompareConfig, SYSTEM_VARIANTS, load_training_data,
                      prepare_text_files, run_compare, tokens_of, train_system)
from .encoders import (EncoderConfig, ModelConfig, classify, encode_speech,
                       load_model, save_model)
from .errors import ConfigError, DataError, FastInjectError, NumericError
from .ctc import beam_search, greedy_decode
from .lm import LmConfig, LmScorer, lm_train, load_lm, save_lm
from .scoring import EvalReport, read_trans_file, score_utterances
from .synth import ExperimentConfig, generate_experiment, load_manifest, load_split, load_vocab
from .tensor import no_grad
from .text import UpsampleConfig
from .training import SpecAugmentConfig, TrainConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return cfg


def _dataclass_from(cls, section: dict, **overrides):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**merged)
    except TypeError as exc:
        raise ConfigError(f"bad {cls.__name__} options: {exc}") from exc


def _experiment_config(cfg: dict, seed: int | None) -> ExperimentConfig:
    return _dataclass_from(ExperimentConfig, cfg.get("experiment", {}), seed=seed)


def _upsample_config(cfg: dict, seed: int | None) -> UpsampleConfig:
    return _dataclass_from(UpsampleConfig, cfg.get("upsample", {}), seed=seed)


def _train_config(cfg: dict, args) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    sa = section.pop("specaugment", None)
    overrides = {
        "seed": args.seed,
        "alpha": getattr(args, "alpha", None),
        "epochs": getattr(args, "epochs", None),
    }
    if getattr(args, "no_am3", False):
        overrides["enable_am3"] = False
    if getattr(args, "no_paired_ctc", False):
        overrides["enable_paired_ctc"] = False
    tcfg = _dataclass_from(TrainConfig, section, **overrides)
    if sa is not None:
        tcfg = dataclasses.replace(tcfg, specaugment=_dataclass_from(SpecAugmentConfig, sa))
    return tcfg


def _model_config(cfg: dict, data_dir: Path, text_downsample: int | None) -> ModelConfig:
    manifest = load_manifest(data_dir)
    exp = manifest["config"]
    section = dict(cfg.get("model", {}))
    acoustic = _dataclass_from(EncoderConfig, section.pop("acoustic", {}) or {
        "num_layers": 2, "model_dim": 32, "ffn_dim": 64, "num_heads": 2,
        "downsample_factor": 2})
    text_section = section.pop("text", {}) or {
        "num_layers": 1, "model_dim": 32, "ffn_dim": 64, "num_heads": 2,
        "downsample_factor": 2}
    text = _dataclass_from(EncoderConfig, text_section)
    if section:
        raise ConfigError(f"unknown model keys: {sorted(section)}")
    mcfg = ModelConfig(vocab_size=exp["vocab_size"] + 1,
                       num_phones=exp["num_phones"] + 1,
                       feature_dim=exp["feature_dim"], blank_id=0,
                       acoustic=acoustic, text=text)
    if text_downsample is not None:
        mcfg = mcfg.with_text_downsample(text_downsample)
    return mcfg


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    exp = _experiment_config(cfg, args.seed)
    out = Path(args.out_dir or "data")
    manifest = generate_experiment(exp, out)
    print(f"wrote {len(manifest['splits'])} splits to {out}")
    for name in sorted(manifest["splits"]):
        print(f"  {name}: {manifest['splits'][name]['count']} utterances")
    return EXIT_OK


def cmd_prep_text(args) -> int:
    cfg = _load_config(args.config)
    ucfg = _upsample_config(cfg, args.seed)
    paired, unpaired = prepare_text_files(Path(args.data_dir), ucfg)
    print(f"wrote {paired}")
    print(f"wrote {unpaired}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    data_dir = Path(args.data_dir)
    out = Path(args.out_dir or "run")
    out.mkdir(parents=True, exist_ok=True)
    mcfg = _model_config(cfg, data_dir, args.text_downsample)
    tcfg = _train_config(cfg, args)
    data = load_training_data(data_dir)

    from .training import train, train_baseline
    if args.baseline:
        result = train_baseline(data.paired, data.dev, mcfg, tcfg)
    else:
        result = train(data.paired, data.unpaired, data.dev, mcfg, tcfg)
    (out / "train.log").write_text("\n".join(result.step_lines) + "\n", encoding="utf-8")
    save_model(out / "checkpoint.fjckpt", result.params, mcfg)
    history = [{"epoch": h.epoch, "dev_ter": h.dev_ter} for h in result.history]
    (out / "history.json").write_text(
        json.dumps({"history": history, "best_epochs": result.best_epochs},
                   sort_keys=True, indent=2) + "\n", encoding="utf-8")
    best = min(h.dev_ter for h in result.history)
    print(f"final dev TER {best:.2f} (averaged epochs {result.best_epochs})")
    return EXIT_OK


def cmd_train_lm(args) -> int:
    cfg = _load_config(args.config)
    data_dir = Path(args.data_dir)
    from .text import read_prepared_corpus
    records = read_prepared_corpus(data_dir / "prepared_unpaired.fjt")
    manifest = load_manifest(data_dir)
    lm_cfg = _dataclass_from(LmConfig, dict(cfg.get("lm", {}),
                                            vocab_size=manifest["config"]["vocab_size"] + 1),
                             seed=args.seed)
    params, ppl = lm_train([tokens for _, _, tokens in records], lm_cfg,
                           log=print)
    out = Path(args.out_dir or ".") / "lm.fjckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_lm(out, params, lm_cfg)
    print(f"wrote {out} (final perplexity {ppl[-1]:.3f})")
    return EXIT_OK


def cmd_decode(args) -> int:
    if args.lm is None and args.lm_weight is not None and args.lm_weight > 0:
        raise ConfigError("--lm-weight > 0 requires --lm")
    params, mcfg = load_model(args.checkpoint)
    data_dir = Path(args.data_dir)
    manifest = load_manifest(data_dir)
    words, _ = load_vocab(data_dir)
    utts = load_split(data_dir, manifest, args.split)
    scorer = None
    beam = args.beam
    lm_weight = args.lm_weight
    if args.lm is not None:
        arrays, lm_cfg = load_lm(args.lm)
        scorer = LmScorer(arrays, lm_cfg)
        beam = beam if beam is not None else 10
        lm_weight = lm_weight if lm_weight is not None else 0.3
    beam = beam if beam is not None else 1
    lm_weight = lm_weight if lm_weight is not None else 0.0

    lines = []
    with no_grad():
        for u in utts:
            if u.feats is None:
                raise DataError(f"split {args.split} has no features for {u.utt_id}")
            s = encode_speech(u.feats, params, mcfg, train=False)
            logits = classify(s, params).data
            if beam > 1 or scorer is not None:
                hyp = beam_search(logits, beam, mcfg.blank_id, lm=scorer,
                                  lm_weight=lm_weight, prune_tokens=args.prune_tokens)
            else:
                hyp = greedy_decode(logits, mcfg.blank_id)
            text = " ".join(words[t - 1] for t in hyp)
            lines.append(f"{u.utt_id}\t{text}" if text else u.utt_id)
    out_path = Path(args.out) if args.out else Path(args.out_dir or ".") / f"hyp_{args.split}.txt"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {out_path} ({len(lines)} hypotheses)")
    return EXIT_OK


def cmd_score(args) -> int:
    refs = read_trans_file(args.ref)
    hyps = read_trans_file(args.hyp)
    try:
        total = score_utterances(refs, hyps)
    except DataError as exc:
        # wrong utterance id sets are a usage problem: wrong files passed
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    mode = args.decode_mode or "greedy"
    report = EvalReport(decode_mode=mode, splits={args.split_name: total})
    print(report.to_json())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_config(args.config)
    section = dict(cfg.get("compare", {}))
    seeds = tuple(args.seeds if args.seeds else section.get("seeds", (0, 1, 2, 3, 4)))
    systems = tuple(args.systems if args.systems else
                    section.get("systems", tuple(SYSTEM_VARIANTS)))
    comp = CompareConfig(
        seeds=seeds, systems=systems,
        with_lm=not args.no_lm and section.get("with_lm", True),
        beam_size=section.get("beam_size", 10),
        lm_weight=section.get("lm_weight", 0.3),
        prune_tokens=section.get("prune_tokens", 24),
        experiment=_experiment_config(cfg, None),
        train=_train_config(cfg, args),
        upsample=_upsample_config(cfg, None),
    )
    out = Path(args.out_dir or "compare")
    result = run_compare(comp, out, log=print)
    print()
    print(result.to_text())
    print(f"tables written to {out}/comparison.csv and {out}/comparison.txt")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fastinject",
        description="CTC training with unpaired-text injection: data generation, "
                    "text preparation, training, decoding, scoring, comparison.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="master random seed")
        p.add_argument("--out-dir", default=None, help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus bundle")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("prep-text", help="upsample transcripts and unpaired text offline")
    common(p)
    p.add_argument("--data-dir", required=True)
    p.set_defaults(func=cmd_prep_text)

    p = sub.add_parser("train", help="train a recognizer")
    common(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--baseline", action="store_true", help="standard CTC, no injection")
    p.add_argument("--no-am3", action="store_true", help="drop the modality matching loss")
    p.add_argument("--no-paired-ctc", action="store_true", help="drop the paired-text CTC loss")
    p.add_argument("--text-downsample", type=int, choices=(1, 2, 4), default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-lm", help="train the fusion language model")
    common(p)
    p.add_argument("--data-dir", required=True)
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("decode", help="decode a split with a trained checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", default=None, help="hypothesis file path")
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--lm", default=None, help="language-model checkpoint")
    p.add_argument("--lm-weight", type=float, default=None)
    p.add_argument("--prune-tokens", type=int, default=24)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="score a hypothesis file against references")
    common(p)
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.add_argument("--split-name", default="eval")
    p.add_argument("--decode-mode", default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("compare", help="run the full system/seed comparison grid")
    common(p)
    p.add_argument("--seeds", type=int, nargs="*", default=None)
    p.add_argument("--systems", nargs="*", default=None,
                   choices=list(SYSTEM_VARIANTS), metavar="SYSTEM")
    p.add_argument("--no-lm", action="store_true", help="skip LM training and fused decoding")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FastInjectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
