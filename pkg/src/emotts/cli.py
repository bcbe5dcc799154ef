"""Command-line entry point.

Subcommands: ``gen-data``, ``train``, ``synth``, ``eval``. One JSON config
file (sections: corpus, model, schedule, train, eval) describes a run;
``--seed`` overrides the relevant section's seed. All outputs land under
``--out``; timestamps are confined to ``run_meta.json``.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import corpus as corpus_mod
from . import evaluation, training
from .config import load_config


def _write_run_meta(out_dir: Path, args: argparse.Namespace) -> None:
    meta = {
        "command": args.command,
        "argv": sys.argv[1:],
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def _check_widths(cfg_model, ckpt_cfg_model) -> None:
    for key in ("width", "emb_width", "spk_width", "bands", "vocab_size", "unet_base"):
        ours = getattr(cfg_model, key)
        theirs = ckpt_cfg_model[key]
        if ours != theirs:
            raise ValueError(
                f"checkpoint/config mismatch on model.{key}: "
                f"config has {ours}, checkpoint has {theirs}"
            )


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.corpus.seed = args.seed
    out_dir = Path(args.out)
    _write_run_meta(out_dir, args)
    corpus, _ = corpus_mod.generate_corpus(cfg.corpus, out_dir)
    n_train = len(corpus.subset("train"))
    n_test = len(corpus.subset("test"))
    print(f"generated {len(corpus.utterances)} utterances "
          f"({n_train} train / {n_test} test) under {out_dir}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    corpus = corpus_mod.load_manifest(args.corpus)
    if corpus.bands != cfg.model.bands:
        raise ValueError(
            f"corpus has {corpus.bands} mel bands but model.bands is {cfg.model.bands}"
        )
    max_token = max(max(u.tokens) for u in corpus.utterances)
    if max_token >= cfg.model.vocab_size:
        raise ValueError(
            f"corpus token id {max_token} exceeds model.vocab_size {cfg.model.vocab_size}"
        )
    out_dir = Path(args.out)
    _write_run_meta(out_dir, args)
    state = training.build_state(cfg, corpus.n_speakers, len(corpus.categories))
    history = training.run_training(state, corpus, out_dir)
    last = history[-1] if history else {"L_total": float("nan")}
    print(f"trained {state.step} steps; final L_total={last['L_total']:.4f}; "
          f"checkpoints under {out_dir}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    state = training.load_checkpoint(args.ckpt)
    _check_widths(cfg.model, state.config.to_dict()["model"])
    try:
        tokens = [int(t) for t in args.tokens.split(",") if t.strip() != ""]
    except ValueError as exc:
        raise ValueError(f"--tokens must be comma-separated integers: {exc}") from exc
    reference = corpus_mod.read_mel(args.ref_mel)
    seed = args.seed if args.seed is not None else cfg.train.seed
    generator = torch.Generator().manual_seed(seed)
    mel = training.synthesize(
        state, tokens, args.speaker, reference,
        n_steps=args.steps, temperature=args.temperature, generator=generator,
    )
    out_dir = Path(args.out)
    _write_run_meta(out_dir, args)
    out_path = out_dir / "synth.mel"
    corpus_mod.write_mel(np.asarray(mel), out_path)
    print(f"wrote {mel.shape[0]}x{mel.shape[1]} mel to {out_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    state = training.load_checkpoint(args.ckpt)
    _check_widths(cfg.model, state.config.to_dict()["model"])
    corpus = corpus_mod.load_manifest(args.corpus)
    split_seed = args.seed if args.seed is not None else cfg.eval.split_seed
    out_dir = Path(args.out)
    _write_run_meta(out_dir, args)
    report = evaluation.evaluate_corpus(
        state, corpus, out_dir,
        split=cfg.eval.split, split_seed=split_seed,
        oracle_paths=cfg.eval.oracle_paths,
        oracle_samples=cfg.eval.oracle_samples,
        ode_steps=cfg.eval.ode_steps,
    )
    print(f"eval reports under {out_dir}: "
          f"emotion probe {report['emotion_probe_accuracy']:.3f}, "
          f"speaker probe {report['speaker_probe_accuracy']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emotts",
        description="Synthetic-corpus emotion-transfer TTS: data generation, "
                    "training, synthesis and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a generated corpus")
    common(p)
    p.add_argument("--corpus", required=True, help="path to manifest.jsonl")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize a mel from tokens + reference")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--tokens", required=True, help="comma-separated token ids")
    p.add_argument("--speaker", required=True, type=int, help="target speaker id")
    p.add_argument("--ref-mel", required=True, help="reference mel file (emotion source)")
    p.add_argument("--steps", type=int, default=50, help="reverse-ODE steps")
    p.add_argument("--temperature", type=float, default=1.0,
                   help="terminal-noise temperature")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="dump embeddings and write evaluation reports")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--corpus", required=True, help="path to manifest.jsonl")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
