"""Command-line entry point.

Exit codes
----------
0 success, 2 usage error, 3 MIDI/match parse error, 4 checkpoint error,
5 validation error (bad inputs, empty corpus, ...), 6 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .augmentor import AugmentationConfig, augment_copy, make_eval_mismatch_pair, make_training_pair
from .datasets import list_midi_files, load_corpus
from .errors import (CheckpointError, EmptySequenceError, MidiParseError, TrainingDivergence,
                     ValidationError)
from .evaluator import match_prf, pitch_onset_similarity
from .extractors import dtw_extract, greedy_extract, head_extract
from .midi_io import load_alignment, load_midi, save_alignment, write_midi

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_CHECKPOINT, EXIT_VALIDATION, EXIT_DIVERGENCE = 0, 2, 3, 4, 5, 6
CHECKPOINT_ENV = "GLUENOTE_CHECKPOINT_DIR"
EXTRACTORS = ("greedy", "head", "dtw", "baseline-dtw")
MODEL_CHOICES = ("tiny", "small", "mid", "large")

log = logging.getLogger("gluenote")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def resolve_checkpoint(path, preset):
    """Explicit path, else ``$GLUENOTE_CHECKPOINT_DIR/<preset>.pt``."""
    if path:
        return Path(path)
    root = os.environ.get(CHECKPOINT_ENV)
    if not root:
        raise CheckpointError(f"no --checkpoint given and ${CHECKPOINT_ENV} is unset")
    return Path(root) / f"{preset}.pt"


def _load_model(args):
    from .model import PRESETS
    from .training import load_checkpoint

    path = resolve_checkpoint(args.checkpoint, args.model)
    model, vocab, payload = load_checkpoint(path)
    want = PRESETS[args.model]
    got = model.config
    if (got.residual_dim, got.num_blocks, got.num_heads) != (want.residual_dim, want.num_blocks, want.num_heads):
        raise CheckpointError(f"{path} does not hold a '{args.model}' model")
    return model, vocab, path


def cmd_align(args) -> int:
    s1, s2 = load_midi(args.midi_a), load_midi(args.midi_b)
    t0 = time.perf_counter()
    checkpoint = None
    if args.extractor == "baseline-dtw":
        pred = dtw_extract(pitch_onset_similarity(s1, s2), s1, s2)
    else:
        import torch

        from .inference import infer_global_similarity

        if args.threads:
            torch.set_num_threads(args.threads)
        model, vocab, checkpoint = _load_model(args)
        if args.extractor == "head" and model.head is None:
            raise CheckpointError("checkpoint has no decoder head")
        g = infer_global_similarity(s1, s2, model, vocab, with_head=args.extractor == "head")
        if args.extractor == "greedy":
            pred = greedy_extract(g.sim)
        elif args.extractor == "head":
            pred = head_extract(g.head_logits)
        else:
            pred = dtw_extract(g.sim, s1, s2)
    runtime = time.perf_counter() - t0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_alignment(pred.pairs, s1, s2, out)
    report = {"extractor": args.extractor, "s1": str(args.midi_a), "s2": str(args.midi_b),
              "n1": len(s1), "n2": len(s2), "matches": len(pred.matches()),
              "checkpoint": str(checkpoint) if checkpoint else None,
              "alignment": str(out), "runtime_seconds": round(runtime, 4)}
    _write_json(out.with_name(out.name + ".json"), report)
    print(json.dumps(report))
    return EXIT_OK


def _aug_config(path):
    return AugmentationConfig.load(path) if path else AugmentationConfig()


def cmd_augment(args) -> int:
    config = _aug_config(args.config)
    files = list_midi_files(args.corpus)
    if not files:
        raise ValidationError(f"no MIDI files under {args.corpus}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    rng = np.random.default_rng(args.seed)
    seeds = rng.integers(0, 2 ** 63 - 1, size=(len(files), args.pairs))
    for fi, path in enumerate(files):
        seq = load_midi(path)
        if not args.full and len(seq) < config.window:
            log.warning("skipping %s: %d notes < %d", path, len(seq), config.window)
            continue
        for k in range(args.pairs):
            seed = int(seeds[fi, k])
            if args.full:
                pair = augment_copy(seq, config, np.random.default_rng(seed))
            else:
                pair = make_training_pair(seq, config, seed=seed)
            if args.eval_mismatch:
                pair = make_eval_mismatch_pair(pair.s1, pair.s2, pair.truth, args.eval_mismatch,
                                               seed=seed + 1, window=config.window)
            name = f"pair_{len(entries):05d}"
            d = out / name
            d.mkdir(exist_ok=True)
            write_midi(pair.s1, d / "s1.mid")
            write_midi(pair.s2, d / "s2.mid")
            save_alignment(pair.truth, pair.s1, pair.s2, d / "truth.tsv")
            entries.append({"name": name, "source": str(path), "seed": seed, "n1": len(pair.s1),
                            "n2": len(pair.s2), "s1": f"{name}/s1.mid", "s2": f"{name}/s2.mid",
                            "truth": f"{name}/truth.tsv",
                            "stats": {k: int(v) for k, v in pair.stats.items()}})
    if not entries:
        raise ValidationError(f"no file in {args.corpus} has at least {config.window} notes")
    manifest = {"command": "augment", "seed": args.seed, "config": config.to_dict(),
                "eval_mismatch": args.eval_mismatch, "full": args.full, "pairs": entries}
    _write_json(out / "manifest.json", manifest)
    print(json.dumps({"pairs": len(entries), "out": str(out)}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import PRESETS
    from .training import TrainConfig, train

    aug = _aug_config(args.config)
    tc = TrainConfig.from_dict(json.loads(Path(args.train_config).read_text())) if args.train_config \
        else TrainConfig()
    overrides = {"steps": args.steps, "seed": args.seed, "batch_size": args.batch_size,
                 "val_every": args.val_every, "checkpoint_every": args.checkpoint_every,
                 "log_every": args.log_every}
    tc = TrainConfig.from_dict({**tc.to_dict(), **{k: v for k, v in overrides.items() if v is not None}})
    corpus = load_corpus(args.corpus, min_notes=aug.window)
    if not corpus:
        raise ValidationError(f"no MIDI file under {args.corpus} has at least {aug.window} notes")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "manifest.json", {"command": "train", "corpus": str(args.corpus),
                                        "files": len(corpus), "preset": args.preset,
                                        "train_config": tc.to_dict(), "aug_config": aug.to_dict()})
    result = train(corpus, PRESETS[args.preset], aug, tc, out_dir=out, resume=args.resume,
                   log=lambda r: log.info("step %d TL %.4f VL %s VA %s", r["step"], r["TL"], r["VL"], r["VA"]))
    last = result.history[-1] if result.history else {}
    print(json.dumps({"steps": result.step, "checkpoint": str(result.checkpoint), "last": last}))
    return EXIT_OK


def cmd_eval(args) -> int:
    pred, truth = load_alignment(args.pred), load_alignment(args.truth)
    score = match_prf(pred, truth)
    if args.format == "table":
        print(f"P {100 * score.precision:.2f}  R {100 * score.recall:.2f}  F {100 * score.f_score:.2f}  "
              f"(TP {score.tp}, FP {score.fp}, FN {score.fn})")
    else:
        print(json.dumps(score.to_dict()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gluenote", description="Symbolic note alignment toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("align", help="align two MIDI files")
    a.add_argument("midi_a")
    a.add_argument("midi_b")
    a.add_argument("--extractor", choices=EXTRACTORS, default="dtw")
    a.add_argument("--model", choices=MODEL_CHOICES, default="tiny")
    a.add_argument("--checkpoint", help=f"checkpoint file (default: ${CHECKPOINT_ENV}/<model>.pt)")
    a.add_argument("--out", required=True, help="alignment file to write")
    a.add_argument("--threads", type=int, default=None)
    a.set_defaults(func=cmd_align)

    g = sub.add_parser("augment", help="generate augmented pairs with ground truth")
    g.add_argument("corpus", help="MIDI file or directory")
    g.add_argument("--config", help="augmentation config (JSON)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--pairs", type=int, default=1, help="pairs per input file")
    g.add_argument("--eval-mismatch", type=float, default=None, metavar="FRACTION",
                   help="additionally insert random segments on both sides")
    g.add_argument("--full", action="store_true", help="augment whole files instead of 512-note windows")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_augment)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("corpus")
    t.add_argument("--preset", choices=MODEL_CHOICES, default="tiny")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--val-every", type=int)
    t.add_argument("--log-every", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--config", help="augmentation config (JSON)")
    t.add_argument("--train-config", help="training config (JSON)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a predicted alignment against ground truth")
    e.add_argument("pred")
    e.add_argument("truth")
    e.add_argument("--format", choices=("json", "table"), default="json")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (MidiParseError, EmptySequenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except TrainingDivergence as exc:
        print(f"error: {exc} (dump: {exc.dump_path})", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
