"""Command-line experiment runner.

Subcommands: inject-noise, reduce, train, analyze, eval. Every command is
deterministic given its flags and seed. Exit codes: 0 success, 1 usage
error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import corpus, dynamics, metrics, perturb, train
from .encoder import load_embeddings_file

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="protoseq",
                     description="few-shot sequence labeling toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inject-noise", parents=[], help="corrupt token labels")
    p.add_argument("--in", dest="input", required=True, help="input corpus")
    p.add_argument("--out", dest="output", required=True, help="output corpus")
    p.add_argument("--rate", type=float, required=True,
                   help="fraction of tokens to corrupt, in [0, 1]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask-out", default=None,
                   help="noise-mask sidecar path (default: <out>.mask)")

    p = sub.add_parser("reduce", help="keep only a few sentences of one class")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--class", dest="target_class", required=True)
    p.add_argument("--keep", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a head and emit run artifacts")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--train", dest="train_corpus", required=True)
    p.add_argument("--train-mask", default=None, help="noise-mask sidecar")
    p.add_argument("--val", dest="val_corpus", required=True)
    p.add_argument("--head", choices=["proto", "baseline"], default=None,
                   help="override the configured head")
    p.add_argument("--embeddings", default=None,
                   help="precomputed embeddings for the train corpus "
                        "(freezes the encoder)")
    p.add_argument("--val-embeddings", default=None,
                   help="precomputed embeddings for the val corpus "
                        "(required with --embeddings)")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("analyze", help="training-dynamics reports from a ledger")
    p.add_argument("--ledger", required=True, help="ledger CSV from train")
    p.add_argument("--mask", default=None, help="noise-mask sidecar")
    p.add_argument("--events", action="store_true")
    p.add_argument("--detect-noise", action="store_true")
    p.add_argument("--epoch", type=int, default=4,
                   help="epoch whose losses feed the detector")
    p.add_argument("--first-learning-histogram", action="store_true")
    p.add_argument("--out", default=None, help="report JSON path (default stdout)")

    p = sub.add_parser("eval", help="entity-level scores for a prediction file")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--per-class", action="store_true")
    p.add_argument("--out", default=None)
    return parser


def cmd_inject_noise(args) -> int:
    dataset = corpus.load_conll(args.input)
    noisy = perturb.inject_noise(dataset, args.rate, args.seed)
    mask_path = args.mask_out or args.output + ".mask"
    corpus.save_conll(noisy, args.output, mask_path=mask_path)
    return 0


def cmd_reduce(args) -> int:
    dataset = corpus.load_conll(args.input)
    reduced = perturb.reduce_few_shot(dataset, args.target_class, args.keep,
                                      args.seed)
    corpus.save_conll(reduced, args.output)
    return 0


def cmd_train(args) -> int:
    config = train.TrainConfig.from_file(args.config)
    if args.head:
        config.head = args.head
    train_set = corpus.load_conll(args.train_corpus, mask_path=args.train_mask)
    val_set = corpus.load_conll(args.val_corpus)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.embeddings:
        if not args.val_embeddings:
            raise ValueError("--embeddings requires --val-embeddings for "
                             "the validation corpus")
        encoder = load_embeddings_file(args.embeddings, train_set)
        val_encoder = load_embeddings_file(args.val_embeddings, val_set)
        rng = np.random.default_rng(config.seed)
        result = train.run_training_with_encoder(config, train_set, val_set,
                                                 encoder, rng,
                                                 eval_encoder=val_encoder)
    else:
        result = train.run_training(config, train_set, val_set)

    result.checkpoint.save(out_dir / "checkpoint.npz")
    with open(out_dir / "ledger.csv", "w", encoding="utf-8", newline="") as fh:
        result.ledger.write_csv(fh)
    with open(out_dir / "history.csv", "w", encoding="utf-8") as fh:
        train.write_history_csv(result.history, fh)
    return 0


def cmd_analyze(args) -> int:
    with open(args.ledger, encoding="utf-8") as fh:
        ledger = dynamics.EventLedger.read_csv(fh)
    mask = None
    if args.mask:
        with open(args.mask, encoding="utf-8") as fh:
            mask = [noisy for noisy, _ in corpus.read_noise_mask(fh)]
        if len(mask) != ledger.n_examples:
            raise ValueError(
                f"mask has {len(mask)} entries for {ledger.n_examples} examples"
            )

    report: dict = {}
    summary = None
    if args.events or args.first_learning_histogram:
        summary = dynamics.compute_events(ledger)
    if args.events:
        report["events"] = summary.to_dict()
    if args.first_learning_histogram:
        counts, never = dynamics.histogram_first_learning(summary)
        report["first_learning_histogram"] = {
            "counts": {str(k): v for k, v in sorted(counts.items())},
            "never_learned": never,
        }
    if args.detect_noise:
        losses = ledger.losses_at(args.epoch)
        result = dynamics.detect_noise(losses)
        section = result.to_dict()
        section["epoch"] = args.epoch
        if mask is not None and not result.degenerate:
            p, r, f1 = dynamics.detection_metrics(result.predicted_noisy, mask)
            section["precision"] = p
            section["recall"] = r
            section["f1"] = f1
        report["noise_detection"] = section
    if not report:
        raise ValueError("nothing to do: pass --events, --detect-noise, "
                         "or --first-learning-histogram")
    _emit_json(report, args.out)
    return 0


def cmd_eval(args) -> int:
    pred = corpus.load_conll(args.pred)
    gold = corpus.load_conll(args.gold)
    scores = metrics.entity_prf1(pred.observed_tags(), gold.gold_tags(),
                                 per_class=args.per_class)
    _emit_json(scores.to_dict(), args.out)
    return 0


def _emit_json(payload: dict, path: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


_COMMANDS = {
    "inject-noise": cmd_inject_noise,
    "reduce": cmd_reduce,
    "train": cmd_train,
    "analyze": cmd_analyze,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_ERROR
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"protoseq: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
