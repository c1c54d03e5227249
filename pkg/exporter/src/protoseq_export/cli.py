"""Command-line front end for the embeddings exporter."""
from __future__ import annotations

import argparse
import sys

from .export import ExportError, export_embeddings


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoseq-export",
        description="export per-token contextual embeddings in the "
                    "protoseq-emb v1 format",
    )
    parser.add_argument("--in", dest="corpus", required=True,
                        help="CoNLL-style column corpus")
    parser.add_argument("--model", required=True,
                        help="pretrained model name or local path")
    parser.add_argument("--out", dest="output", required=True,
                        help="embeddings file to write")
    parser.add_argument("--layer", type=int, default=-1,
                        help="hidden-state index (0 = embeddings, -1 = last)")
    parser.add_argument("--pooling", choices=["first", "mean"],
                        default="first",
                        help="subword-to-token pooling")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--token-col", type=int, default=0,
                        help="column holding the token surface")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        stats = export_embeddings(
            args.corpus, args.model, args.output, layer=args.layer,
            pooling=args.pooling, batch_size=args.batch_size,
            token_column=args.token_col,
        )
    except (ExportError, OSError) as exc:
        print(f"protoseq-export: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {stats.tokens} vectors (dim {stats.dim}, "
          f"{stats.sentences} sentences) to {args.output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
