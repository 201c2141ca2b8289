"""samp-convert command line: convert checkpoints, emit parity fixtures."""

from __future__ import annotations

import argparse
import sys

from .convert import ConversionError, convert_checkpoint
from .fixture import emit_parity_fixture


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="samp-convert",
        description="Bridge huggingface-style BERT checkpoints to the engine archive layout.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="write an archive directory from a checkpoint")
    p.add_argument("--src", required=True, help="checkpoint directory (config.json + weights + vocab.txt)")
    p.add_argument("--out", required=True, help="archive output directory")
    p.add_argument("--task", required=True,
                   choices=("classification", "sequence_labeling", "text_matching"))
    p.add_argument("--num-labels", type=int, required=True)

    p = sub.add_parser("emit-fixture", help="serialize fixed-seed inputs and source logits")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True, help="fixture JSON path")
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--seed", type=int, default=1234)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "convert":
            report = convert_checkpoint(args.src, args.out, args.task, args.num_labels)
            print(
                f"converted {len(report.mapped)} tensors -> {args.out} "
                f"({len(report.unmapped_source_keys)} unmapped source keys, "
                f"report in conversion_report.json)"
            )
        else:
            doc = emit_parity_fixture(args.src, args.out, args.count, args.seed)
            print(f"wrote {len(doc['inputs'])} inputs with source logits -> {args.out}")
        return 0
    except ConversionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
