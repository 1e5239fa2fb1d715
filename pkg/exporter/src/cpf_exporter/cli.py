"""`cpf-export`: images + frozen backbone + word table -> engine feature files."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from cpf.errors import CpfError

from .export import export
from .spec import ExportSpec


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cpf-export",
        description=(
            "Export class/patch tokens of a frozen vision backbone, plus "
            "vocabulary text embeddings, into .cpff/.cpft files."
        ),
    )
    parser.add_argument("--backbone", choices=["vitb", "clip"], required=True)
    parser.add_argument("--blocks", default=None,
                        help="comma-separated 1-indexed shallow blocks (default 3,6,9; clip 6,12,18)")
    parser.add_argument("--data", required=True, help="dataset root: <attr>__<obj>/ image folders")
    parser.add_argument("--splits", required=True, help="split file defining the vocabulary and pairs")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--glove", default=None, help="word-vector text table (vitb path)")
    parser.add_argument("--resize", type=int, default=224, help="short-side resize / crop size")
    parser.add_argument("--weights", choices=["pretrained", "random"], default="pretrained",
                        help="'random' gives seeded frozen weights for offline runs")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--batch", type=int, default=8, dest="batch_size")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(sys.argv[1:] if argv is None else argv)
    blocks = None
    if args.blocks:
        blocks = tuple(int(b) for b in args.blocks.split(","))
    try:
        spec = ExportSpec(
            backbone=args.backbone,
            data_root=Path(args.data),
            splits=Path(args.splits),
            out_dir=Path(args.out),
            blocks=blocks,
            resize=args.resize,
            weights=args.weights,
            seed=args.seed,
            glove=Path(args.glove) if args.glove else None,
            batch_size=args.batch_size,
        )
        result = export(spec)
    except (CpfError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    for name in ("train", "val", "test"):
        print(f"{name}: {result.counts[name]} images")
    if result.skipped:
        print(f"skipped {len(result.skipped)} unreadable images")
    print(f"wrote train.cpff, val.cpff, test.cpff, embeddings.cpft, splits.txt to {result.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
