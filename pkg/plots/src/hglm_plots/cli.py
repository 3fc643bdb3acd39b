"""Script entry: hglm-plots INPUT.csv KIND OUTPUT.png [options]."""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, PlotError, PlotSpec, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hglm-plots",
        description="Render an hglm CSV artifact (sweep, metrics, or paired comparison) to an image.",
    )
    parser.add_argument("input_csv", help="path to the CSV to plot")
    parser.add_argument("kind", choices=KINDS, help="plot kind")
    parser.add_argument("output", help="image path; format from the extension (.png/.svg/.pdf)")
    parser.add_argument("--y-column", help="override the y column (default: val_loss/train_loss/total)")
    parser.add_argument("--group-by", help="column that splits rows into series")
    parser.add_argument("--baseline-column", default="baseline",
                        help="rows truthy here become dashed reference lines")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = PlotSpec(
        input_csv=args.input_csv,
        kind=args.kind,
        out_path=args.output,
        y_column=args.y_column,
        group_by=args.group_by,
        baseline_column=args.baseline_column,
    )
    try:
        render(spec)
    except PlotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
