"""msboost-plot: render one experiment CSV into one image.

Exit codes mirror the msboost CLI: 0 on success, 2 for bad inputs (unknown
kind, missing file or columns).
"""

from __future__ import annotations

import argparse
import sys

from .render import FigureJob, SchemaError, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msboost-plot",
        description="render msboost experiment CSVs into static figures",
    )
    parser.add_argument("--input", required=True, help="experiment CSV to plot")
    parser.add_argument(
        "--kind", required=True, help="figure kind: transition_sweep or cmse_curve"
    )
    parser.add_argument("--out", required=True, help="output image path (png, pdf, svg)")
    parser.add_argument("--title", default=None, help="optional title override")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = FigureJob(input_csv=args.input, kind=args.kind, output=args.out, title=args.title)
        render(job)
    except (SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
