import argparse
import sys

from .errors import FigvizError
from .render import FORMATS, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="figviz",
        description="Render a coverage-bias audit report into its figure set.",
    )
    parser.add_argument("--report", required=True, help="report.json from the audit run")
    parser.add_argument("--hexes", required=True, help="hex layout CSV (area_id,col,row)")
    parser.add_argument("--out", required=True, help="directory for figure files")
    parser.add_argument(
        "--format",
        action="append",
        choices=FORMATS,
        help="output format; repeat for several (default: png)",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    formats = tuple(dict.fromkeys(args.format)) if args.format else ("png",)
    try:
        written = render(args.report, args.hexes, args.out, formats=formats)
    except FigvizError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
