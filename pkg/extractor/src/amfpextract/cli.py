"""Command-line entry points: `export` and `convert`."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .annotations import convert_annotations, write_annotation_lines
from .export import ExportConfig, export_pyramids, read_manifest


def cli(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="amfpextract")
    sub = parser.add_subparsers(dest="command", required=True)

    p_export = sub.add_parser("export", help="export AMFP feature pyramids")
    p_export.add_argument("manifest")
    p_export.add_argument("--out", required=True)
    p_export.add_argument("--layer", default=ExportConfig.layer)
    p_export.add_argument("--base-max-dim", type=int,
                          default=ExportConfig.base_max_dim)

    p_convert = sub.add_parser("convert", help="convert a VIA export")
    p_convert.add_argument("via_json")
    p_convert.add_argument("manifest")
    p_convert.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO)

    if args.command == "export":
        cfg = ExportConfig(layer=args.layer, base_max_dim=args.base_max_dim,
                           output_dir=args.out)
        updated = export_pyramids(args.manifest, cfg)
        print(f"exported {len(updated)} pyramids to {args.out}")
    else:
        with open(args.via_json) as fh:
            via = json.load(fh)
        rows, report = convert_annotations(via, read_manifest(args.manifest))
        write_annotation_lines(args.out, rows)
        print(f"wrote {report.converted} annotations to {args.out}; {report!r}")
        if report.unknown_images:
            return 2
    return 0


def main() -> None:
    sys.exit(cli())
