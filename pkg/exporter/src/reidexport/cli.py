"""Command line: export feature maps from labeled images."""

from __future__ import annotations

import argparse
import logging
import sys

from .export import ExportJob, export_features


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reidexport", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    p = sub.add_parser("export", help="dump backbone feature maps and a manifest")
    p.add_argument("--images", required=True, help="directory containing the images")
    p.add_argument("--labels", required=True,
                   help="CSV with filename, person_id, camera_id, split")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--weights", default="pretrained",
                   help='"pretrained", "random", or a ResNet-50 state-dict path')
    p.add_argument("--batch", type=int, default=8)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command != "export":
        parser.print_help(sys.stderr)
        return 1
    job = ExportJob(image_dir=args.images, labels_csv=args.labels, out_dir=args.out,
                    weights=args.weights, batch_size=args.batch)
    result = export_features(job)
    print(f"wrote {len(result.exported)} feature maps and {result.manifest_path}"
          + (f" ({len(result.skipped)} skipped)" if result.skipped else ""))
    return 0


if __name__ == "__main__":
    sys.exit(main())
