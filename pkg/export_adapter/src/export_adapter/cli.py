"""Command line: export an image folder into engine-consumable dumps."""

from __future__ import annotations

import argparse
import sys

from .export import run_export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iminer-export",
        description="Run a detector and a feature backbone over images and "
        "write detections.json, fmaps/*.fmap, and manifest.json.",
    )
    parser.add_argument("--images", required=True, help="input image directory")
    parser.add_argument(
        "--det-model",
        default="torchvision:fasterrcnn_resnet50_fpn",
        help="detection model reference (torchvision:<name>)",
    )
    parser.add_argument(
        "--ssl-model",
        default="torchvision:resnet50",
        help="feature backbone reference (torchvision:<name>)",
    )
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--score-floor", type=float, default=0.05,
                        help="drop detections below this confidence")
    parser.add_argument("--num-classes", type=int, default=91,
                        help="detector head size including background")
    parser.add_argument("--novel", default="",
                        help="comma-separated novel class ids (dense, 0-based)")
    parser.add_argument("--layer", default="layer4",
                        help="backbone stage to cut at (layer1..layer4)")
    parser.add_argument("--stride", type=float, default=None,
                        help="override the recorded feature stride")
    parser.add_argument("--det-weights", default=None, help="state-dict path")
    parser.add_argument("--ssl-weights", default=None, help="state-dict path")
    parser.add_argument("--seed", type=int, default=0,
                        help="initialization seed when no weights are given")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    novel = tuple(int(tok) for tok in args.novel.split(",") if tok.strip())
    try:
        manifest = run_export(
            args.images,
            args.det_model,
            args.ssl_model,
            args.out,
            score_floor=args.score_floor,
            num_classes=args.num_classes,
            novel_classes=novel,
            layer=args.layer,
            stride_override=args.stride,
            det_weights=args.det_weights,
            ssl_weights=args.ssl_weights,
            seed=args.seed,
        )
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1
    print(
        f"exported {len(manifest.images)} images "
        f"({len(manifest.skipped)} skipped) to {args.out}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
