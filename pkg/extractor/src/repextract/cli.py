"""CLI: repextract --export-dir DIR [--model vit_tiny] [--checkpoint PATH] ..."""

from __future__ import annotations

import argparse
import json
import sys

from .extract import ExtractJob, run_extract


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="repextract", description=__doc__)
    parser.add_argument("--export-dir", required=True,
                        help="directory holding manifest.json + adapted tensors")
    parser.add_argument("--model", default=None,
                        help="backbone name (default: vit_b_16 for image, ts_base for univariate)")
    parser.add_argument("--checkpoint", default=None, help="local state-dict path")
    parser.add_argument("--pooling", default="mean", choices=("mean", "cls"))
    parser.add_argument("--resize-policy", default="resize", choices=("resize", "tile"))
    parser.add_argument("--no-imagenet-norm", action="store_true")
    parser.add_argument("--out-dir", default=None)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--batch-size", type=int, default=8)
    args = parser.parse_args(argv)

    from .formats import read_manifest
    try:
        manifest = read_manifest(args.export_dir)
        model = args.model or ("vit_b_16" if manifest["adapter_kind"] == "image" else "ts_base")
        job = ExtractJob(export_dir=args.export_dir, model=model, checkpoint=args.checkpoint,
                         pooling=args.pooling, resize_policy=args.resize_policy,
                         normalize=not args.no_imagenet_norm, out_dir=args.out_dir,
                         seed=args.seed, batch_size=args.batch_size)
        report = run_extract(job)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
