#!/usr/bin/env python3
"""Test PSNR and file size of a trained model truncated to each SH degree."""
import argparse
import sys
import tempfile
from pathlib import Path

from anchorsplat.io import load_dataset, load_ply, truncate_sh_file
from anchorsplat.train import evaluate


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", required=True)
    ap.add_argument("--data", required=True)
    args = ap.parse_args(argv)

    ds = load_dataset(args.data)
    src = load_ply(args.model)
    tmp = Path(tempfile.mkdtemp())
    print(f"{'degree':>6s} {'psnr':>8s} {'ssim':>7s} {'params':>7s} {'bytes':>9s}")
    for degree in range(src.max_degree, -1, -1):
        stats = truncate_sh_file(args.model, degree, tmp / f"d{degree}.ply")
        m = evaluate(load_ply(tmp / f"d{degree}.ply"), ds, ds.test_ids, (0.0, 0.0, 0.0))
        ratio = stats["params_out"] / stats["params_in"]
        print(f"{degree:6d} {m['psnr']:8.3f} {m['ssim']:7.4f} {ratio:7.3f} {stats['bytes_out']:9d}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
