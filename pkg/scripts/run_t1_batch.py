"""Run the 100-instance mismatched batch from configs/t1_batch.json and report timing."""

import argparse
import sys
import time
from pathlib import Path

from pnpcert.cli import run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default=str(ROOT / "runs" / "t1_batch"))
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    start = time.perf_counter()
    code = run_experiment(ROOT / "configs" / "t1_batch.json", args.out_dir, jobs=args.jobs)
    print(f"exit {code} after {time.perf_counter() - start:.1f}s; summary in {args.out_dir}/summary.csv")
    return code


if __name__ == "__main__":
    sys.exit(main())
