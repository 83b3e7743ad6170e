"""Run the distribution II policy comparison with tuned baselines.

Usage: python scripts/distribution_ii_batch.py [--seeds N] [--out DIR]
Writes results.csv, summary.csv and tuning.csv to DIR.
"""

import argparse
import sys

from varsched.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser(description="distribution II policy comparison")
    parser.add_argument("--seeds", type=int, default=500)
    parser.add_argument("--out", default="results/dist_ii")
    args = parser.parse_args()
    return cli_main(["compare", "--model", "data/dist_ii.ini", "--policies", "offline,mpc,espc,exact,equal,immediate",
                     "--seeds", str(args.seeds), "--tune", "--out", args.out])


if __name__ == "__main__":
    sys.exit(main())
