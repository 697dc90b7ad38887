"""Greedy accuracy across reward temperatures, trained from one set of frozen pairs.

Builds the upstream artifacts first when they are missing.

    python scripts/sweep_gamma.py --out runs/default --values 0,0.25,0.5,1,2,4
"""

import argparse
import sys

from stepwise_dpo.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--values", default="0,0.25,0.5,1,2,4")
    ap.add_argument("--seed", default="0")
    ap.add_argument("overrides", nargs="*")
    a = ap.parse_args()
    common = ["--out", a.out, "--seed", a.seed, *a.overrides]
    code = main(["run", "--stages", "gen-problems,sft-init,build-prm-data,train-prm,build-pairs",
                 "-q", *common])
    if code == 0:
        code = main(["sweep-gamma", "--values", a.values, "--with-vanilla", *common])
    sys.exit(code)
