"""Best-of-n accuracy and label-construction cost for PRMs built with N rollouts per step.

    python scripts/sweep_n.py --out runs/default --values 0,1,2,4,8
"""

import argparse
import sys

from stepwise_dpo.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--values", default="0,1,2,4,8")
    ap.add_argument("--seed", default="0")
    ap.add_argument("overrides", nargs="*")
    a = ap.parse_args()
    common = ["--out", a.out, "--seed", a.seed, *a.overrides]
    code = main(["run", "--stages", "gen-problems,sft-init,build-prm-data,train-prm,build-pairs,"
                 "train-dpo", "-q", *common])
    if code == 0:
        code = main(["sweep-n", "--values", a.values, *common])
    sys.exit(code)
