"""Repeat the end-to-end comparisons over several master seeds (in memory, no artifacts).

For each seed: greedy accuracy of the SFT policy and of DPO at each gamma, plus
the four decoding strategies on the default-gamma policy. Writes one CSV row per seed.

    python scripts/seed_robustness.py --seeds 0-7 --csv seeds.csv
"""

import argparse
import csv
import sys

from stepwise_dpo.decode import STRATEGIES, evaluate_accuracy
from stepwise_dpo.pipeline import ExperimentConfig, greedy_accuracy, run_pipeline, train_dpo_stage

GAMMAS = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0)


def seed_range(text):
    lo, _, hi = text.partition("-")
    return range(int(lo), int(hi or lo) + 1)


def one_seed(seed):
    cfg = ExperimentConfig(seed=seed)
    st = run_pipeline(cfg)
    probs = st.problems["eval"]
    row = {"seed": seed, "sft": greedy_accuracy(cfg, st.sft_policy, probs)}
    for g in GAMMAS:
        pol = train_dpo_stage(cfg, st.sft_policy, st.pairs, st.problems["pref"], gamma=g).policy
        row[f"gamma={g}"] = greedy_accuracy(cfg, pol, probs)
    for s in STRATEGIES:
        row[s] = evaluate_accuracy(s, st.dpo.policy, st.prm, probs, cfg.decode, seed).accuracy
    acc = [row[f"gamma={g}"] for g in GAMMAS]
    row["lift_ok"] = row["gamma=0.5"] > row["gamma=0.0"] > row["sft"]
    row["sweet_spot"] = max(acc[1:-1]) > max(acc[0], acc[-1])
    row["verify_ok"] = (row["bon"] >= row["sc"] - 0.01
                        and min(row["sc"], row["bon"], row["sbs"]) >= row["greedy"])
    return row


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=seed_range, default=seed_range("0-7"))
    ap.add_argument("--csv", default="-")
    a = ap.parse_args()
    rows = []
    for seed in a.seeds:
        rows.append(one_seed(seed))
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                       for k, v in rows[-1].items()), file=sys.stderr)
    f = sys.stdout if a.csv == "-" else open(a.csv, "w", newline="")
    w = csv.DictWriter(f, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)
