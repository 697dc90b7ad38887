"""Command-line entry point: ``stepwise-dpo <subcommand> [options] [key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .decode import STRATEGIES
from .env import ConfigError, UsageError
from .pipeline import ExperimentConfig, load_config, parse_overrides


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _strategies(text: str) -> list[str]:
    out = [x.strip() for x in text.split(",") if x.strip()]
    bad = [s for s in out if s not in STRATEGIES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown strategy {bad[0]!r}; choose from {STRATEGIES}")
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="runs/default", help="artifact directory")
    common.add_argument("--seed", type=int, help="master seed (overrides the config file)")
    common.add_argument("--config", help="INI config file; [run] holds top-level keys")
    common.add_argument("-q", "--quiet", action="store_true")
    common.add_argument("overrides", nargs="*", metavar="key=value",
                        help="config overrides such as dpo.gamma=1 or n_eval=500")

    ap = argparse.ArgumentParser(prog="stepwise-dpo",
                                 description="Step-wise reward-weighted DPO on chain arithmetic.")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-problems", parents=[common], help="generate all problem splits")
    sub.add_parser("sft-init", parents=[common], help="train the mostly-correct starting policy")
    p = sub.add_parser("build-prm-data", parents=[common], help="sample and label PRM data")
    p.add_argument("--N", type=int, help="rollouts per step; 0 broadcasts the outcome")
    sub.add_parser("train-prm", parents=[common], help="fit the step scorer")
    sub.add_parser("build-pairs", parents=[common], help="build step-reward preference pairs")
    p = sub.add_parser("train-dpo", parents=[common], help="preference-train the policy")
    p.add_argument("--gamma", type=float, help="reward temperature; 0 is plain DPO")
    p = sub.add_parser("eval", parents=[common], help="accuracy on the eval split")
    p.add_argument("--strategy", "--strategies", dest="strategies", type=_strategies,
                   default=["greedy"], help=f"comma list from {','.join(STRATEGIES)}")
    p.add_argument("--policy", choices=harness.POLICY_CHOICES, default="dpo")
    p = sub.add_parser("sweep-gamma", parents=[common], help="greedy accuracy per gamma")
    p.add_argument("--values", type=_floats, default=[0, 0.25, 0.5, 1, 2, 4])
    p.add_argument("--with-vanilla", action="store_true", help="add a plain-DPO row")
    p = sub.add_parser("sweep-n", parents=[common], help="best-of-n accuracy and cost per N")
    p.add_argument("--values", type=_ints, default=[0, 1, 2, 4, 8])
    p.add_argument("--policy", choices=harness.POLICY_CHOICES, default="dpo")
    p = sub.add_parser("run", parents=[common], help="run several stages in order")
    p.add_argument("--stages", default=",".join(harness.STAGES),
                   type=lambda s: [x.strip() for x in s.split(",") if x.strip()])
    p.add_argument("--strategies", type=_strategies, default=list(STRATEGIES))
    return ap


def make_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    items = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        items[key.strip()] = value
    cfg = parse_overrides(cfg, items)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    cfg.validate()
    return cfg


def _dispatch(args, cfg: ExperimentConfig, paths: harness.RunPaths) -> None:
    cmd = args.command
    if cmd == "gen-problems":
        probs = harness.gen_problems(cfg, paths)
        print(json.dumps({s: len(v) for s, v in probs.items()}))
    elif cmd == "sft-init":
        harness.sft_init_stage(cfg, paths)
        print(f"wrote {paths.sft_policy}")
    elif cmd == "build-prm-data":
        data, cost = harness.build_prm_data_stage(cfg, paths, args.N)
        print(f"{len(data)} examples, {cost.rollouts} rollouts")
    elif cmd == "train-prm":
        harness.train_prm_artifact(cfg, paths)
        print(f"wrote {paths.prm}")
    elif cmd == "build-pairs":
        pairs = harness.build_pairs_stage(cfg, paths)
        print(f"{len(pairs)} pairs")
    elif cmd == "train-dpo":
        harness.train_dpo_artifact(cfg, paths, args.gamma)
        print(f"wrote {paths.policy}")
    elif cmd == "eval":
        for r in harness.eval_stage(cfg, paths, args.strategies, args.policy):
            print(f"{args.policy} {r.strategy}: accuracy {r.accuracy:.4f} on {r.n_problems}")
    elif cmd == "sweep-gamma":
        for row in harness.sweep_gamma(cfg, paths, args.values, with_vanilla=args.with_vanilla):
            print(f"gamma={row['gamma']}: greedy accuracy {row['greedy_accuracy']:.4f}")
    elif cmd == "sweep-n":
        for row in harness.sweep_n(cfg, paths, args.values, args.policy):
            print(f"N={row['N']}: bon accuracy {row['bon_accuracy']:.4f}, "
                  f"rollouts {row['rollouts']}")
    elif cmd == "run":
        harness.run_all(cfg, paths, args.stages, args.strategies)
        print(f"artifacts in {paths.root}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = make_config(args)
        _dispatch(args, cfg, harness.RunPaths(args.out))
    except harness.MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ConfigError, UsageError, KeyError, ValueError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
