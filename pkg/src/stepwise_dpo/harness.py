"""Artifact-backed pipeline stages and the two sweep studies.

Every stage reads its inputs from an output directory, writes one artifact
and returns it. Artifacts carry a header with the config hash and master
seed. No artifact records wall-clock time, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import __version__
from .decode import STRATEGIES, AccuracyReport, evaluate_accuracy, write_accuracy_csv
from .dpo import train_vanilla_dpo
from .env import Problem, read_jsonl, write_jsonl
from .pairing import PreferencePair
from .pipeline import (SPLITS, ExperimentConfig, build_pair_stage, build_prm_data, make_problems,
                       sft_init, train_dpo_stage, train_prm_stage)
from .policy import PolicyParams, init_policy
from .prm import LabelCost, PrmExample, PrmParams
from .rng import stream

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
POLICY_CHOICES = ("dpo", "sft", "base")


class MissingArtifact(FileNotFoundError):
    """A stage input has not been produced yet."""


@dataclass(frozen=True)
class RunPaths:
    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    problems = property(lambda self: self.root / "problems.jsonl")
    sft_policy = property(lambda self: self.root / "sft-policy.params")
    prm_data = property(lambda self: self.root / "prm-data.jsonl")
    prm = property(lambda self: self.root / "prm.params")
    pairs = property(lambda self: self.root / "pairs.jsonl")
    policy = property(lambda self: self.root / "policy.params")
    metrics = property(lambda self: self.root / "metrics")
    report = property(lambda self: self.root / "report.json")

    def prepare(self) -> None:
        self.metrics.mkdir(parents=True, exist_ok=True)


# producer of each artifact, for error messages
_PRODUCER = {"problems.jsonl": "gen-problems", "sft-policy.params": "sft-init",
             "prm-data.jsonl": "build-prm-data", "prm.params": "train-prm",
             "pairs.jsonl": "build-pairs", "policy.params": "train-dpo"}


def _require(path: Path) -> Path:
    if not path.exists():
        hint = _PRODUCER.get(path.name)
        msg = f"missing artifact {path}"
        raise MissingArtifact(msg + (f"; run `{hint}` first" if hint else ""))
    return path


def artifact_header(cfg: ExperimentConfig, kind: str, **extra) -> dict:
    return {"artifact": kind, "format": FORMAT_VERSION, "package_version": __version__,
            "config_hash": cfg.config_hash(), "seed": cfg.seed, **extra}


def _check_header(cfg: ExperimentConfig, header: dict | None, path: Path) -> None:
    if header is None:
        raise ValueError(f"{path} has no header")
    if header.get("format") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported artifact format {header.get('format')!r}")
    if header.get("seed") != cfg.seed:
        log.warning("%s was written with seed %s, current seed is %s",
                    path.name, header.get("seed"), cfg.seed)


def _write_params(path: Path, params, header: dict) -> None:
    obj = json.loads(params.to_json())
    obj["header"].update(header)
    path.write_text(json.dumps(obj, sort_keys=True) + "\n", encoding="utf-8")


def _read_params(cfg: ExperimentConfig, path: Path, cls):
    text = _require(path).read_text(encoding="utf-8")
    _check_header(cfg, json.loads(text)["header"], path)
    return cls.from_json(text)


def _write_csv(path: Path, fields: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(fields))
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------- stages

def gen_problems(cfg: ExperimentConfig, paths: RunPaths) -> dict[str, list[Problem]]:
    cfg.validate()
    paths.prepare()
    probs = make_problems(cfg)
    counts = {s: len(probs[s]) for s in SPLITS}
    write_jsonl(paths.problems, (p.to_record() for s in SPLITS for p in probs[s]),
                artifact_header(cfg, "problems", counts=counts))
    return probs


def load_problems(cfg: ExperimentConfig, paths: RunPaths) -> dict[str, list[Problem]]:
    header, rows = read_jsonl(_require(paths.problems))
    _check_header(cfg, header, paths.problems)
    out: dict[str, list[Problem]] = {s: [] for s in SPLITS}
    for rec in rows:
        p = Problem.from_record(rec)
        out[p.split].append(p)
    return out


def sft_init_stage(cfg: ExperimentConfig, paths: RunPaths) -> PolicyParams:
    probs = load_problems(cfg, paths)
    policy = sft_init(cfg, probs["sft"])
    _write_params(paths.sft_policy, policy, artifact_header(cfg, "sft-policy"))
    return policy


def build_prm_data_stage(cfg: ExperimentConfig, paths: RunPaths,
                         N: int | None = None) -> tuple[list[PrmExample], LabelCost]:
    probs = load_problems(cfg, paths)
    policy = _read_params(cfg, paths.sft_policy, PolicyParams)
    data, cost = build_prm_data(cfg, policy, probs["prm"], N)
    n = cfg.budget.N if N is None else N
    hdr = artifact_header(cfg, "prm-data", N=n, M=cfg.budget.M,
                          cost=dataclasses.asdict(cost))
    write_jsonl(paths.prm_data, (e.to_record() for e in data), hdr)
    return data, cost


def load_prm_data(cfg: ExperimentConfig, paths: RunPaths) -> list[PrmExample]:
    header, rows = read_jsonl(_require(paths.prm_data))
    _check_header(cfg, header, paths.prm_data)
    return [PrmExample.from_record(r) for r in rows]


def train_prm_artifact(cfg: ExperimentConfig, paths: RunPaths) -> PrmParams:
    probs = load_problems(cfg, paths)
    data = load_prm_data(cfg, paths)
    prm, losses = train_prm_stage(cfg, data, probs["prm"])
    _write_params(paths.prm, prm, artifact_header(cfg, "prm"))
    paths.prepare()
    _write_csv(paths.metrics / "prm-train.csv", ["epoch", "bce"],
               [{"epoch": k, "bce": v} for k, v in enumerate(losses)])
    return prm


def build_pairs_stage(cfg: ExperimentConfig, paths: RunPaths) -> list[PreferencePair]:
    probs = load_problems(cfg, paths)
    policy = _read_params(cfg, paths.sft_policy, PolicyParams)
    prm = _read_params(cfg, paths.prm, PrmParams)
    pairs, skipped = build_pair_stage(cfg, policy, prm, probs["pref"])
    hdr = artifact_header(cfg, "pairs", n_pairs=len(pairs), skipped=len(skipped))
    write_jsonl(paths.pairs, (q.to_record() for q in pairs), hdr)
    return pairs


def load_pairs(cfg: ExperimentConfig, paths: RunPaths) -> list[PreferencePair]:
    header, rows = read_jsonl(_require(paths.pairs))
    _check_header(cfg, header, paths.pairs)
    return [PreferencePair.from_record(r) for r in rows]


def train_dpo_artifact(cfg: ExperimentConfig, paths: RunPaths,
                       gamma: float | None = None) -> PolicyParams:
    probs = load_problems(cfg, paths)
    sft = _read_params(cfg, paths.sft_policy, PolicyParams)
    pairs = load_pairs(cfg, paths)
    paths.prepare()
    res = train_dpo_stage(cfg, sft, pairs, probs["pref"], gamma=gamma,
                          metrics_path=paths.metrics / "dpo-train.jsonl")
    g = cfg.dpo.gamma if gamma is None else gamma
    _write_params(paths.policy, res.policy, artifact_header(cfg, "policy", gamma=g))
    return res.policy


def load_policy(cfg: ExperimentConfig, paths: RunPaths, which: str = "dpo") -> PolicyParams:
    if which == "dpo":
        return _read_params(cfg, paths.policy, PolicyParams)
    if which == "sft":
        return _read_params(cfg, paths.sft_policy, PolicyParams)
    if which == "base":
        # the untuned policy sft-init starts from
        return init_policy(cfg.fmap(), stream(cfg.seed, "base-policy"), cfg.sft.init_scale)
    raise ValueError(f"unknown policy {which!r}; choose from {POLICY_CHOICES}")


def eval_stage(cfg: ExperimentConfig, paths: RunPaths, strategies: Sequence[str] = ("greedy",),
               which: str = "dpo") -> list[AccuracyReport]:
    """Accuracy of one policy on the eval split; writes a CSV and report.json."""
    for s in strategies:
        if s not in STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}; choose from {STRATEGIES}")
    probs = load_problems(cfg, paths)
    policy = load_policy(cfg, paths, which)
    prm = None
    if any(s in ("bon", "sbs") for s in strategies):
        prm = _read_params(cfg, paths.prm, PrmParams)
    reports = [evaluate_accuracy(s, policy, prm, probs["eval"], cfg.decode, cfg.seed)
               for s in strategies]
    paths.prepare()
    write_accuracy_csv(paths.metrics / f"eval-{which}.csv", reports, timing=False)
    _update_report(cfg, paths, {f"eval/{which}": {r.strategy: r.accuracy for r in reports}})
    return reports


def _update_report(cfg: ExperimentConfig, paths: RunPaths, section: dict) -> None:
    report = {}
    if paths.report.exists():
        report = json.loads(paths.report.read_text(encoding="utf-8"))
        if report.get("header", {}).get("config_hash") != cfg.config_hash():
            report = {}
    report["header"] = artifact_header(cfg, "report")
    report.setdefault("results", {}).update(section)
    paths.report.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n",
                            encoding="utf-8")


# ---------------------------------------------------------------- sweeps

GAMMA_FIELDS = ["gamma", "greedy_accuracy", "final_margin", "final_loss", "n_pairs", "n_problems"]


def sweep_gamma(cfg: ExperimentConfig, paths: RunPaths, gammas: Sequence[float],
                *, with_vanilla: bool = False) -> list[dict]:
    """One policy per gamma from the same SFT policy, frozen pairs and seed.

    ``with_vanilla`` adds a row trained by plain DPO (gamma reported as "vanilla").
    """
    probs = load_problems(cfg, paths)
    sft = _read_params(cfg, paths.sft_policy, PolicyParams)
    pairs = load_pairs(cfg, paths)
    rows = []
    for g in gammas:
        res = train_dpo_stage(cfg, sft, pairs, probs["pref"], gamma=float(g))
        acc = evaluate_accuracy("greedy", res.policy, None, probs["eval"], cfg.decode,
                                cfg.seed).accuracy
        rows.append({"gamma": float(g), "greedy_accuracy": acc,
                     "final_margin": res.epoch_margins[-1], "final_loss": res.epoch_losses[-1],
                     "n_pairs": len(pairs), "n_problems": len(probs["eval"])})
        log.info("gamma=%g greedy accuracy %.4f", g, acc)
    if with_vanilla:
        dcfg = dataclasses.replace(cfg.dpo, seed=cfg.seed)
        pol = train_vanilla_dpo(sft, sft.copy(), pairs, probs["pref"], dcfg)
        acc = evaluate_accuracy("greedy", pol, None, probs["eval"], cfg.decode,
                                cfg.seed).accuracy
        rows.append({"gamma": "vanilla", "greedy_accuracy": acc, "final_margin": "",
                     "final_loss": "", "n_pairs": len(pairs), "n_problems": len(probs["eval"])})
    paths.prepare()
    _write_csv(paths.metrics / "sweep-gamma.csv", GAMMA_FIELDS, rows)
    _update_report(cfg, paths, {"sweep-gamma": {str(r["gamma"]): r["greedy_accuracy"]
                                                for r in rows}})
    return rows


N_FIELDS = ["N", "rollouts", "generated_steps", "solutions", "n_examples",
            "bon_accuracy", "greedy_accuracy", "n_samples", "n_problems"]


def sweep_n(cfg: ExperimentConfig, paths: RunPaths, ns: Sequence[int],
            which: str = "dpo") -> list[dict]:
    """One PRM per simulation count N, each scored by best-of-n with a fixed policy.

    N=0 builds outcome-broadcast labels. Only the CSV and report are written;
    the stage artifacts of the main run are left untouched.
    """
    probs = load_problems(cfg, paths)
    sft = _read_params(cfg, paths.sft_policy, PolicyParams)
    policy = load_policy(cfg, paths, which)
    greedy = evaluate_accuracy("greedy", policy, None, probs["eval"], cfg.decode,
                               cfg.seed).accuracy
    rows = []
    for n in ns:
        data, cost = build_prm_data(cfg, sft, probs["prm"], int(n))
        prm, _ = train_prm_stage(cfg, data, probs["prm"])
        bon = evaluate_accuracy("bon", policy, prm, probs["eval"], cfg.decode, cfg.seed).accuracy
        rows.append({"N": int(n), **dataclasses.asdict(cost), "n_examples": len(data),
                     "bon_accuracy": bon, "greedy_accuracy": greedy,
                     "n_samples": cfg.decode.n_samples, "n_problems": len(probs["eval"])})
        log.info("N=%d rollouts=%d bon accuracy %.4f", n, cost.rollouts, bon)
    paths.prepare()
    _write_csv(paths.metrics / "sweep-n.csv", N_FIELDS, rows)
    _update_report(cfg, paths, {"sweep-n": {str(r["N"]): {"bon_accuracy": r["bon_accuracy"],
                                                          "rollouts": r["rollouts"]}
                                            for r in rows}})
    return rows


STAGES = ("gen-problems", "sft-init", "build-prm-data", "train-prm", "build-pairs",
          "train-dpo", "eval")


def run_all(cfg: ExperimentConfig, paths: RunPaths, stages: Sequence[str] = STAGES,
            strategies: Sequence[str] = STRATEGIES) -> None:
    """Run the selected stages in order; ``eval`` scores both the SFT and DPO policies."""
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stages {sorted(unknown)}; choose from {STAGES}")
    steps = {
        "gen-problems": lambda: gen_problems(cfg, paths),
        "sft-init": lambda: sft_init_stage(cfg, paths),
        "build-prm-data": lambda: build_prm_data_stage(cfg, paths),
        "train-prm": lambda: train_prm_artifact(cfg, paths),
        "build-pairs": lambda: build_pairs_stage(cfg, paths),
        "train-dpo": lambda: train_dpo_artifact(cfg, paths),
        "eval": lambda: [eval_stage(cfg, paths, strategies, w) for w in ("sft", "dpo")],
    }
    for name in STAGES:
        if name in stages:
            log.info("stage %s", name)
            steps[name]()
