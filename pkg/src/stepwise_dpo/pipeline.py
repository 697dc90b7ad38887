"""Experiment configuration and the in-memory pipeline stages."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

from .decode import DecodeConfig, evaluate_accuracy
from .dpo import DpoConfig, TrainResult, train_full_step_dpo
from .env import GenConfig, Problem, generate_problem
from .pairing import PreferencePair, build_pairs
from .policy import FeatureMap, PolicyParams, init_policy, sft_train
from .prm import LabelCost, PrmExample, PrmParams, SamplingBudget, build_prm_dataset, train_prm
from .rng import stream

SPLITS = ("sft", "prm", "pref", "eval")


@dataclass(frozen=True)
class SftConfig:
    init_scale: float = 1.0
    correctness: float = 0.9
    epochs: int = 10
    lr: float = 0.5


@dataclass(frozen=True)
class PrmTrainConfig:
    epochs: int = 6
    lr: float = 20.0
    bias_lr: float = 1.0
    batch_size: int = 256
    threshold: float | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    env: GenConfig = GenConfig(V=47, D=4)
    B: int = 4
    perturb: str = "shift"
    spread: int = 0
    n_sft: int = 300
    n_prm: int = 800
    n_pref: int = 1200
    n_eval: int = 3000
    temperature: float = 0.8
    sft: SftConfig = SftConfig()
    budget: SamplingBudget = SamplingBudget()
    prm: PrmTrainConfig = PrmTrainConfig()
    dpo: DpoConfig = DpoConfig()
    decode: DecodeConfig = DecodeConfig()
    seed: int = 0

    def fmap(self) -> FeatureMap:
        return FeatureMap(self.env.V, self.env.D, self.B, tuple(self.env.op_kinds),
                          self.perturb, self.spread)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def validate(self) -> None:
        self.env.validate()
        self.fmap()
        self.budget.validate()
        self.dpo.validate()
        self.decode.validate()
        for split in SPLITS:
            if getattr(self, f"n_{split}") < 1:
                raise ValueError(f"n_{split} must be >= 1")

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with ``section.key`` or top-level overrides, e.g. ``{"dpo.gamma": 0}``."""
        top: dict = {}
        nested: dict[str, dict] = {}
        for key, value in changes.items():
            if "." in key:
                sec, name = key.split(".", 1)
                nested.setdefault(sec, {})[name] = value
            else:
                top[key] = value
        for sec, vals in nested.items():
            top[sec] = dataclasses.replace(getattr(self, sec), **vals)
        return dataclasses.replace(self, **top)


_SECTIONS = {"env": GenConfig, "sft": SftConfig, "budget": SamplingBudget,
             "prm": PrmTrainConfig, "dpo": DpoConfig, "decode": DecodeConfig}


def _coerce(raw: str, like):
    raw = raw.strip()
    if isinstance(like, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    if like is None:
        return None if raw.lower() in ("", "none") else float(raw)
    return raw


def parse_overrides(cfg: ExperimentConfig, items: dict[str, str]) -> ExperimentConfig:
    """Apply string-valued ``section.key`` overrides, typed after the current values."""
    typed = {}
    for key, raw in items.items():
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in _SECTIONS:
                raise KeyError(f"unknown config section {sec!r}")
            owner = getattr(cfg, sec)
        else:
            sec, name, owner = None, key, cfg
        if not hasattr(owner, name):
            raise KeyError(f"unknown config key {key!r}")
        typed[key] = _coerce(raw, getattr(owner, name))
    return cfg.replace(**typed)


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Read an INI-style key-value file; ``[run]`` holds top-level keys."""
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys such as budget.N are case-sensitive
    with open(path, encoding="utf-8") as f:
        parser.read_file(f)
    items = {}
    for sec in parser.sections():
        for key, value in parser.items(sec):
            items[key if sec == "run" else f"{sec}.{key}"] = value
    return parse_overrides(base or ExperimentConfig(), items)


def make_problems(cfg: ExperimentConfig) -> dict[str, list[Problem]]:
    out = {}
    for split in SPLITS:
        n = getattr(cfg, f"n_{split}")
        base = int(stream(cfg.seed, "problems", split).integers(2**31))
        out[split] = [generate_problem(base + k, cfg.env, problem_id=f"{split}-{k:05d}",
                                       split=split) for k in range(n)]
    return out


def sft_init(cfg: ExperimentConfig, sft_problems: Sequence[Problem]) -> PolicyParams:
    base = init_policy(cfg.fmap(), stream(cfg.seed, "base-policy"), cfg.sft.init_scale)
    return sft_train(base, sft_problems, correctness=cfg.sft.correctness,
                     epochs=cfg.sft.epochs, lr=cfg.sft.lr, rng=stream(cfg.seed, "sft"))


def build_prm_data(cfg: ExperimentConfig, policy: PolicyParams, prm_problems: Sequence[Problem],
                   N: int | None = None) -> tuple[list[PrmExample], LabelCost]:
    budget = cfg.budget if N is None else dataclasses.replace(cfg.budget, N=N)
    cost = LabelCost()
    data = build_prm_dataset(policy, prm_problems, budget, seed=cfg.seed,
                             temperature=cfg.temperature, cost=cost)
    return data, cost


def train_prm_stage(cfg: ExperimentConfig, examples, problems) -> tuple[PrmParams, list[float]]:
    return train_prm(examples, problems, cfg.fmap(), epochs=cfg.prm.epochs, lr=cfg.prm.lr, bias_lr=cfg.prm.bias_lr,
                     batch_size=cfg.prm.batch_size, seed=cfg.seed, threshold=cfg.prm.threshold)


def build_pair_stage(cfg: ExperimentConfig, policy: PolicyParams, prm: PrmParams,
                     pref_problems: Sequence[Problem]) -> tuple[list[PreferencePair], list[str]]:
    pairs, skipped = [], []
    for p in pref_problems:
        got = build_pairs(policy, prm, p, cfg.budget, stream(cfg.seed, "pairs", p.id),
                          temperature=cfg.temperature)
        if not got:
            skipped.append(p.id)
        pairs.extend(got)
    return pairs, skipped


def train_dpo_stage(cfg: ExperimentConfig, policy: PolicyParams, pairs, problems,
                    gamma: float | None = None, metrics_path=None) -> TrainResult:
    dcfg = cfg.dpo if gamma is None else dataclasses.replace(cfg.dpo, gamma=gamma)
    dcfg = dataclasses.replace(dcfg, seed=cfg.seed)
    ref = policy.copy()  # frozen snapshot taken right before preference training
    return train_full_step_dpo(policy, ref, pairs, problems, dcfg, metrics_path=metrics_path)


@dataclass
class PipelineState:
    problems: dict[str, list[Problem]] = field(default_factory=dict)
    sft_policy: PolicyParams | None = None
    prm_data: list[PrmExample] = field(default_factory=list)
    label_cost: LabelCost | None = None
    prm: PrmParams | None = None
    prm_losses: list[float] = field(default_factory=list)
    pairs: list[PreferencePair] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    dpo: TrainResult | None = None

    def lookup(self) -> dict[str, Problem]:
        return {p.id: p for ps in self.problems.values() for p in ps}


def run_pipeline(cfg: ExperimentConfig) -> PipelineState:
    """All training stages in memory (no artifacts)."""
    cfg.validate()
    st = PipelineState()
    st.problems = make_problems(cfg)
    st.sft_policy = sft_init(cfg, st.problems["sft"])
    st.prm_data, st.label_cost = build_prm_data(cfg, st.sft_policy, st.problems["prm"])
    st.prm, st.prm_losses = train_prm_stage(cfg, st.prm_data, st.problems["prm"])
    st.pairs, st.skipped = build_pair_stage(cfg, st.sft_policy, st.prm, st.problems["pref"])
    st.dpo = train_dpo_stage(cfg, st.sft_policy, st.pairs, st.problems["pref"])
    return st


def greedy_accuracy(cfg: ExperimentConfig, policy: PolicyParams, problems) -> float:
    return evaluate_accuracy("greedy", policy, None, problems, cfg.decode, cfg.seed).accuracy
