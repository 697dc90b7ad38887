"""Process reward model: self-generated step labels, BCE training, step scoring."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .env import Problem, Solution, UsageError, check_answer, gold_answer
from .policy import PARAMS_VERSION, FeatureMap, PolicyParams, sample_solutions, solution_cells
from .rng import stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplingBudget:
    """M solutions per problem, N simulations per step (0 = outcome labels), T pairs per side."""
    M: int = 32
    N: int = 0
    T: int = 4

    def validate(self) -> None:
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.N < 0:
            raise ValueError("N must be >= 0")
        if not 1 <= self.T or 2 * self.T > self.M:
            raise ValueError(f"need 1 <= T <= M/2, got T={self.T}, M={self.M}")


@dataclass(frozen=True)
class PrmExample:
    problem_id: str
    prefix: tuple[int, ...]
    step: int
    label: float

    def to_record(self) -> dict:
        return {"problem_id": self.problem_id, "prefix": list(self.prefix),
                "step": self.step, "label": self.label}

    @classmethod
    def from_record(cls, rec: dict) -> "PrmExample":
        return cls(str(rec["problem_id"]), tuple(int(v) for v in rec["prefix"]),
                   int(rec["step"]), float(rec["label"]))


@dataclass
class LabelCost:
    """Instrumented label-construction counters.

    ``rollouts`` counts one unit per (solution, step, simulation); outcome
    labels reuse the sampled solution as the single simulation of each step.
    ``generated_steps`` counts every step drawn from the policy.
    """
    rollouts: int = 0
    generated_steps: int = 0
    solutions: int = 0

    def __iadd__(self, other: "LabelCost") -> "LabelCost":
        self.rollouts += other.rollouts
        self.generated_steps += other.generated_steps
        self.solutions += other.solutions
        return self


@dataclass
class PrmParams:
    fmap: FeatureMap
    table: np.ndarray = field(default=None)
    bias: float = 0.0

    def __post_init__(self):
        if self.table is None:
            self.table = np.zeros(self.fmap.shape)
        self.table = np.asarray(self.table, dtype=np.float64)

    def to_json(self) -> str:
        header = {"version": PARAMS_VERSION, "fmap_hash": self.fmap.config_hash(),
                  "fmap": self.fmap.to_header()}
        return json.dumps({"header": header, "bias": self.bias,
                           "table": self.table.ravel().tolist()})

    @classmethod
    def from_json(cls, text: str) -> "PrmParams":
        obj = json.loads(text)
        h = obj["header"]
        fmap = FeatureMap.from_header(h["fmap"])
        if h["fmap_hash"] != fmap.config_hash():
            raise ValueError("feature-map hash mismatch in parameter file")
        return cls(fmap, np.array(obj["table"]).reshape(fmap.shape), float(obj["bias"]))


def mc_label(policy: PolicyParams, p: Problem, y: Solution, i: int, N: int,
             rng: np.random.Generator, *, temperature: float = 1.0,
             cost: LabelCost | None = None) -> float:
    """Fraction of N rollouts continuing after step ``i`` that reach the gold answer.

    The final step has nothing left to simulate, so each of its N rollouts is
    the solution itself and the label is the outcome indicator.
    """
    if N < 1:
        raise ValueError("mc_label needs N >= 1")
    gold = gold_answer(p)
    if cost is not None:
        cost.rollouts += N
    if i == p.depth - 1:
        return 1.0 if y.answer == gold else 0.0
    rolls = sample_solutions(policy, p, N, temperature, rng, prefix=y.steps[:i + 1])
    if cost is not None:
        cost.generated_steps += N * (p.depth - i - 1)
    return sum(r.answer == gold for r in rolls) / N


def simple_label(y: Solution, p: Problem) -> list[float]:
    return [1.0 if check_answer(y, p) else 0.0] * len(y.steps)


def label_solution(policy, p, y, N, rng, *, temperature=1.0, cost=None) -> list[float]:
    if N == 0:
        if cost is not None:
            cost.rollouts += len(y.steps)
        return simple_label(y, p)
    return [mc_label(policy, p, y, i, N, rng, temperature=temperature, cost=cost)
            for i in range(len(y.steps))]


def build_prm_dataset(policy: PolicyParams, problems: Sequence[Problem], budget: SamplingBudget,
                      *, seed: int, temperature: float = 0.8,
                      cost: LabelCost | None = None) -> list[PrmExample]:
    """Sample M solutions per problem and label every step (N=0: outcome labels)."""
    budget.validate()
    cost = cost if cost is not None else LabelCost()
    out: list[PrmExample] = []
    for p in problems:
        rng = stream(seed, "prm-data", p.id)
        sols = sample_solutions(policy, p, budget.M, temperature, rng)
        cost.solutions += len(sols)
        cost.generated_steps += len(sols) * p.depth
        for y in sols:
            labels = label_solution(policy, p, y, budget.N, rng,
                                    temperature=temperature, cost=cost)
            for i, lab in enumerate(labels):
                out.append(PrmExample(p.id, y.steps[:i], y.steps[i], lab))
    return out


def _cells(examples: Sequence[PrmExample], problems: Mapping[str, Problem],
           fmap: FeatureMap) -> np.ndarray:
    flat = np.empty(len(examples), dtype=np.int64)
    for k, ex in enumerate(examples):
        f, j = fmap.cell(problems[ex.problem_id], ex.prefix, ex.step)
        flat[k] = f * fmap.B + j
    return flat


def bce(scores: np.ndarray, labels: np.ndarray) -> float:
    s = np.clip(scores, 1e-12, 1 - 1e-12)
    return float(-np.mean(labels * np.log(s) + (1 - labels) * np.log(1 - s)))


def train_prm(examples: Sequence[PrmExample], problems: Mapping[str, Problem] | Iterable[Problem],
              fmap: FeatureMap, *, epochs: int = 1, lr: float = 1.0, batch_size: int = 256,
              bias_lr: float = 1.0, seed: int = 0, threshold: float | None = None,
              init: PrmParams | None = None) -> tuple[PrmParams, list[float]]:
    """Minimise mean BCE between step scores and labels.

    Plain mini-batch gradient descent. Returns the trained params and the mean
    training loss recorded after each epoch (index 0 holds the loss at
    initialisation). Cells seen rarely stay close to the shared bias, which
    starts at the log-odds of the mean label and moves with its own step
    size ``bias_lr`` (it sees every row, so it needs a far smaller step than
    the table). ``threshold`` turns soft labels into hard ones before training.
    """
    if not examples:
        raise UsageError("cannot train a PRM on an empty dataset")
    if not isinstance(problems, Mapping):
        problems = {p.id: p for p in problems}
    prm = PrmParams(fmap) if init is None else PrmParams(fmap, init.table.copy(), init.bias)
    cells = _cells(examples, problems, fmap)
    labels = np.array([ex.label for ex in examples], dtype=np.float64)
    if threshold is not None:
        labels = (labels >= threshold).astype(np.float64)
    if init is None:
        mean = float(np.clip(labels.mean(), 1e-6, 1 - 1e-6))
        prm.bias = float(np.log(mean / (1 - mean)))
    table = prm.table.ravel()
    rng = stream(seed, "prm-train")

    def full_loss() -> float:
        return bce(expit(table[cells] + prm.bias), labels)

    history = [full_loss()]
    n = len(cells)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            c = cells[idx]
            resid = expit(table[c] + prm.bias) - labels[idx]
            table -= lr * np.bincount(c, weights=resid, minlength=table.size) / len(idx)
            prm.bias -= bias_lr * float(resid.mean())
        history.append(full_loss())
    prm.table = table.reshape(fmap.shape)
    return prm, history


def prm_score(prm: PrmParams, p: Problem, prefix: Sequence[int], step: int) -> float:
    f, j = prm.fmap.cell(p, prefix, int(step))
    return float(expit(prm.table[f, j] + prm.bias))


def step_scores(prm: PrmParams, p: Problem, y: Solution) -> list[float]:
    rows, cols = solution_cells(prm.fmap, p, y)
    return expit(prm.table[rows, cols] + prm.bias).tolist()


def min_aggregate(scores: Sequence[float]) -> float:
    if len(scores) == 0:
        raise UsageError("min_aggregate of an empty score list")
    return float(min(scores))
