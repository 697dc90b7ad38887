"""Step-wise-reward preference pairs built from PRM-scored samples."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .env import Problem, Solution, check_answer
from .policy import PolicyParams, sample_solutions, solution_logprob
from .prm import PrmParams, SamplingBudget, step_scores

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepRewardTrace:
    solution: Solution
    rewards: tuple[float, ...]
    mean_reward: float

    @classmethod
    def of(cls, solution: Solution, rewards: Sequence[float]) -> "StepRewardTrace":
        rewards = tuple(float(r) for r in rewards)
        if len(rewards) != len(solution.steps):
            raise ValueError("one reward per step required")
        return cls(solution, rewards, float(np.mean(rewards)))

    def to_record(self) -> dict:
        return {"steps": list(self.solution.steps), "rewards": list(self.rewards)}


@dataclass(frozen=True)
class PreferencePair:
    problem_id: str
    preferred: StepRewardTrace
    dispreferred: StepRewardTrace

    def to_record(self) -> dict:
        return {"problem_id": self.problem_id, "w": self.preferred.to_record(),
                "l": self.dispreferred.to_record()}

    @classmethod
    def from_record(cls, rec: dict) -> "PreferencePair":
        pid = str(rec["problem_id"])

        def side(d):
            return StepRewardTrace.of(Solution(pid, tuple(int(v) for v in d["steps"])),
                                      d["rewards"])
        return cls(pid, side(rec["w"]), side(rec["l"]))


def score_solution(prm: PrmParams, p: Problem, y: Solution) -> StepRewardTrace:
    return StepRewardTrace.of(y, step_scores(prm, p, y))


def build_pairs(policy: PolicyParams, prm: PrmParams, p: Problem, budget: SamplingBudget,
                rng: np.random.Generator, *, temperature: float = 0.8,
                shuffle: bool = False) -> list[PreferencePair]:
    """Top-T correct x bottom-T incorrect samples by mean step reward.

    Duplicate step sequences are dropped before ranking. Ties on mean reward
    fall back to higher policy log-probability, then first-sampled order.
    ``shuffle`` emits the same pairs in random order.
    """
    budget.validate()
    seen: dict[tuple[int, ...], Solution] = {}
    for y in sample_solutions(policy, p, budget.M, temperature, rng):
        seen.setdefault(y.steps, y)
    correct, incorrect = [], []
    for order, y in enumerate(seen.values()):
        tr = score_solution(prm, p, y)
        key = (tr, solution_logprob(policy, p, y), order)
        (correct if check_answer(y, p) else incorrect).append(key)
    if not correct or not incorrect:
        log.info("skipping %s: %d correct / %d incorrect unique samples",
                 p.id, len(correct), len(incorrect))
        return []
    correct.sort(key=lambda k: (-k[0].mean_reward, -k[1], k[2]))
    incorrect.sort(key=lambda k: (k[0].mean_reward, -k[1], k[2]))
    top = [k[0] for k in correct[:budget.T]]
    bottom = [k[0] for k in incorrect[:budget.T]]
    pairs = [PreferencePair(p.id, w, l) for w in top for l in bottom]
    if shuffle:
        pairs = [pairs[k] for k in rng.permutation(len(pairs))]
    return pairs
