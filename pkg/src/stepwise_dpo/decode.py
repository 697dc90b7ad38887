"""Inference strategies: greedy, self-consistency, best-of-n and step-wise beam search."""

from __future__ import annotations

import csv
import time
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .env import Problem, Solution, check_answer
from .policy import PolicyParams, greedy_decode, sample_solutions
from .prm import PrmParams, min_aggregate, prm_score, step_scores
from .rng import stream

STRATEGIES = ("greedy", "sc", "bon", "sbs")


@dataclass(frozen=True)
class DecodeConfig:
    n_samples: int = 15
    temperature: float = 0.8
    b1: int = 5
    b2: int = 1
    C: int = 16
    beam_score: str = "newest"  # or "min": min PRM score over the partial solution

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not self.b1 >= self.b2 >= 1:
            raise ValueError("need b1 >= b2 >= 1")
        if self.C < 1:
            raise ValueError("C must be >= 1")
        if self.beam_score not in ("newest", "min"):
            raise ValueError(f"unknown beam_score {self.beam_score!r}")


def majority_answer(answers: Sequence[int]) -> int:
    """Most frequent answer; ties go to the smallest value."""
    counts = Counter(answers)
    best = max(counts.values())
    return min(a for a, c in counts.items() if c == best)


def self_consistency(policy: PolicyParams, p: Problem, cfg: DecodeConfig,
                     rng: np.random.Generator) -> int:
    sols = sample_solutions(policy, p, cfg.n_samples, cfg.temperature, rng)
    return majority_answer([s.answer for s in sols])


def select_best(score_lists: Sequence[Sequence[float]]) -> int:
    """Index of the highest min-aggregated score; ties by mean score, then position."""
    keys = [(min_aggregate(s), float(np.mean(s)), -k) for k, s in enumerate(score_lists)]
    return -max(keys)[2]


def best_of_n(policy: PolicyParams, prm: PrmParams, p: Problem, cfg: DecodeConfig,
              rng: np.random.Generator) -> Solution:
    sols = sample_solutions(policy, p, cfg.n_samples, cfg.temperature, rng)
    return sols[select_best([step_scores(prm, p, s) for s in sols])]


def sample_next_values(policy: PolicyParams, p: Problem, prefix: Sequence[int], n: int,
                       temperature: float, rng: np.random.Generator) -> list[int]:
    """``n`` draws of the next step value only; same draw procedure as full sampling."""
    f, true_next = policy.fmap.state(p, prefix)
    z = policy.theta[f] / temperature
    w = np.exp(z - z.max())
    cum = np.cumsum(w)
    u = rng.random(n) * cum[-1]
    slots = np.minimum((cum[None, :] <= u[:, None]).sum(axis=1), policy.B - 1)
    values = policy.fmap.slot_values(f, true_next)
    return [values[j] for j in slots]


def _beam_score(prm: PrmParams, p: Problem, steps: tuple[int, ...], mode: str,
                prev: float | None) -> float:
    s = prm_score(prm, p, steps[:-1], steps[-1])
    if mode == "min" and prev is not None:
        return min(s, prev)
    return s


def step_beam_search(policy: PolicyParams, prm: PrmParams, p: Problem, cfg: DecodeConfig,
                     rng: np.random.Generator, trace: list | None = None) -> Solution:
    """Expand each beam by b1 sampled steps, keep the b2 best by PRM score, up to C levels.

    Beams are ranked by the score of their newest step (``beam_score="min"``
    ranks by the minimum step score so far). Identical extensions within one
    level are merged. If ``trace`` is given, the (candidates, kept) sizes of
    every level are appended to it.
    """
    cfg.validate()

    def keep_top(cands: list[tuple[tuple[int, ...], float]]):
        # stable sort: equal scores keep generation order
        return sorted(cands, key=lambda c: -c[1])[:cfg.b2]

    seen: dict[tuple[int, ...], float] = {}
    for v in sample_next_values(policy, p, (), cfg.b1, cfg.temperature, rng):
        steps = (v,)
        if steps not in seen:
            seen[steps] = _beam_score(prm, p, steps, cfg.beam_score, None)
    beams = keep_top(list(seen.items()))
    if trace is not None:
        trace.append((len(seen), len(beams)))
    t = 1
    while t < cfg.C:
        if all(len(b) == p.depth for b, _ in beams):
            break
        seen = {}
        for steps, score in beams:
            if len(steps) == p.depth:
                seen.setdefault(steps, score)
                continue
            for v in sample_next_values(policy, p, steps, cfg.b1, cfg.temperature, rng):
                ext = steps + (v,)
                if ext not in seen:
                    seen[ext] = _beam_score(prm, p, ext, cfg.beam_score, score)
        beams = keep_top(list(seen.items()))
        if trace is not None:
            trace.append((len(seen), len(beams)))
        t += 1
    complete = [b for b in beams if len(b[0]) == p.depth]
    if complete:
        steps, _ = keep_top(complete)[0]
        return Solution(p.id, steps)
    steps, _ = beams[0]
    return Solution(p.id, steps, partial=True)


def decode_answer(strategy: str, policy: PolicyParams, prm: PrmParams | None, p: Problem,
                  cfg: DecodeConfig, rng: np.random.Generator) -> int:
    if strategy == "greedy":
        return greedy_decode(policy, p).answer
    if strategy == "sc":
        return self_consistency(policy, p, cfg, rng)
    if prm is None:
        raise ValueError(f"strategy {strategy!r} needs a PRM")
    if strategy == "bon":
        return best_of_n(policy, prm, p, cfg, rng).answer
    if strategy == "sbs":
        return step_beam_search(policy, prm, p, cfg, rng).answer
    raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")


@dataclass(frozen=True)
class AccuracyReport:
    strategy: str
    n_samples: int
    b1: int
    b2: int
    seed: int
    accuracy: float
    mean_seconds: float
    n_problems: int


def evaluate_accuracy(strategy: str, policy: PolicyParams, prm: PrmParams | None,
                      problems: Sequence[Problem], cfg: DecodeConfig,
                      seed: int = 0) -> AccuracyReport:
    """Fraction of problems solved. Every strategy draws from the same per-problem streams."""
    cfg.validate()
    hits = 0
    t0 = time.perf_counter()
    for p in problems:
        rng = stream(seed, "eval", p.id)
        ans = decode_answer(strategy, policy, prm, p, cfg, rng)
        hits += check_answer(Solution(p.id, (ans,)), p)
    elapsed = time.perf_counter() - t0
    n = len(problems)
    return AccuracyReport(strategy, cfg.n_samples, cfg.b1, cfg.b2, seed,
                          hits / n if n else 0.0, elapsed / n if n else 0.0, n)


CSV_FIELDS = ["strategy", "n_samples", "b1", "b2", "seed", "accuracy", "mean_seconds",
              "n_problems"]


def write_accuracy_csv(path, reports: Sequence[AccuracyReport], timing: bool = True) -> None:
    """One row per report. ``timing=False`` blanks wall-clock so files are reproducible."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in reports:
            row = asdict(r)
            if not timing:
                row["mean_seconds"] = ""
            w.writerow(row)
