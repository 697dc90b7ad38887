"""Chain-arithmetic reasoning tasks.

A problem is a start value plus a list of modular operations. A solution
claims one intermediate value per operation, so every operation is exactly
one reasoning step and every per-step quantity can be computed exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

OP_KINDS = ("add", "sub", "mul")


class ConfigError(ValueError):
    """Invalid environment or generator configuration."""


class UsageError(ValueError):
    """An operation was called with arguments it does not accept."""


class StateSpaceTooLarge(RuntimeError):
    """Exact enumeration refused: the remaining tree exceeds the bound."""


@dataclass(frozen=True)
class GenConfig:
    V: int = 10
    D: int = 4
    op_kinds: tuple[str, ...] = OP_KINDS
    max_const: int = 5
    stride: int = 1  # start values and add/sub constants are multiples of this

    def validate(self) -> None:
        if self.V < 2:
            raise ConfigError(f"modulus V must be >= 2, got {self.V}")
        if self.D < 1:
            raise ConfigError(f"depth D must be >= 1, got {self.D}")
        if not self.op_kinds or any(k not in OP_KINDS for k in self.op_kinds):
            raise ConfigError(f"op kinds must be a nonempty subset of {OP_KINDS}")
        if self.max_const < 1:
            raise ConfigError("max_const must be >= 1")
        if self.stride < 1 or self.V % self.stride or self.stride > min(self.max_const, self.V - 1):
            raise ConfigError(f"stride {self.stride} must divide V={self.V} and be <= max_const")


@dataclass(frozen=True)
class Problem:
    id: str
    start: int
    ops: tuple[tuple[str, int], ...]
    V: int
    split: str = ""

    def __post_init__(self):
        if self.V < 2:
            raise ConfigError(f"modulus V must be >= 2, got {self.V}")
        if len(self.ops) < 1:
            raise ConfigError("a problem needs at least one op")
        if not 0 <= self.start < self.V:
            raise ConfigError(f"start {self.start} outside [0, {self.V})")
        for kind, c in self.ops:
            if kind not in OP_KINDS:
                raise ConfigError(f"unknown op kind {kind!r}")
            if not 1 <= c < self.V:
                raise ConfigError(f"op constant {c} outside [1, {self.V})")

    @property
    def depth(self) -> int:
        return len(self.ops)

    def to_record(self) -> dict:
        rec = {"id": self.id, "start": self.start,
               "ops": [[k, c] for k, c in self.ops], "V": self.V}
        if self.split:
            rec["split"] = self.split
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Problem":
        return cls(id=str(rec["id"]), start=int(rec["start"]),
                   ops=tuple((str(k), int(c)) for k, c in rec["ops"]),
                   V=int(rec["V"]), split=rec.get("split", ""))


class Step(NamedTuple):
    index: int
    claimed_value: int


@dataclass(frozen=True)
class Solution:
    problem_id: str
    steps: tuple[int, ...]
    # set only by beam search when the step budget ran out
    partial: bool = field(default=False, compare=False)

    def __post_init__(self):
        if len(self.steps) == 0:
            raise UsageError("a solution needs at least one step")

    @property
    def answer(self) -> int:
        return self.steps[-1]

    def step(self, i: int) -> Step:
        return Step(i, self.steps[i])

    def to_record(self) -> dict:
        return {"problem_id": self.problem_id, "steps": list(self.steps)}

    @classmethod
    def from_record(cls, rec: dict) -> "Solution":
        return cls(str(rec["problem_id"]), tuple(int(v) for v in rec["steps"]))


def apply_op(op: tuple[str, int], value: int, V: int) -> int:
    kind, c = op
    if kind == "add":
        return (value + c) % V
    if kind == "sub":
        return (value - c) % V
    return (value * c) % V


def generate_problem(rng_seed: int, cfg: GenConfig = GenConfig(), *,
                     problem_id: str | None = None, split: str = "") -> Problem:
    cfg.validate()
    rng = np.random.default_rng(rng_seed)
    hi = min(cfg.max_const, cfg.V - 1)
    k = cfg.stride
    start = k * int(rng.integers(cfg.V // k))
    ops = []
    for _ in range(cfg.D):
        kind = cfg.op_kinds[int(rng.integers(len(cfg.op_kinds)))]
        if kind == "mul" or k == 1:
            c = int(rng.integers(1, hi + 1))
        else:
            c = k * int(rng.integers(1, hi // k + 1))
        ops.append((kind, c))
    pid = problem_id if problem_id is not None else f"p{rng_seed}"
    return Problem(pid, start, tuple(ops), cfg.V, split)


def gold_trace(p: Problem) -> list[int]:
    out, v = [], p.start
    for op in p.ops:
        v = apply_op(op, v, p.V)
        out.append(v)
    return out


def gold_answer(p: Problem) -> int:
    return gold_trace(p)[-1]


def gold_solution(p: Problem) -> Solution:
    return Solution(p.id, tuple(gold_trace(p)))


def check_answer(s: Solution, p: Problem) -> bool:
    if s.problem_id != p.id:
        raise UsageError(f"solution for {s.problem_id!r} checked against {p.id!r}")
    return s.answer == gold_answer(p)


def previous_value(p: Problem, prefix: Sequence[int]) -> int:
    return prefix[-1] if len(prefix) else p.start


def perturbation_offsets(B: int, V: int) -> tuple[int, ...]:
    """Offsets for the B candidates of a state: 0 (the true value), then +1, -1, +2, -2, ..."""
    if B < 1:
        raise ConfigError("need at least one candidate per state")
    offs = [0]
    k = 1
    while len(offs) < B:
        offs.append(k)
        if len(offs) < B:
            offs.append(-k)
        k += 1
    if len({o % V for o in offs}) != B:
        raise ConfigError(f"B={B} candidates are not distinct modulo V={V}")
    return tuple(offs)


PERTURB_SCHEMES = ("shift", "scatter")


def offset_table(V: int, D: int, B: int, n_kinds: int, scheme: str = "shift",
                 spread: int = 0) -> np.ndarray:
    """Per-state candidate offsets, one row per (step, previous value, op kind).

    ``shift`` gives every state the offsets 0, +1, -1, +2, ... . ``scatter``
    keeps 0 in column 0 and fills the rest with distinct nonzero offsets in
    [-spread, spread] (any residue when ``spread`` is 0), drawn once from a
    generator keyed on (V, B, n_kinds, spread) so rows do not depend on D.
    A wider spread makes wrong answers more varied and cancelling errors rarer.
    """
    n = D * V * n_kinds
    if scheme == "shift":
        return np.tile(np.array(perturbation_offsets(B, V), dtype=np.int64), (n, 1))
    if scheme != "scatter":
        raise ConfigError(f"unknown perturbation scheme {scheme!r}; choose from {PERTURB_SCHEMES}")
    if spread < 0:
        raise ConfigError("spread must be >= 0")
    if spread == 0:
        pool = np.arange(1, V)
    else:
        pool = np.unique(np.concatenate([np.arange(1, spread + 1), -np.arange(1, spread + 1)]) % V)
        pool = pool[pool != 0]
    if len(pool) < B - 1:
        raise ConfigError(f"B={B} candidates are not distinct modulo V={V} with spread {spread}")
    rng = np.random.default_rng([V, B, n_kinds, spread])
    picks = np.argsort(rng.random((n, len(pool))), axis=1, kind="stable")[:, :B - 1]
    return np.concatenate([np.zeros((n, 1), dtype=np.int64), pool[picks]], axis=1)


def state_index(V: int, n_kinds: int, i: int, prev: int, kind: int) -> int:
    return (i * V + prev) * n_kinds + kind


def candidate_values(p: Problem, prefix: Sequence[int], B: int, scheme: str = "shift",
                     op_kinds: Sequence[str] = OP_KINDS, spread: int = 0) -> list[int]:
    """Candidate next values, listed in slot order (slot 0 is the true next value)."""
    i = len(prefix)
    if i >= p.depth:
        raise UsageError("prefix already covers every op")
    prev = previous_value(p, prefix)
    true_next = apply_op(p.ops[i], prev, p.V)
    if scheme == "shift":
        offs = perturbation_offsets(B, p.V)
    else:
        table = offset_table(p.V, p.depth, B, len(op_kinds), scheme, spread)
        offs = table[state_index(p.V, len(op_kinds), i, prev, list(op_kinds).index(p.ops[i][0]))]
    return [int((true_next + o) % p.V) for o in offs]


def enumerate_success_prob(policy, p: Problem, prefix: Sequence[int], *,
                           temperature: float = 1.0, max_paths: int = 1_000_000) -> float:
    """Exact probability that continuing ``prefix`` with ``policy`` ends on the gold answer.

    ``policy`` must provide ``step_distribution(p, prefix, temperature)`` returning
    candidate values and their probabilities. Zero-probability branches are pruned,
    so a deterministic policy yields exactly 0.0 or 1.0.
    """
    prefix = list(prefix)
    remaining = p.depth - len(prefix)
    if remaining < 0:
        raise UsageError("prefix longer than the problem")
    gold = gold_answer(p)
    if remaining == 0:
        return 1.0 if prefix[-1] == gold else 0.0
    B = policy.B
    if B ** remaining > max_paths:
        raise StateSpaceTooLarge(
            f"{B}^{remaining} paths exceeds bound {max_paths}; shrink V, B or D")

    def walk(pref: list[int]) -> float:
        if len(pref) == p.depth:
            return 1.0 if pref[-1] == gold else 0.0
        values, probs = policy.step_distribution(p, pref, temperature)
        total = 0.0
        for v, q in zip(values, probs):
            if q > 0.0:
                total += q * walk(pref + [int(v)])
        return total

    return min(1.0, walk(prefix))


def write_jsonl(path, records: Iterable[dict], header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        if header is not None:
            f.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> tuple[dict | None, list[dict]]:
    header, rows = None, []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "header" in rec and len(rec) == 1:
                header = rec["header"]
            else:
                rows.append(rec)
    return header, rows
