"""Tabular softmax step-policy with exact log-probabilities and gradients.

The policy keeps one row of B logits per state feature (step index, previous
claimed value, op kind). Column j of a row scores candidate slot j, where
slot 0 is the true next value and the other slots are fixed perturbations of
it. Candidates are *listed* in ascending value order, which is the order used
for tie-breaking, so slot 0 gets no positional advantage.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .env import (OP_KINDS, Problem, Solution, Step, UsageError, apply_op,
                  gold_trace, offset_table, previous_value, state_index)

PARAMS_VERSION = 1


class DomainError(ValueError):
    """A step value is not among the candidates of its state."""


class TrainingError(RuntimeError):
    """Non-finite gradient or divergent loss during training."""


@dataclass(frozen=True)
class FeatureMap:
    V: int
    D: int
    B: int
    op_kinds: tuple[str, ...] = OP_KINDS
    perturb: str = "shift"
    spread: int = 0

    def __post_init__(self):
        table = offset_table(self.V, self.D, self.B, len(self.op_kinds), self.perturb, self.spread)
        inverse = np.full((len(table), self.V), -1, dtype=np.int64)
        inverse[np.arange(len(table))[:, None], table % self.V] = np.arange(self.B)
        object.__setattr__(self, "offsets", table)
        object.__setattr__(self, "_slot_of", inverse)

    @property
    def n_features(self) -> int:
        return self.D * self.V * len(self.op_kinds)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_features, self.B)

    def config_hash(self) -> str:
        blob = json.dumps([self.V, self.D, self.B, list(self.op_kinds), self.perturb, self.spread])
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_header(self) -> dict:
        return {"V": self.V, "D": self.D, "B": self.B, "op_kinds": list(self.op_kinds),
                "perturb": self.perturb, "spread": self.spread}

    @classmethod
    def from_header(cls, h: dict) -> "FeatureMap":
        return cls(h["V"], h["D"], h["B"], tuple(h["op_kinds"]), h.get("perturb", "shift"),
                   h.get("spread", 0))

    def feature(self, p: Problem, i: int, prev: int) -> int:
        if p.V != self.V or p.depth > self.D:
            raise UsageError(f"problem {p.id} (V={p.V}, D={p.depth}) outside feature map "
                             f"(V={self.V}, D={self.D})")
        return state_index(self.V, len(self.op_kinds), i, prev, self.op_kinds.index(p.ops[i][0]))

    def state(self, p: Problem, prefix: Sequence[int]) -> tuple[int, int]:
        """(feature id, true next value) of the state reached by ``prefix``."""
        i = len(prefix)
        if i >= p.depth:
            raise UsageError("prefix already covers every op")
        prev = previous_value(p, prefix)
        return self.feature(p, i, prev), apply_op(p.ops[i], prev, p.V)

    def slot_values(self, f: int, true_next: int) -> list[int]:
        return [int((true_next + o) % self.V) for o in self.offsets[f]]

    def slot(self, f: int, true_next: int, value: int) -> int:
        j = int(self._slot_of[f, (value - true_next) % self.V])
        if j < 0:
            raise DomainError(f"value {value} is not a candidate around {true_next}")
        return j

    def cell(self, p: Problem, prefix: Sequence[int], value: int) -> tuple[int, int]:
        f, true_next = self.state(p, prefix)
        return f, self.slot(f, true_next, value)


@dataclass
class PolicyParams:
    fmap: FeatureMap
    theta: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.theta is None:
            self.theta = np.zeros(self.fmap.shape)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != self.fmap.shape:
            raise ValueError(f"theta shape {self.theta.shape} != {self.fmap.shape}")

    @property
    def B(self) -> int:
        return self.fmap.B

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.fmap, self.theta.copy())

    def step_distribution(self, p: Problem, prefix: Sequence[int],
                          temperature: float = 1.0) -> tuple[list[int], np.ndarray]:
        """Candidate values in ascending order and their sampling probabilities."""
        f, true_next = self.fmap.state(p, prefix)
        values = self.fmap.slot_values(f, true_next)
        order = np.argsort(values, kind="stable")
        z = self.theta[f] / temperature
        z = z - z.max()
        probs = np.exp(z)
        probs /= probs.sum()
        return [values[j] for j in order], probs[order]

    def to_json(self) -> str:
        header = {"version": PARAMS_VERSION, "fmap_hash": self.fmap.config_hash(),
                  "fmap": self.fmap.to_header()}
        return json.dumps({"header": header, "theta": self.theta.ravel().tolist()})

    @classmethod
    def from_json(cls, text: str) -> "PolicyParams":
        obj = json.loads(text)
        h = obj["header"]
        fmap = FeatureMap.from_header(h["fmap"])
        if h["fmap_hash"] != fmap.config_hash():
            raise ValueError("feature-map hash mismatch in parameter file")
        return cls(fmap, np.array(obj["theta"], dtype=np.float64).reshape(fmap.shape))


def logsumexp(z: np.ndarray, axis=-1, keepdims=False) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def _as_value(s) -> int:
    return s.claimed_value if isinstance(s, Step) else int(s)


def step_logprob(params: PolicyParams, p: Problem, prefix: Sequence[int], s) -> float:
    f, j = params.fmap.cell(p, prefix, _as_value(s))
    row = params.theta[f]
    return float(row[j] - logsumexp(row))


def solution_cells(fmap: FeatureMap, p: Problem, y: Solution) -> tuple[np.ndarray, np.ndarray]:
    """Feature rows and slot columns visited by ``y``; independent of theta."""
    if len(y.steps) > p.depth:
        raise UsageError("solution longer than the problem")
    rows = np.empty(len(y.steps), dtype=np.int64)
    cols = np.empty(len(y.steps), dtype=np.int64)
    prev = p.start
    for i, v in enumerate(y.steps):
        rows[i] = fmap.feature(p, i, prev)
        cols[i] = fmap.slot(rows[i], apply_op(p.ops[i], prev, p.V), v)
        prev = v
    return rows, cols


def cell_logprobs(theta: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    z = theta[rows]
    return z[np.arange(len(rows)), cols] - logsumexp(z, axis=1)


def step_logprobs(params: PolicyParams, p: Problem, y: Solution) -> np.ndarray:
    return cell_logprobs(params.theta, *solution_cells(params.fmap, p, y))


def solution_logprob(params: PolicyParams, p: Problem, y: Solution) -> float:
    return float(step_logprobs(params, p, y).sum())


def grad_step_logprob(params: PolicyParams, p: Problem, prefix: Sequence[int], s,
                      out: np.ndarray | None = None, weight: float = 1.0) -> np.ndarray:
    """Gradient of log pi(s | prefix) w.r.t. theta, scaled by ``weight``.

    Only the row of the state's feature is nonzero: ``onehot(slot) - softmax(row)``.
    When ``out`` is given the scaled gradient is accumulated into it in place.
    """
    f, j = params.fmap.cell(p, prefix, _as_value(s))
    row = params.theta[f]
    probs = np.exp(row - logsumexp(row))
    g = -probs
    g[j] += 1.0
    if out is None:
        out = np.zeros_like(params.theta)
    out[f] += weight * g
    return out


def sample_solutions(params: PolicyParams, p: Problem, n: int, temperature: float,
                     rng: np.random.Generator, prefix: Sequence[int] = ()) -> list[Solution]:
    """Draw ``n`` ancestral samples continuing ``prefix`` (batched over samples)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    fm = params.fmap
    nk = len(fm.op_kinds)
    prefix = [int(v) for v in prefix]
    prev = np.full(n, previous_value(p, prefix), dtype=np.int64)
    cols = []
    for i in range(len(prefix), p.depth):
        kind, c = p.ops[i]
        fm.feature(p, i, 0)  # validates the problem against the map
        feats = (i * fm.V + prev) * nk + fm.op_kinds.index(kind)
        z = params.theta[feats] / temperature
        z -= z.max(axis=1, keepdims=True)
        w = np.exp(z)
        cum = np.cumsum(w, axis=1)
        u = rng.random(n) * cum[:, -1]
        slots = np.minimum((cum <= u[:, None]).sum(axis=1), fm.B - 1)
        if kind == "add":
            true_next = (prev + c) % fm.V
        elif kind == "sub":
            true_next = (prev - c) % fm.V
        else:
            true_next = (prev * c) % fm.V
        prev = (true_next + fm.offsets[feats, slots]) % fm.V
        cols.append(prev)
    if not cols:
        return [Solution(p.id, tuple(prefix)) for _ in range(n)]
    mat = np.stack(cols, axis=1)
    return [Solution(p.id, tuple(prefix) + tuple(int(v) for v in row)) for row in mat]


def sample_solution(params: PolicyParams, p: Problem, temperature: float,
                    rng: np.random.Generator) -> Solution:
    return sample_solutions(params, p, 1, temperature, rng)[0]


def greedy_decode(params: PolicyParams, p: Problem) -> Solution:
    steps: list[int] = []
    for _ in range(p.depth):
        f, true_next = params.fmap.state(p, steps)
        values = params.fmap.slot_values(f, true_next)
        order = np.argsort(values, kind="stable")
        best = int(np.argmax(params.theta[f][order]))
        steps.append(values[order[best]])
    return Solution(p.id, tuple(steps))


def _check_finite(grad: np.ndarray) -> None:
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite entries in gradient")


def apply_gradient(params: PolicyParams, grad: np.ndarray, learning_rate: float) -> PolicyParams:
    """Plain gradient-descent step, returning new params."""
    _check_finite(grad)
    if grad.shape != params.theta.shape:
        raise ValueError("gradient shape mismatch")
    return PolicyParams(params.fmap, params.theta - learning_rate * grad)


@dataclass
class AdamW:
    """AdamW moments for in-place updates of a parameter array."""
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        _check_finite(grad)
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return theta - lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * theta)


def init_policy(fmap: FeatureMap, rng: np.random.Generator, scale: float = 1.0) -> PolicyParams:
    """Random base policy: i.i.d. normal logits standing in for an untuned model."""
    return PolicyParams(fmap, scale * rng.standard_normal(fmap.shape))


def sft_train(params: PolicyParams, problems: Sequence[Problem], *, correctness: float = 0.8,
              epochs: int = 1, lr: float = 0.5, rng: np.random.Generator) -> PolicyParams:
    """Cross-entropy on gold chains with label smoothing toward ``correctness``.

    At convergence every visited state puts probability ``correctness`` on the
    true next value and spreads the rest evenly over the perturbations.
    """
    out = params.copy()
    B = out.fmap.B
    target = np.full(B, (1.0 - correctness) / max(B - 1, 1))
    target[0] = correctness if B > 1 else 1.0
    rows = []
    for p in problems:
        trace = gold_trace(p)
        for i in range(p.depth):
            rows.append(out.fmap.state(p, trace[:i])[0])
    rows = np.array(rows, dtype=np.int64)
    for _ in range(epochs):
        for f in rows[rng.permutation(len(rows))]:
            row = out.theta[f]
            probs = np.exp(row - logsumexp(row))
            out.theta[f] = row - lr * (probs - target)
    return out
