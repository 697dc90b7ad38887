"""DPO loss and the step-wise reward-weighted DPO update."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .env import Problem, Solution, UsageError
from .pairing import PreferencePair
from .policy import (AdamW, PolicyParams, TrainingError, cell_logprobs, grad_step_logprob,
                     solution_cells, solution_logprob)
from .rng import stream

log = logging.getLogger(__name__)

PREFERRED = "preferred"
DISPREFERRED = "dispreferred"


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.05
    gamma: float = 0.5
    learning_rate: float = 1000.0
    epochs: int = 1
    batch_size: int = 64
    optimizer: str = "sgd"  # or "adamw"
    weight_decay: float = 0.0
    lr_schedule: str = "constant"  # or "linear" (decay to 0)
    warmup_ratio: float = 0.0
    divergence_factor: float = 10.0
    seed: int = 0

    def validate(self) -> None:
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        if self.learning_rate < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("need learning_rate >= 0, epochs >= 1, batch_size >= 1")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "linear"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def implicit_reward(policy: PolicyParams, ref: PolicyParams, p: Problem, y: Solution,
                    beta: float) -> float:
    return beta * (solution_logprob(policy, p, y) - solution_logprob(ref, p, y))


def reward_margin(policy, ref, p: Problem, pair: PreferencePair, beta: float) -> float:
    return (implicit_reward(policy, ref, p, pair.preferred.solution, beta)
            - implicit_reward(policy, ref, p, pair.dispreferred.solution, beta))


def dpo_loss(policy: PolicyParams, ref: PolicyParams, p: Problem, pair: PreferencePair,
             beta: float) -> float:
    return float(-log_sigmoid(reward_margin(policy, ref, p, pair, beta)))


def alpha_weights(rewards: Sequence[float], gamma: float, side: str) -> np.ndarray:
    """Softmax of +gamma*r over a preferred solution's steps, of -gamma*r for a dispreferred one."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise UsageError("alpha_weights needs at least one reward")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if side == PREFERRED:
        z = gamma * r
    elif side == DISPREFERRED:
        z = -gamma * r
    else:
        raise ValueError(f"side must be {PREFERRED!r} or {DISPREFERRED!r}")
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


@dataclass
class _Steps:
    """Flattened steps of a set of pairs: preferred steps carry sign +1, dispreferred -1."""
    rows: np.ndarray
    cols: np.ndarray
    sign: np.ndarray
    pair: np.ndarray  # local pair index of each step
    alpha: np.ndarray
    ref_margin: np.ndarray  # per pair: log pi_ref(y_w) - log pi_ref(y_l)

    def take(self, idx: np.ndarray) -> "_Steps":
        local = np.full(len(self.ref_margin), -1, dtype=np.int64)
        local[idx] = np.arange(len(idx))
        sel = local[self.pair] >= 0
        return _Steps(self.rows[sel], self.cols[sel], self.sign[sel], local[self.pair[sel]],
                      self.alpha[sel], self.ref_margin[idx])


def _flatten(policy: PolicyParams, ref: PolicyParams, pairs: Sequence[PreferencePair],
             problems: Mapping[str, Problem], gamma: float | None) -> _Steps:
    rows, cols, sign, owner, alpha, ref_margin = [], [], [], [], [], []
    for k, pair in enumerate(pairs):
        p = problems[pair.problem_id]
        rm = 0.0
        for tr, sg, side in ((pair.preferred, 1.0, PREFERRED),
                             (pair.dispreferred, -1.0, DISPREFERRED)):
            r, c = solution_cells(policy.fmap, p, tr.solution)
            rm += sg * float(cell_logprobs(ref.theta, r, c).sum())
            rows.append(r)
            cols.append(c)
            sign.append(np.full(len(r), sg))
            owner.append(np.full(len(r), k, dtype=np.int64))
            if gamma is None:
                alpha.append(np.full(len(r), 1.0 / len(r)))
            else:
                alpha.append(alpha_weights(tr.rewards, gamma, side))
        ref_margin.append(rm)
    return _Steps(np.concatenate(rows), np.concatenate(cols), np.concatenate(sign),
                  np.concatenate(owner), np.concatenate(alpha), np.array(ref_margin))


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))


def _margins(theta: np.ndarray, st: _Steps, beta: float) -> np.ndarray:
    logp = _log_softmax_rows(theta[st.rows])[np.arange(len(st.rows)), st.cols]
    pol = np.bincount(st.pair, weights=st.sign * logp, minlength=len(st.ref_margin))
    return beta * (pol - st.ref_margin)


def _weighted_gradient(theta: np.ndarray, st: _Steps, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Sum over pairs of -beta*sigma(-margin)*[sum a^w grad log pi - sum a^l grad log pi]."""
    logq = _log_softmax_rows(theta[st.rows])
    n = len(st.rows)
    logp = logq[np.arange(n), st.cols]
    pol = np.bincount(st.pair, weights=st.sign * logp, minlength=len(st.ref_margin))
    margins = beta * (pol - st.ref_margin)
    if not np.all(np.isfinite(margins)):
        raise TrainingError("non-finite reward margin")
    factor = expit(-margins)
    wt = -beta * factor[st.pair] * st.sign * st.alpha
    g = -np.exp(logq) * wt[:, None]
    g[np.arange(n), st.cols] += wt
    out = np.zeros_like(theta)
    np.add.at(out, st.rows, g)
    if not np.all(np.isfinite(out)):
        raise TrainingError("non-finite gradient")
    return out, margins


def sigma_factor(policy, ref, p: Problem, pair: PreferencePair, beta: float) -> float:
    """sigma(r_l - r_w), the per-pair scale of both gradients."""
    return float(expit(-reward_margin(policy, ref, p, pair, beta)))


def full_step_gradient(policy: PolicyParams, ref: PolicyParams, p: Problem,
                       pair: PreferencePair, cfg: DpoConfig) -> np.ndarray:
    """-beta * sigma(r_l - r_w) * [sum_i a_i^w grad log pi(s_i^w) - sum_i a_i^l grad log pi(s_i^l)].

    The alpha weights and the sigma factor are constants with respect to theta.
    """
    st = _flatten(policy, ref, [pair], {pair.problem_id: p}, cfg.gamma)
    try:
        return _weighted_gradient(policy.theta, st, cfg.beta)[0]
    except TrainingError as e:
        raise TrainingError(f"{e} on pair for {pair.problem_id}") from None


def vanilla_dpo_gradient(policy: PolicyParams, ref: PolicyParams, p: Problem,
                         pair: PreferencePair, beta: float,
                         convention: str = "uniform") -> np.ndarray:
    """Unweighted DPO gradient.

    ``convention="sum"`` is the exact gradient of :func:`dpo_loss` (every step
    weighted 1). ``"uniform"`` weights each step 1/K per side, the scale at
    which the step-weighted gradient with gamma=0 coincides with it.
    """
    if convention not in ("sum", "uniform"):
        raise ValueError(f"unknown convention {convention!r}")
    factor = sigma_factor(policy, ref, p, pair, beta)
    out = np.zeros_like(policy.theta)
    for trace, sign in ((pair.preferred, 1.0), (pair.dispreferred, -1.0)):
        steps = trace.solution.steps
        per_step = 1.0 if convention == "sum" else 1.0 / len(steps)
        for i, v in enumerate(steps):
            grad_step_logprob(policy, p, steps[:i], v, out=out,
                              weight=-beta * factor * sign * per_step)
    if not np.all(np.isfinite(out)):
        raise TrainingError(f"non-finite gradient on pair for {pair.problem_id}")
    return out


@dataclass
class TrainResult:
    policy: PolicyParams
    history: list[dict] = field(default_factory=list)
    # mean reward margin and monitored loss over all pairs, before and after each epoch
    epoch_margins: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)


def _lr_at(step: int, total: int, cfg: DpoConfig) -> float:
    warm = int(round(cfg.warmup_ratio * total))
    if warm and step < warm:
        return cfg.learning_rate * (step + 1) / warm
    if cfg.lr_schedule == "linear":
        span = max(total - warm, 1)
        return cfg.learning_rate * max(0.0, 1.0 - (step - warm) / span)
    return cfg.learning_rate


def _dataset_stats(theta, steps: _Steps, beta) -> tuple[float, float]:
    m = _margins(theta, steps, beta)
    return float(m.mean()), float(np.mean(-log_sigmoid(m)))


def _problem_lookup(problems) -> Mapping[str, Problem]:
    if isinstance(problems, Mapping):
        return problems
    return {p.id: p for p in problems}


def train_full_step_dpo(policy: PolicyParams, ref: PolicyParams,
                        pairs: Sequence[PreferencePair], problems, cfg: DpoConfig,
                        metrics_path=None) -> TrainResult:
    """Mini-batch training with the step-wise weighted DPO gradient.

    Pairs are shuffled once per epoch by a stream derived from ``cfg.seed``.
    Each batch logs the monitored (vanilla) DPO loss, the mean implicit-reward
    margin and the gradient norm, all measured before the update.
    """
    cfg.validate()
    if not pairs:
        raise UsageError("no preference pairs to train on")
    problems = _problem_lookup(problems)
    theta = policy.theta.copy()
    steps = _flatten(policy, ref, pairs, problems, cfg.gamma)
    n_batches = math.ceil(len(pairs) / cfg.batch_size)
    total = n_batches * cfg.epochs
    opt = AdamW(weight_decay=cfg.weight_decay) if cfg.optimizer == "adamw" else None
    result = TrainResult(policy)
    m0, l0 = _dataset_stats(theta, steps, cfg.beta)
    result.epoch_margins.append(m0)
    result.epoch_losses.append(l0)
    initial_loss = None
    step = 0
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, "dpo-order", epoch).permutation(len(pairs))
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            grad, margins = _weighted_gradient(theta, steps.take(idx), cfg.beta)
            grad /= len(idx)
            loss = float(np.mean(-log_sigmoid(margins)))
            if initial_loss is None:
                initial_loss = loss
            elif loss > cfg.divergence_factor * initial_loss:
                raise TrainingError(f"diverged at step {step}: loss {loss:.4g} > "
                                    f"{cfg.divergence_factor} x initial {initial_loss:.4g}")
            lr = _lr_at(step, total, cfg)
            if opt is None:
                theta = theta - lr * grad
            else:
                theta = opt.step(theta, grad, lr)
            result.history.append({"step": step, "monitored_loss": loss,
                                   "mean_margin": float(margins.mean()),
                                   "grad_norm": float(np.linalg.norm(grad))})
            step += 1
        m, l = _dataset_stats(theta, steps, cfg.beta)
        result.epoch_margins.append(m)
        result.epoch_losses.append(l)
    result.policy = PolicyParams(policy.fmap, theta)
    if metrics_path is not None:
        write_metrics(metrics_path, result.history)
    return result


def train_vanilla_dpo(policy: PolicyParams, ref: PolicyParams,
                      pairs: Sequence[PreferencePair], problems, cfg: DpoConfig) -> PolicyParams:
    """Plain DPO with the per-step-mean gradient, sharing the batch order of the weighted trainer."""
    cfg.validate()
    problems = _problem_lookup(problems)
    current = policy.copy()
    n_batches = math.ceil(len(pairs) / cfg.batch_size)
    total = n_batches * cfg.epochs
    step = 0
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, "dpo-order", epoch).permutation(len(pairs))
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            grad = sum(vanilla_dpo_gradient(current, ref, problems[pairs[i].problem_id],
                                            pairs[i], cfg.beta) for i in idx) / len(idx)
            current = PolicyParams(current.fmap,
                                   current.theta - _lr_at(step, total, cfg) * grad)
            step += 1
    return current


def write_metrics(path, history: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in history:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
