"""Brute-force numpy oracles for the KL-regularized objective.

Nothing here goes through the training code path: log-probabilities are read
off a policy once and every sum is taken explicitly over the enumerated
response set.
"""
import json
import math
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np
import torch

from .config import BETA_GRID
from .errors import (
    DimensionMismatch, NonFiniteEvaluation, NonFiniteTilt, NonPositiveDenominator, NonPositiveInput, VocabMismatch,
)
from .policy import Policy, Prompt, Response, ResponseSpace, TabularPolicy, Vocab
from .reward import Beta, ExplicitRewardModel
from .utils import make_rng

SLACK_TOL = 1e-12
EQUALITY_SLACK = 1e-10
EQUALITY_PROPORTION = 1e-9


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


@dataclass
class TabularInstance:
    vocab: Vocab
    ref_logits: np.ndarray
    rewards: np.ndarray
    beta: float

    def __post_init__(self):
        self.ref_logits = np.asarray(self.ref_logits, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        Beta(self.beta)
        n = len(ResponseSpace.enumerate(self.vocab))
        if self.ref_logits.shape != self.rewards.shape or self.ref_logits.shape[1:] != (n,):
            raise DimensionMismatch(
                f"ref logits {self.ref_logits.shape} and rewards {self.rewards.shape} must both be (n_prompts, {n})"
            )
        if not (np.isfinite(self.rewards).all() and np.isfinite(self.ref_logits).all()):
            raise NonFiniteEvaluation("instance rewards and reference logits must be finite")

    @property
    def n_prompts(self) -> int:
        return self.rewards.shape[0]

    @property
    def prompts(self) -> List[Prompt]:
        return [Prompt(i) for i in range(self.n_prompts)]

    @property
    def responses(self) -> Tuple[Response, ...]:
        return ResponseSpace.enumerate(self.vocab).responses

    @property
    def ref_log_probs(self) -> np.ndarray:
        return self.ref_logits - _logsumexp(self.ref_logits)[:, None]

    @property
    def ref(self) -> Policy:
        return TabularPolicy.from_logits(self.vocab, self.ref_logits, frozen=True)

    @property
    def reward_table(self) -> ExplicitRewardModel:
        return ExplicitRewardModel.from_matrix(self.rewards, self.vocab)

    def log_partition(self) -> np.ndarray:
        """log Z(x) = log sum_y pi_ref(y|x) exp(r(x, y) / beta), max-shifted."""
        return _logsumexp(self.ref_log_probs + self.rewards / self.beta)

    @classmethod
    def random(
        cls, seed: int, n_prompts: int = 4, n_responses: int = 16, beta: float = 1.0,
        reward_scale: float = 1.0, ref_scale: float = 0.5,
    ) -> "TabularInstance":
        """Instance over ``Vocab(n_responses, 1)``, whose response set has exactly
        ``n_responses`` members. Rewards are uniform in [-reward_scale, reward_scale]."""
        rng = make_rng(seed, "instance")
        vocab = Vocab(n_responses, 1)
        ref_logits = rng.normal(0.0, ref_scale, size=(n_prompts, n_responses))
        rewards = rng.uniform(-reward_scale, reward_scale, size=(n_prompts, n_responses))
        return cls(vocab, ref_logits, rewards, beta)

    def to_json(self) -> dict:
        return {
            "vocab": {"size": self.vocab.size, "max_len": self.vocab.max_len},
            "prompts": list(range(self.n_prompts)),
            "responses": [list(y.tokens) for y in self.responses],
            "ref_logits": self.ref_logits.tolist(),
            "rewards": [
                {"prompt": p, "tokens": list(y.tokens), "reward": float(self.rewards[p, i])}
                for p in range(self.n_prompts) for i, y in enumerate(self.responses)
            ],
            "beta": self.beta,
        }

    def save(self, path: str):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)

    @classmethod
    def from_json(cls, doc: dict) -> "TabularInstance":
        vocab = Vocab(doc["vocab"]["size"], doc["vocab"]["max_len"])
        space = ResponseSpace.enumerate(vocab)
        ref_logits = np.asarray(doc["ref_logits"], dtype=np.float64)
        rewards = np.full(ref_logits.shape, np.nan)
        for e in doc["rewards"]:
            rewards[e["prompt"], space.index(Response.of(e["tokens"]))] = e["reward"]
        return cls(vocab, ref_logits, rewards, doc["beta"])

    @classmethod
    def load(cls, path: str) -> "TabularInstance":
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass
class GapReport:
    gaps: np.ndarray
    means: np.ndarray
    max_deviation: np.ndarray
    log_partition: np.ndarray
    lambda_estimate: np.ndarray

    @property
    def partition(self) -> np.ndarray:
        return np.exp(self.log_partition)


def _policy_log_probs(inst: TabularInstance, pi: Policy) -> np.ndarray:
    if pi.vocab != inst.vocab or pi.n_prompts != inst.n_prompts:
        raise VocabMismatch(
            f"policy over {pi.vocab}/{pi.n_prompts} prompts does not match instance "
            f"{inst.vocab}/{inst.n_prompts} prompts"
        )
    return pi.log_prob_table().detach().numpy().astype(np.float64)


def optimal_log_probs(inst: TabularInstance) -> np.ndarray:
    a = inst.ref_log_probs + inst.rewards / inst.beta
    shifted = a - np.max(a, axis=-1, keepdims=True)
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.sum(np.exp(shifted), axis=-1, keepdims=True)
    if not (np.isfinite(shifted).all() and np.isfinite(total).all()):
        raise NonFiniteTilt(f"exponential tilt overflows at beta={inst.beta}")
    return shifted - np.log(total)


def optimal_policy_closed_form(inst: TabularInstance) -> Policy:
    return TabularPolicy.from_logits(inst.vocab, optimal_log_probs(inst))


def objective_from_log_probs(inst: TabularInstance, log_pi: np.ndarray) -> float:
    p = np.exp(log_pi)
    per_prompt = np.sum(p * inst.rewards, axis=-1) - inst.beta * np.sum(p * (log_pi - inst.ref_log_probs), axis=-1)
    return float(np.mean(per_prompt))


def evaluate_objective(inst: TabularInstance, pi: Policy) -> float:
    """E_x E_{y~pi}[r] - beta * KL(pi || ref), prompts weighted uniformly."""
    return objective_from_log_probs(inst, _policy_log_probs(inst, pi))


def upper_bound(inst: TabularInstance) -> float:
    """beta * E_x[log Z(x)], the maximum of the objective."""
    return float(inst.beta * np.mean(inst.log_partition()))


def check_log_sum_inequality(a, b) -> Tuple[bool, float, bool]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"a has shape {a.shape}, b has shape {b.shape}")
    if np.any(b <= 0):
        raise NonPositiveDenominator("every b_i must be positive")
    if np.any(a < 0):
        raise NonPositiveInput("every a_i must be non-negative")
    pos = a > 0
    lhs = float(np.sum(a[pos] * np.log(a[pos] / b[pos])))
    a_sum, b_sum = float(a.sum()), float(b.sum())
    rhs = a_sum * math.log(a_sum / b_sum) if a_sum > 0 else 0.0
    slack = lhs - rhs
    proportional = float(np.max(np.abs(a - (a_sum / b_sum) * b))) <= EQUALITY_PROPORTION
    return slack >= -SLACK_TOL, slack, slack <= EQUALITY_SLACK and proportional


def _xlogx(x):
    return x * np.log(x)


def check_jensen(weights, points) -> Tuple[bool, float]:
    """Jensen's inequality for the convex f(x) = x log x."""
    w = np.asarray(weights, dtype=np.float64)
    x = np.asarray(points, dtype=np.float64)
    if w.shape != x.shape:
        raise DimensionMismatch(f"weights have shape {w.shape}, points have shape {x.shape}")
    if np.any(w <= 0) or np.any(x <= 0):
        raise NonPositiveInput("weights and points must be positive")
    mean = float(np.sum(w * x) / np.sum(w))
    slack = float(np.sum(w * _xlogx(x)) / np.sum(w)) - float(_xlogx(mean))
    return slack >= -SLACK_TOL, slack


def recovered_reward_gap(inst: TabularInstance, pi: Policy) -> GapReport:
    """Gap r - beta * log(pi / ref) per (prompt, response) and its spread per prompt.

    At the optimum the gap is constant in y and equals beta * log Z(x).
    """
    log_pi = _policy_log_probs(inst, pi)
    gaps = inst.rewards - inst.beta * (log_pi - inst.ref_log_probs)
    means = gaps.mean(axis=-1)
    max_dev = np.max(np.abs(gaps - means[:, None]), axis=-1)
    return GapReport(gaps, means, max_dev, inst.log_partition(), np.exp(means / inst.beta))


def finite_diff_grad(loss_eval: Callable[[np.ndarray], float], params, eps: float = 1e-5) -> np.ndarray:
    """Central differences (L(p + eps e_i) - L(p - eps e_i)) / (2 eps) per coordinate."""
    if isinstance(params, torch.Tensor):
        params = params.detach().numpy()
    p = np.array(params, dtype=np.float64)
    grad = np.zeros_like(p)
    for i in range(p.size):
        hi, lo = p.copy(), p.copy()
        hi[i] += eps
        lo[i] -= eps
        f_hi, f_lo = float(loss_eval(hi)), float(loss_eval(lo))
        if not (math.isfinite(f_hi) and math.isfinite(f_lo)):
            raise NonFiniteEvaluation(f"loss is not finite around coordinate {i}")
        grad[i] = (f_hi - f_lo) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def total_variation(log_p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """Per-prompt total variation between two log-probability tables."""
    return 0.5 * np.sum(np.abs(np.exp(log_p) - np.exp(log_q)), axis=-1)


# randomized sweeps

def sweep_log_sum(seed: int, n: int = 10_000, size: int = 8) -> dict:
    rng = make_rng(seed, "log-sum")
    worst, violations, false_equal = math.inf, 0, 0
    for _ in range(n):
        a = 10.0 * (1.0 - rng.random(size))
        b = 10.0 * (1.0 - rng.random(size))
        holds, slack, equal = check_log_sum_inequality(a, b)
        worst = min(worst, slack)
        violations += not holds
        false_equal += equal
    for _ in range(n // 100):
        b = 10.0 * (1.0 - rng.random(size))
        _, slack, equal = check_log_sum_inequality(rng.uniform(0.1, 5.0) * b, b)
        false_equal += not equal
    return {"worst_slack": worst, "violations": violations, "equality_errors": false_equal}


def sweep_jensen(seed: int, n: int = 10_000, size: int = 8) -> dict:
    rng = make_rng(seed, "jensen")
    worst, violations = math.inf, 0
    for _ in range(n):
        w = 1.0 - rng.random(size)
        x = 10.0 * (1.0 - rng.random(size))
        holds, slack = check_jensen(w, x)
        worst = min(worst, slack)
        violations += not holds
    return {"worst_slack": worst, "violations": violations}


def random_log_probs(rng: np.random.Generator, shape, scale: float = 2.0) -> np.ndarray:
    logits = rng.normal(0.0, scale, size=shape)
    return logits - _logsumexp(logits)[:, None]


def sweep_tilt_optimality(
    seeds: Sequence[int], n_policies: int = 200, betas: Sequence[float] = BETA_GRID,
) -> dict:
    """Worst margin J(pi*) - J(pi) and worst |J(pi*) - beta E[log Z]| over random instances.

    The bound error is relative to max(1, |beta E[log Z]|).
    """
    worst_margin, worst_bound = math.inf, 0.0
    for beta in betas:
        for seed in seeds:
            inst = TabularInstance.random(seed, n_prompts=3, n_responses=6, beta=beta)
            best = objective_from_log_probs(inst, optimal_log_probs(inst))
            bound = upper_bound(inst)
            worst_bound = max(worst_bound, abs(best - bound) / max(1.0, abs(bound)))
            rng = make_rng(seed, "policies", str(beta))
            for _ in range(n_policies):
                j = objective_from_log_probs(inst, random_log_probs(rng, inst.rewards.shape))
                worst_margin = min(worst_margin, best - j)
    return {"worst_margin": worst_margin, "worst_bound_error": worst_bound, "betas": list(betas)}


def sweep_shift_equivalence(seeds: Sequence[int], beta: float = 0.5) -> float:
    """Max probability change of the tilt when r(x, y) is replaced by r(x, y) + h(x)."""
    worst = 0.0
    for seed in seeds:
        inst = TabularInstance.random(seed, n_prompts=3, n_responses=6, beta=beta)
        h = make_rng(seed, "shift").normal(0.0, 3.0, size=(inst.n_prompts, 1))
        shifted = TabularInstance(inst.vocab, inst.ref_logits, inst.rewards + h, beta)
        diff = np.abs(np.exp(optimal_log_probs(inst)) - np.exp(optimal_log_probs(shifted)))
        worst = max(worst, float(diff.max()))
    return worst


def grid_search_two_response(inst: TabularInstance, step: float = 1e-3) -> np.ndarray:
    """Maximizer of the objective over a probability grid, per prompt, for two responses."""
    assert inst.rewards.shape[1] == 2
    p = np.arange(step, 1.0, step)
    log_pi = np.stack([np.log(p), np.log1p(-p)], axis=-1)
    out = np.zeros(inst.n_prompts)
    for x in range(inst.n_prompts):
        probs = np.exp(log_pi)
        values = np.sum(probs * inst.rewards[x], axis=-1) \
            - inst.beta * np.sum(probs * (log_pi - inst.ref_log_probs[x]), axis=-1)
        out[x] = p[int(np.argmax(values))]
    return out


def sweep_grid_search(seeds: Sequence[int], step: float = 1e-3) -> float:
    """Largest distance between the grid maximizer and the closed-form pi*(y_0|x)."""
    worst = 0.0
    for seed in seeds:
        inst = TabularInstance.random(seed, n_prompts=2, n_responses=2, beta=1.0)
        grid = grid_search_two_response(inst, step)
        closed = np.exp(optimal_log_probs(inst))[:, 0]
        worst = max(worst, float(np.max(np.abs(grid - closed))))
    return worst


def sweep_recovered_gap(seeds: Sequence[int]) -> float:
    worst = 0.0
    for seed in seeds:
        inst = TabularInstance.random(seed, n_prompts=4, n_responses=16, beta=0.1 if seed % 2 else 1.0)
        report = recovered_reward_gap(inst, optimal_policy_closed_form(inst))
        worst = max(worst, float(report.max_deviation.max()))
    return worst
