"""Offline, online and policy-gradient training loops.

All loops run plain gradient descent with an optional global gradient-norm cap
and evaluate at step 0, every ``eval_every`` steps and at the final step.
Every reported KL and expectation is computed exactly by enumeration.
"""
import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from .config import LossKind, PGEstimator, TrainConfig
from .errors import (
    EmptyBatch, FrozenPolicy, KindMismatch, NonFiniteGradient, NonFrozenReference, NonTrainableModel,
)
from .losses import OFFLINE_TERMS, CompareAs, IndexedBatch, compare_terms, index_records, online_terms
from .policy import Policy, apply_gradient, sample_indices
from .records import PAIRWISE, FeedbackRecord
from .reward import Beta, ExplicitRewardModel, ScoreBounds, pair_features, rm_loss_from_features, sigmoid
from .utils import make_rng

logger = logging.getLogger(__name__)

NAN = float("nan")

CSV_HEADER = (
    "step", "loss", "kl",
    "mean_r_theta_w", "mean_r_theta_l", "mean_s_theta_w", "mean_s_theta_l",
    "mean_explicit_reward", "ms",
)


@dataclass
class EvalRecord:
    step: int
    loss: float
    kl: float
    mean_r_theta_w: float = NAN
    mean_r_theta_l: float = NAN
    mean_s_theta_w: float = NAN
    mean_s_theta_l: float = NAN
    mean_explicit_reward: float = NAN
    ms: float = 0.0
    objective: float = NAN
    accuracy: float = NAN
    grad_var: float = NAN

    @property
    def margin(self) -> float:
        return self.mean_r_theta_w - self.mean_r_theta_l


@dataclass
class TrainReport:
    loss_kind: str
    records: List[EvalRecord] = field(default_factory=list)
    policy: Optional[Policy] = None
    reward_model: Optional[ExplicitRewardModel] = None
    checkpoint: Optional[str] = None
    offset: float = 0.0

    @property
    def final(self) -> EvalRecord:
        return self.records[-1]

    @property
    def grad_variance(self) -> float:
        vals = [r.grad_var for r in self.records if not math.isnan(r.grad_var)]
        return sum(vals) / len(vals) if vals else NAN

    def column(self, name: str) -> List[float]:
        return [getattr(r, name) for r in self.records]

    def write_csv(self, path: str):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for r in self.records:
                writer.writerow([getattr(r, name) for name in CSV_HEADER])


def is_eval_step(t: int, cfg: TrainConfig) -> bool:
    return t == 0 or t % cfg.eval_every == 0 or t == cfg.steps


def cap_gradient(grad: torch.Tensor, cap: Optional[float]) -> torch.Tensor:
    if cap is None:
        return grad
    norm = torch.linalg.vector_norm(grad).item()
    if norm > cap:
        grad = grad * (cap / norm)
    return grad


def gradient_estimate_variance(grads: Sequence[torch.Tensor]) -> float:
    """Trace of the unbiased sample covariance of a set of gradient estimates."""
    return torch.stack(list(grads)).var(dim=0, unbiased=True).sum().item()


class Minibatches:
    """Epoch-wise shuffled minibatches without replacement, index-sorted inside a batch."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = batch_size
        self.rng = make_rng(seed, "shuffle")
        self.queue: List[int] = []

    def next(self) -> torch.Tensor:
        if self.batch_size >= self.n:
            return torch.arange(self.n)
        if not self.queue:
            self.queue = self.rng.permutation(self.n).tolist()
        take, self.queue = self.queue[:self.batch_size], self.queue[self.batch_size:]
        return torch.tensor(sorted(take))


class _Clock:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.t0 = time.perf_counter()

    def ms(self) -> float:
        return (time.perf_counter() - self.t0) * 1000.0 if self.enabled else 0.0


def _grad(params_of: Callable[[torch.Tensor], torch.Tensor], params: torch.Tensor) -> Tuple[float, torch.Tensor]:
    leaf = params.detach().clone().requires_grad_(True)
    loss = params_of(leaf)
    grad, = torch.autograd.grad(loss, leaf)
    if not torch.isfinite(grad).all():
        raise NonFiniteGradient("training produced a non-finite gradient")
    return loss.item(), grad


def _mean(x: torch.Tensor) -> float:
    return x.mean().item() if x.numel() else NAN


def _check_policies(pi0: Policy, ref: Policy):
    if pi0.frozen:
        raise FrozenPolicy("pi_0 must not be frozen")
    if not ref.frozen:
        raise NonFrozenReference("reference policy must be frozen")


def _log_eval(kind: str, rec: EvalRecord):
    logger.info(
        "%s step %d loss %.6g kl %.6g margin %.6g", kind, rec.step, rec.loss, rec.kl, rec.margin,
    )


def _prompt_weights(prompt_idx: torch.Tensor, n_prompts: int) -> torch.Tensor:
    counts = torch.bincount(prompt_idx, minlength=n_prompts).to(torch.float64)
    return counts / counts.sum()


def train_offline(
    pi0: Policy,
    ref: Policy,
    cfg: TrainConfig,
    data: Sequence[FeedbackRecord],
    rm: Optional[ExplicitRewardModel] = None,
) -> TrainReport:
    """Dataset-driven training with one of the offline losses.

    Desired/undesired columns of the report follow y_w/y_l for pairwise data,
    the labels for binary data and a normalized score of at least 0.5 for
    scalar data. With ``rm`` the report also tracks the exact expected
    explicit reward of the policy.
    """
    cfg.validate()
    kind = LossKind(cfg.loss_kind).value
    if kind not in OFFLINE_TERMS:
        raise KindMismatch(f"loss_kind {kind} is not an offline loss")
    record_kind, terms = OFFLINE_TERMS[kind]
    if len(data) == 0:
        raise EmptyBatch("training data is empty")
    for r in data:
        if r.kind != record_kind:
            raise KindMismatch(f"loss_kind {kind} needs {record_kind} records, data holds {r.kind} records")
    _check_policies(pi0, ref)

    beta = Beta(cfg.beta).value
    full = index_records(pi0, data, record_kind, ScoreBounds(cfg.min_raw, cfg.max_raw))
    ref_logp = ref.log_prob_table()
    weights = _prompt_weights(full.prompt, pi0.n_prompts)
    if record_kind == PAIRWISE:
        desired = (full.prompt, full.first)
        undesired = (full.prompt, full.second)
    else:
        mask = full.target >= 0.5
        desired = (full.prompt[mask], full.first[mask])
        undesired = (full.prompt[~mask], full.first[~mask])
    rewards = None
    if rm is not None:
        rewards = rm.reward_matrix(pi0.n_prompts, pi0.vocab, full.prompt.tolist())

    clock = _Clock(cfg.record_wallclock)

    def evaluate(pi: Policy, step: int) -> EvalRecord:
        logp = pi.log_prob_table()
        loss = terms(logp, ref_logp, beta, full).mean().item()
        probs = torch.exp(logp)
        kl = (weights * (probs * (logp - ref_logp)).sum(-1)).sum().item()
        r = beta * (logp - ref_logp)
        r_w, r_l = r[desired], r[undesired]
        rec = EvalRecord(
            step, loss, kl,
            _mean(r_w), _mean(r_l), _mean(sigmoid(r_w)), _mean(sigmoid(r_l)),
            ms=clock.ms(),
        )
        if rewards is not None:
            rec.mean_explicit_reward = (weights * (probs * rewards).sum(-1)).sum().item()
            rec.objective = rec.mean_explicit_reward - beta * kl
        return rec

    report = TrainReport(kind)
    batches = Minibatches(len(full), cfg.batch_size, cfg.seed)
    pi = pi0
    report.records.append(evaluate(pi, 0))
    _log_eval(kind, report.final)
    for t in tqdm(range(1, cfg.steps + 1), disable=not cfg.progress, desc=kind):
        batch = full.select(batches.next())
        _, grad = _grad(lambda p: terms(pi.log_prob_table(p), ref_logp, beta, batch).mean(), pi.params)
        pi = apply_gradient(pi, cap_gradient(grad, cfg.grad_norm_cap), cfg.step_size)
        if is_eval_step(t, cfg):
            report.records.append(evaluate(pi, t))
            _log_eval(kind, report.final)
    report.policy = pi
    return report


class _OnlineProblem:
    """Shared state of the online UNA and policy-gradient loops."""

    def __init__(self, pi0: Policy, ref: Policy, cfg: TrainConfig, prompts: Sequence, rm: ExplicitRewardModel):
        cfg.validate()
        _check_policies(pi0, ref)
        if len(prompts) == 0:
            raise EmptyBatch("online training needs at least one prompt")
        self.cfg = cfg
        self.ref = ref
        self.beta = Beta(cfg.beta).value
        self.prompt_idx = np.array([pi0.prompt_index(x) for x in prompts], dtype=np.int64)
        self.weights = _prompt_weights(torch.from_numpy(self.prompt_idx), pi0.n_prompts)
        self.rewards = rm.reward_matrix(pi0.n_prompts, pi0.vocab, self.prompt_idx.tolist())
        self.ref_logp = ref.log_prob_table()

    def draw(self, pi: Policy, rng: np.random.Generator) -> IndexedBatch:
        p = self.prompt_idx[rng.integers(0, len(self.prompt_idx), size=self.cfg.batch_size)]
        y = sample_indices(pi, p, rng)
        p, y = torch.from_numpy(p), torch.from_numpy(y)
        return IndexedBatch(p, y, target=self.rewards[p, y])

    def kl(self, logp: torch.Tensor) -> torch.Tensor:
        return (self.weights * (torch.exp(logp) * (logp - self.ref_logp)).sum(-1)).sum()

    def explicit(self, logp: torch.Tensor) -> torch.Tensor:
        return (self.weights * (torch.exp(logp) * self.rewards).sum(-1)).sum()

    def base_record(self, pi: Policy, step: int, ms: float) -> EvalRecord:
        logp = pi.log_prob_table()
        kl = self.kl(logp).item()
        explicit = self.explicit(logp).item()
        return EvalRecord(step, NAN, kl, mean_explicit_reward=explicit, ms=ms, objective=explicit - self.beta * kl)

    def variance(self, estimate: Callable[[Policy, np.random.Generator], torch.Tensor], pi: Policy, step: int) -> float:
        n = self.cfg.variance_seeds
        if n == 0:
            return NAN
        grads = [estimate(pi, make_rng(self.cfg.seed, "variance", step, s)) for s in range(n)]
        return gradient_estimate_variance(grads)


def online_compare(cfg: TrainConfig) -> CompareAs:
    """The comparison an online UNA run uses, fixed by its loss kind."""
    kind = LossKind(cfg.loss_kind)
    compare = CompareAs(cfg.compare_as)
    if kind == LossKind.una_online_reward:
        if compare != CompareAs.reward_mse:
            warnings.warn(f"loss_kind una_online_reward compares rewards; ignoring compare_as={compare.value}")
        return CompareAs.reward_mse
    if compare == CompareAs.reward_mse:
        warnings.warn("loss_kind una_online_score compares scores; using compare_as=score_mse")
        return CompareAs.score_mse
    return compare


def train_online_una(
    pi0: Policy, ref: Policy, cfg: TrainConfig, prompts: Sequence, rm: ExplicitRewardModel,
) -> TrainReport:
    """Sample responses from the current policy, score them with ``rm`` and take
    one step on the implicit/explicit difference per iteration.

    With ``offset_ema`` set, an additive offset on the implicit reward tracks the
    moving average of the batch gap r_phi - r_theta.
    """
    kind = LossKind(cfg.loss_kind)
    if kind not in (LossKind.una_online_reward, LossKind.una_online_score):
        raise KindMismatch(f"train_online_una needs an online UNA loss_kind, got {kind.value}")
    problem = _OnlineProblem(pi0, ref, cfg, prompts, rm)
    compare = online_compare(cfg)
    beta, ref_logp = problem.beta, problem.ref_logp
    offset = 0.0
    clock = _Clock(cfg.record_wallclock)

    def estimate(pi: Policy, rng: np.random.Generator) -> torch.Tensor:
        batch = problem.draw(pi, rng)
        return _grad(lambda p: online_terms(pi.log_prob_table(p), ref_logp, beta, batch, compare, offset).mean(), pi.params)[1]

    def evaluate(pi: Policy, step: int) -> EvalRecord:
        rec = problem.base_record(pi, step, clock.ms())
        logp = pi.log_prob_table()
        g = compare_terms(beta * (logp - ref_logp), problem.rewards, compare, offset)
        rec.loss = (problem.weights * (torch.exp(logp) * g).sum(-1)).sum().item()
        rec.grad_var = problem.variance(estimate, pi, step)
        return rec

    report = TrainReport(kind.value)
    rng = make_rng(cfg.seed, "online")
    pi = pi0
    report.records.append(evaluate(pi, 0))
    _log_eval(kind.value, report.final)
    for t in tqdm(range(1, cfg.steps + 1), disable=not cfg.progress, desc=kind.value):
        batch = problem.draw(pi, rng)
        _, grad = _grad(
            lambda p: online_terms(pi.log_prob_table(p), ref_logp, beta, batch, compare, offset).mean(), pi.params,
        )
        if cfg.offset_ema is not None:
            r_theta = beta * (pi.log_prob_table() - ref_logp)[batch.prompt, batch.first]
            gap = (batch.target - r_theta).mean().item()
            offset = cfg.offset_ema * offset + (1.0 - cfg.offset_ema) * gap
        pi = apply_gradient(pi, cap_gradient(grad, cfg.grad_norm_cap), cfg.step_size)
        if is_eval_step(t, cfg):
            report.records.append(evaluate(pi, t))
            _log_eval(kind.value, report.final)
    report.policy = pi
    report.offset = offset
    return report


def train_policy_gradient_baseline(
    pi0: Policy, ref: Policy, cfg: TrainConfig, prompts: Sequence, rm: ExplicitRewardModel,
) -> TrainReport:
    """Ascent on E[r_phi] - beta * KL(pi || ref).

    The reward term uses the score-function estimator with the batch-mean
    reward as baseline (``pg_estimator=sampled``) or its exact value by
    enumeration (``pg_estimator=exact``); the KL term is always exact.
    """
    kind = LossKind(cfg.loss_kind)
    if kind != LossKind.pg_baseline:
        raise KindMismatch(f"train_policy_gradient_baseline needs loss_kind pg_baseline, got {kind.value}")
    problem = _OnlineProblem(pi0, ref, cfg, prompts, rm)
    exact = PGEstimator(cfg.pg_estimator) == PGEstimator.exact
    beta = problem.beta
    clock = _Clock(cfg.record_wallclock)

    def surrogate(pi: Policy, batch: Optional[IndexedBatch]) -> Callable[[torch.Tensor], torch.Tensor]:
        def loss(p: torch.Tensor) -> torch.Tensor:
            logp = pi.log_prob_table(p)
            penalty = beta * problem.kl(logp)
            if batch is None:
                return penalty - problem.explicit(logp)
            advantage = batch.target - batch.target.mean()
            return penalty - (advantage * logp[batch.prompt, batch.first]).mean()
        return loss

    def estimate(pi: Policy, rng: np.random.Generator) -> torch.Tensor:
        batch = None if exact else problem.draw(pi, rng)
        return _grad(surrogate(pi, batch), pi.params)[1]

    def evaluate(pi: Policy, step: int) -> EvalRecord:
        rec = problem.base_record(pi, step, clock.ms())
        rec.loss = -rec.objective
        rec.grad_var = problem.variance(estimate, pi, step)
        return rec

    report = TrainReport(LossKind.pg_baseline.value)
    rng = make_rng(cfg.seed, "online")
    pi = pi0
    report.records.append(evaluate(pi, 0))
    _log_eval(report.loss_kind, report.final)
    for t in tqdm(range(1, cfg.steps + 1), disable=not cfg.progress, desc="pg_baseline"):
        grad = estimate(pi, rng)
        pi = apply_gradient(pi, cap_gradient(grad, cfg.grad_norm_cap), cfg.step_size)
        if is_eval_step(t, cfg):
            report.records.append(evaluate(pi, t))
            _log_eval(report.loss_kind, report.final)
    report.policy = pi
    return report


def train_reward_model(
    rm0: ExplicitRewardModel, cfg: TrainConfig, data: Sequence[FeedbackRecord],
) -> Tuple[ExplicitRewardModel, TrainReport]:
    cfg.validate()
    if rm0.kind != "trainable_bt":
        raise NonTrainableModel("only trainable_bt reward models can be trained")
    for r in data:
        if r.kind != PAIRWISE:
            raise KindMismatch(f"reward-model training needs pairwise records, data holds {r.kind} records")
    diffs = pair_features(rm0, data)
    clock = _Clock(cfg.record_wallclock)

    def evaluate(params: torch.Tensor, step: int) -> EvalRecord:
        margins = diffs @ params
        rec = EvalRecord(step, (-F.logsigmoid(margins)).mean().item(), NAN, ms=clock.ms())
        rec.accuracy = (margins > 0).to(torch.float64).mean().item()
        return rec

    report = TrainReport(LossKind.rm_bt.value)
    batches = Minibatches(len(data), cfg.batch_size, cfg.seed)
    params = rm0.params
    report.records.append(evaluate(params, 0))
    for t in tqdm(range(1, cfg.steps + 1), disable=not cfg.progress, desc="rm_bt"):
        sub = diffs[batches.next()]
        _, grad = _grad(lambda p: rm_loss_from_features(p, sub).mean(), params)
        params = params - cfg.step_size * cap_gradient(grad, cfg.grad_norm_cap)
        if is_eval_step(t, cfg):
            report.records.append(evaluate(params, t))
            logger.info("rm_bt step %d loss %.6g accuracy %.4f", t, report.final.loss, report.final.accuracy)
    rm = rm0.with_params(params)
    report.reward_model = rm
    return rm, report


ONLINE_TRAINERS = {
    LossKind.una_online_reward: train_online_una,
    LossKind.una_online_score: train_online_una,
    LossKind.pg_baseline: train_policy_gradient_baseline,
}
