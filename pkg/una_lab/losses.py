"""Alignment losses as differentiable functions of the policy parameters.

Each public loss indexes its records against the policy's response space,
builds per-record terms from the log-probability tables and returns the mean
together with its gradient. The ``*_terms`` functions work on pre-indexed
batches so the trainer can index a dataset once and slice it per step.
"""
import enum
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .errors import EmptyBatch, NonFrozenReference, WrongFeedbackKind
from .policy import Policy, Prompt, Response
from .records import BINARY, PAIRWISE, SCALAR, FeedbackRecord, Label, LossResult
from .reward import (
    ExplicitRewardModel, ScoreBounds, beta_value, normalize_score, sigmoid,
)

BCE_CLAMP = 1e-12


class DifferenceLoss(enum.Enum):
    mse = "mse"
    bce = "bce"


class CompareAs(enum.Enum):
    reward_mse = "reward_mse"
    score_mse = "score_mse"
    score_bce = "score_bce"


@dataclass
class IndexedBatch:
    """Records resolved to index tensors.

    ``first`` holds y_w (pairwise) or y; ``second`` holds y_l for pairwise
    batches; ``target`` holds explicit scores or rewards.
    """

    prompt: torch.Tensor
    first: torch.Tensor
    second: Optional[torch.Tensor] = None
    target: Optional[torch.Tensor] = None

    def __len__(self):
        return self.prompt.numel()

    def select(self, idx: torch.Tensor) -> "IndexedBatch":
        return IndexedBatch(
            self.prompt[idx],
            self.first[idx],
            None if self.second is None else self.second[idx],
            None if self.target is None else self.target[idx],
        )


def _check_batch(batch: Sequence[FeedbackRecord], kind: str, loss: str):
    if len(batch) == 0:
        raise EmptyBatch(f"{loss} called with an empty batch")
    for r in batch:
        if r.kind != kind:
            raise WrongFeedbackKind(f"{loss} expects {kind} records, got {r.kind}")


def index_records(
    pi: Policy, batch: Sequence[FeedbackRecord], kind: str, bounds: ScoreBounds = ScoreBounds(), loss: str = "loss",
) -> IndexedBatch:
    _check_batch(batch, kind, loss)
    prompt = [pi.prompt_index(r.x) for r in batch]
    if kind == PAIRWISE:
        return IndexedBatch(
            torch.tensor(prompt),
            torch.tensor([pi.response_index(r.y_w) for r in batch]),
            torch.tensor([pi.response_index(r.y_l) for r in batch]),
        )
    first = torch.tensor([pi.response_index(r.y) for r in batch])
    if kind == BINARY:
        target = [1.0 if r.label == Label.desired else 0.0 for r in batch]
    else:
        target = [normalize_score(r.raw_score, bounds) for r in batch]
    return IndexedBatch(torch.tensor(prompt), first, target=torch.tensor(target, dtype=torch.float64))


def index_samples(
    pi: Policy, rm: ExplicitRewardModel, sampled: Sequence[Tuple[Prompt, Response]],
) -> IndexedBatch:
    if len(sampled) == 0:
        raise EmptyBatch("loss_una_online called with no samples")
    prompt = [pi.prompt_index(x) for x, _ in sampled]
    first = [pi.response_index(y) for _, y in sampled]
    target = [float(rm.reward(x, y)) for x, y in sampled]
    return IndexedBatch(torch.tensor(prompt), torch.tensor(first), target=torch.tensor(target, dtype=torch.float64))


def _bce(s: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    s = torch.clamp(s, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(target * torch.log(s) + (1.0 - target) * torch.log(1.0 - s))


def pair_terms(logp, ref_logp, beta: float, batch: IndexedBatch, shaped: bool = True) -> torch.Tensor:
    r = beta * (logp - ref_logp)
    margin = r[batch.prompt, batch.first] - r[batch.prompt, batch.second]
    if shaped:
        return -F.logsigmoid(margin)
    return -margin


def dpo_terms(logp, ref_logp, beta: float, batch: IndexedBatch) -> torch.Tensor:
    pi_w, pi_l = logp[batch.prompt, batch.first], logp[batch.prompt, batch.second]
    ref_w, ref_l = ref_logp[batch.prompt, batch.first], ref_logp[batch.prompt, batch.second]
    return -F.logsigmoid(beta * ((pi_w - pi_l) - (ref_w - ref_l)))


def binary_terms(logp, ref_logp, beta: float, batch: IndexedBatch, g: DifferenceLoss = DifferenceLoss.mse) -> torch.Tensor:
    s = sigmoid(beta * (logp - ref_logp)[batch.prompt, batch.first])
    if DifferenceLoss(g) == DifferenceLoss.bce:
        return _bce(s, batch.target)
    return (s - batch.target) ** 2


def score_terms(logp, ref_logp, beta: float, batch: IndexedBatch) -> torch.Tensor:
    s = sigmoid(beta * (logp - ref_logp)[batch.prompt, batch.first])
    return (s - batch.target) ** 2


def compare_terms(r_theta: torch.Tensor, r_phi: torch.Tensor, compare_as: CompareAs, offset: float = 0.0) -> torch.Tensor:
    """Elementwise online comparison of implicit rewards against explicit ones."""
    compare_as = CompareAs(compare_as)
    r_theta = r_theta + offset
    if compare_as == CompareAs.reward_mse:
        return (r_theta - r_phi) ** 2
    if compare_as == CompareAs.score_mse:
        return (sigmoid(r_theta) - sigmoid(r_phi)) ** 2
    return _bce(sigmoid(r_theta), sigmoid(r_phi))


def online_terms(
    logp, ref_logp, beta: float, batch: IndexedBatch,
    compare_as: CompareAs = CompareAs.score_mse, offset: float = 0.0,
) -> torch.Tensor:
    r_theta = beta * (logp - ref_logp)[batch.prompt, batch.first]
    return compare_terms(r_theta, batch.target, compare_as, offset)


def evaluate(pi: Policy, ref: Policy, terms: Callable[[torch.Tensor], torch.Tensor]) -> LossResult:
    """Mean of ``terms(log_prob_table)`` and its gradient in pi's parameters."""
    if not ref.frozen:
        raise NonFrozenReference("reference policy must be frozen")
    params = pi.params.detach().clone().requires_grad_(True)
    per_record = terms(pi.log_prob_table(params))
    value = per_record.mean()
    grad, = torch.autograd.grad(value, params)
    return LossResult(value.item(), grad.detach(), per_record.detach())


def loss_una_pair(pi: Policy, ref: Policy, beta, batch: Sequence[FeedbackRecord], shaped: bool = True) -> LossResult:
    b = beta_value(beta)
    idx = index_records(pi, batch, PAIRWISE, loss="loss_una_pair")
    ref_logp = ref.log_prob_table()
    return evaluate(pi, ref, lambda logp: pair_terms(logp, ref_logp, b, idx, shaped))


def loss_dpo(pi: Policy, ref: Policy, beta, batch: Sequence[FeedbackRecord]) -> LossResult:
    b = beta_value(beta)
    idx = index_records(pi, batch, PAIRWISE, loss="loss_dpo")
    ref_logp = ref.log_prob_table()
    return evaluate(pi, ref, lambda logp: dpo_terms(logp, ref_logp, b, idx))


def loss_una_binary(
    pi: Policy, ref: Policy, beta, batch: Sequence[FeedbackRecord], g: DifferenceLoss = DifferenceLoss.mse,
) -> LossResult:
    b = beta_value(beta)
    idx = index_records(pi, batch, BINARY, loss="loss_una_binary")
    ref_logp = ref.log_prob_table()
    return evaluate(pi, ref, lambda logp: binary_terms(logp, ref_logp, b, idx, g))


def loss_una_score(
    pi: Policy, ref: Policy, beta, batch: Sequence[FeedbackRecord], bounds: ScoreBounds = ScoreBounds(),
) -> LossResult:
    b = beta_value(beta)
    idx = index_records(pi, batch, SCALAR, bounds, loss="loss_una_score")
    ref_logp = ref.log_prob_table()
    return evaluate(pi, ref, lambda logp: score_terms(logp, ref_logp, b, idx))


def loss_una_online(
    pi: Policy,
    ref: Policy,
    beta,
    rm: ExplicitRewardModel,
    sampled: Sequence[Tuple[Prompt, Response]],
    compare_as: CompareAs = CompareAs.score_mse,
    offset: float = 0.0,
) -> LossResult:
    """Difference between implicit and explicit rewards on already-sampled responses.

    The samples are constants: no gradient flows through the sampling distribution.
    """
    b = beta_value(beta)
    idx = index_samples(pi, rm, sampled)
    ref_logp = ref.log_prob_table()
    return evaluate(pi, ref, lambda logp: online_terms(logp, ref_logp, b, idx, compare_as, offset))


# offline loss kinds: (record kind, per-record terms)
OFFLINE_TERMS: Dict[str, Tuple[str, Callable]] = {
    "una_pair_shaped": (PAIRWISE, lambda logp, ref, b, batch: pair_terms(logp, ref, b, batch, True)),
    "una_pair_unshaped": (PAIRWISE, lambda logp, ref, b, batch: pair_terms(logp, ref, b, batch, False)),
    "dpo": (PAIRWISE, dpo_terms),
    "una_binary_mse": (BINARY, lambda logp, ref, b, batch: binary_terms(logp, ref, b, batch, DifferenceLoss.mse)),
    "una_binary_bce": (BINARY, lambda logp, ref, b, batch: binary_terms(logp, ref, b, batch, DifferenceLoss.bce)),
    "una_score": (SCALAR, score_terms),
}

__all__ = [
    "DifferenceLoss", "CompareAs", "IndexedBatch", "OFFLINE_TERMS",
    "loss_una_pair", "loss_dpo", "loss_una_binary", "loss_una_score", "loss_una_online",
    "index_records", "index_samples", "compare_terms",
]
