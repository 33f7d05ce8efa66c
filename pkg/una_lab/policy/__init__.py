from typing import Optional

import numpy as np
import torch

from .base import EOS, Vocab, Prompt, Response, ResponseSpace, Policy
from .tabular import TabularPolicy
from .parametric import ParametricPolicy
from .checkpoint import POLICY_CLASSES, save_checkpoint, load_checkpoint
from ..errors import (
    DimensionMismatch, FrozenPolicy, InvalidArgument, NonFiniteGradient, VocabMismatch,
)
from ..utils import make_rng


def build_policy(
    kind: str,
    vocab: Vocab,
    n_prompts: int,
    seed: Optional[int] = None,
    scale: float = 0.5,
    hidden: int = 0,
    bias: bool = False,
    frozen: bool = False,
) -> Policy:
    """Zero-initialised (uniform) policy, or a random one when ``seed`` is set."""
    if kind not in POLICY_CLASSES:
        raise InvalidArgument(f"unknown policy kind {kind!r}")
    if kind == "tabular":
        if seed is None:
            return TabularPolicy.uniform(vocab, n_prompts, frozen=frozen)
        return TabularPolicy.random(vocab, n_prompts, seed, scale, frozen=frozen)
    if seed is None:
        return ParametricPolicy(vocab, n_prompts, frozen=frozen, hidden=hidden, bias=bias)
    return ParametricPolicy.random(vocab, n_prompts, seed, scale, hidden=hidden, bias=bias, frozen=frozen)


def log_prob(policy: Policy, x, y: Response) -> float:
    p = policy.prompt_index(x)
    r = policy.response_index(y)
    return policy.log_prob_table()[p, r].item()


def sample_indices(policy: Policy, prompt_idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw of one response index per entry of ``prompt_idx``."""
    cdf = np.cumsum(policy.prob_table()[prompt_idx], axis=-1)
    u = rng.random(len(prompt_idx))
    idx = (cdf < u[:, None] * cdf[:, -1:]).sum(axis=-1)
    return np.minimum(idx, policy.n_responses - 1)


def sample(policy: Policy, x, rng_seed: int) -> Response:
    p = policy.prompt_index(x)
    idx = sample_indices(policy, np.array([p]), make_rng(rng_seed))
    return policy.response(int(idx[0]))


def sample_batch(policy: Policy, x, n: int, rng_seed: int) -> np.ndarray:
    """``n`` response indices for one prompt from a single seeded stream."""
    p = policy.prompt_index(x)
    return sample_indices(policy, np.full(n, p), make_rng(rng_seed))


def _check_same_space(p: Policy, q: Policy):
    if p.vocab != q.vocab or p.n_prompts != q.n_prompts:
        raise VocabMismatch(
            f"policies differ in response space: {p.vocab}/{p.n_prompts} prompts "
            f"vs {q.vocab}/{q.n_prompts} prompts"
        )


def kl_table(p: Policy, q: Policy, p_table: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Exact KL(p || q) per prompt; ``p_table`` substitutes p's log-probs (for autograd)."""
    _check_same_space(p, q)
    lp = p.log_prob_table() if p_table is None else p_table
    lq = q.log_prob_table()
    return (torch.exp(lp) * (lp - lq)).sum(dim=-1)


def kl_divergence(p: Policy, q: Policy, x) -> float:
    _check_same_space(p, q)
    i = p.prompt_index(x)
    return kl_table(p, q)[i].item()


def apply_gradient(policy: Policy, grad, step_size: float) -> Policy:
    if policy.frozen:
        raise FrozenPolicy("cannot update a frozen policy")
    if isinstance(grad, torch.Tensor):
        grad = grad.detach().to(torch.float64).reshape(-1)
    else:
        grad = torch.as_tensor(np.asarray(grad, dtype=np.float64)).reshape(-1)
    if grad.numel() != policy.n_params:
        raise DimensionMismatch(f"gradient has {grad.numel()} entries, policy has {policy.n_params}")
    if not torch.isfinite(grad).all():
        raise NonFiniteGradient("gradient has non-finite entries")
    if step_size < 0:
        raise InvalidArgument(f"step_size must be >= 0, got {step_size}")
    return policy.with_params(policy.params - step_size * grad)


__all__ = [
    "EOS", "Vocab", "Prompt", "Response", "ResponseSpace", "Policy",
    "TabularPolicy", "ParametricPolicy", "POLICY_CLASSES", "build_policy",
    "log_prob", "sample", "sample_batch", "sample_indices",
    "kl_divergence", "kl_table", "apply_gradient",
    "save_checkpoint", "load_checkpoint",
]
