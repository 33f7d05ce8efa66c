from typing import Optional

import numpy as np
import torch

from .base import Policy, ResponseSpace, Vocab
from ..errors import DimensionMismatch
from ..utils import make_rng


class TabularPolicy(Policy):
    """One free logit per (prompt, response) pair."""

    kind = "tabular"

    def __init__(self, vocab: Vocab, n_prompts: int, params: Optional[torch.Tensor] = None, frozen: bool = False):
        if params is None:
            params = torch.zeros(n_prompts * len(ResponseSpace.enumerate(vocab)), dtype=torch.float64)
        super().__init__(vocab, n_prompts, params, frozen)

    def n_params_for(self) -> int:
        return self.n_prompts * len(self.space)

    def _log_prob_table(self, params: torch.Tensor) -> torch.Tensor:
        logits = params.view(self.n_prompts, len(self.space))
        return logits - torch.logsumexp(logits, dim=-1, keepdim=True)

    @classmethod
    def uniform(cls, vocab: Vocab, n_prompts: int, frozen: bool = False) -> "TabularPolicy":
        return cls(vocab, n_prompts, frozen=frozen)

    @classmethod
    def random(cls, vocab: Vocab, n_prompts: int, seed: int, scale: float = 1.0, frozen: bool = False) -> "TabularPolicy":
        n = n_prompts * len(ResponseSpace.enumerate(vocab))
        logits = make_rng(seed, "tabular").normal(0.0, scale, size=n)
        return cls(vocab, n_prompts, torch.from_numpy(logits), frozen=frozen)

    @classmethod
    def from_logits(cls, vocab: Vocab, logits, frozen: bool = False) -> "TabularPolicy":
        logits = torch.as_tensor(np.asarray(logits, dtype=np.float64))
        if logits.dim() != 2 or logits.shape[1] != len(ResponseSpace.enumerate(vocab)):
            raise DimensionMismatch(
                f"logits of shape {tuple(logits.shape)} do not cover the "
                f"{len(ResponseSpace.enumerate(vocab))} responses of {vocab}"
            )
        return cls(vocab, logits.shape[0], logits.reshape(-1), frozen=frozen)
