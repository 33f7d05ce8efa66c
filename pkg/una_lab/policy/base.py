import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch

from ..errors import MalformedResponse, UnknownPrompt, InvalidArgument

EOS = 0


@dataclass(frozen=True)
class Vocab:
    size: int
    max_len: int

    def __post_init__(self):
        if self.size < 2:
            raise InvalidArgument(f"vocab size must be >= 2, got {self.size}")
        if self.max_len < 1:
            raise InvalidArgument(f"max_len must be >= 1, got {self.max_len}")


@dataclass(frozen=True)
class Prompt:
    id: int
    tokens: Tuple[int, ...] = ()


@dataclass(frozen=True)
class Response:
    tokens: Tuple[int, ...]

    @classmethod
    def of(cls, content: Sequence[int]) -> "Response":
        """Response from content tokens, appending the terminator if absent."""
        tokens = tuple(int(t) for t in content)
        if len(tokens) == 0 or tokens[-1] != EOS:
            tokens = tokens + (EOS,)
        return cls(tokens)

    @property
    def content(self) -> Tuple[int, ...]:
        return self.tokens[:-1]

    def validate(self, vocab: Vocab) -> "Response":
        tokens = self.tokens
        if len(tokens) == 0 or tokens[-1] != EOS:
            raise MalformedResponse(f"response {list(tokens)} is missing the terminator")
        if EOS in tokens[:-1]:
            raise MalformedResponse(f"response {list(tokens)} has an interior terminator")
        if len(tokens) > vocab.max_len + 1:
            raise MalformedResponse(
                f"response {list(tokens)} longer than max_len={vocab.max_len}"
            )
        if any(t < 0 or t >= vocab.size for t in tokens):
            raise MalformedResponse(f"response {list(tokens)} has tokens outside [0, {vocab.size})")
        return self


class ResponseSpace:
    """Every response of a vocab, ordered by length then lexicographically."""

    def __init__(self, vocab: Vocab):
        self.vocab = vocab
        content_tokens = range(1, vocab.size)
        responses = []
        for length in range(vocab.max_len + 1):
            for content in itertools.product(content_tokens, repeat=length):
                responses.append(Response(content + (EOS,)))
        self.responses: Tuple[Response, ...] = tuple(responses)
        self._index: Dict[Tuple[int, ...], int] = {r.tokens: i for i, r in enumerate(responses)}

        width = vocab.max_len + 1
        padded = np.zeros((len(responses), width), dtype=np.int64)
        lengths = np.zeros(len(responses), dtype=np.int64)
        for i, r in enumerate(responses):
            padded[i, :len(r.tokens)] = r.tokens
            lengths[i] = len(r.tokens) - 1
        self.padded = torch.from_numpy(padded)
        self.lengths = torch.from_numpy(lengths)

    @classmethod
    @lru_cache(maxsize=None)
    def enumerate(cls, vocab: Vocab) -> "ResponseSpace":
        return cls(vocab)

    def __len__(self):
        return len(self.responses)

    def index(self, y: Response) -> int:
        y.validate(self.vocab)
        return self._index[y.tokens]


class Policy:
    """Categorical distribution over the enumerated responses of each prompt.

    Subclasses implement ``_log_prob_table``, mapping a flat parameter vector to
    the (n_prompts, n_responses) table of log-probabilities. Instances are
    immutable: updates go through ``with_params`` and return a new policy.
    """

    kind: str = None

    def __init__(self, vocab: Vocab, n_prompts: int, params: torch.Tensor, frozen: bool = False):
        if n_prompts < 1:
            raise InvalidArgument(f"n_prompts must be >= 1, got {n_prompts}")
        self.vocab = vocab
        self.n_prompts = n_prompts
        self.space = ResponseSpace.enumerate(vocab)
        self.params = torch.as_tensor(params, dtype=torch.float64).detach().clone().reshape(-1)
        self.frozen = frozen
        self._table = None
        self._probs = None
        assert self.params.numel() == self.n_params_for(), "parameter count does not match the architecture"

    def n_params_for(self) -> int:
        raise NotImplementedError

    def _log_prob_table(self, params: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def structure(self) -> dict:
        """Architecture fields needed to rebuild the policy from a parameter vector."""
        return {}

    @property
    def n_params(self) -> int:
        return self.params.numel()

    @property
    def n_responses(self) -> int:
        return len(self.space)

    def log_prob_table(self, params: Optional[torch.Tensor] = None) -> torch.Tensor:
        if params is not None:
            return self._log_prob_table(params)
        if self._table is None:
            self._table = self._log_prob_table(self.params)
        return self._table

    def prob_table(self) -> np.ndarray:
        if self._probs is None:
            self._probs = torch.exp(self.log_prob_table()).numpy()
        return self._probs

    def with_params(self, params: torch.Tensor) -> "Policy":
        return type(self)(self.vocab, self.n_prompts, params, frozen=self.frozen, **self.structure())

    def clone(self, frozen: bool = False) -> "Policy":
        return type(self)(self.vocab, self.n_prompts, self.params, frozen=frozen, **self.structure())

    def freeze(self) -> "Policy":
        return self.clone(frozen=True)

    def prompt_index(self, x) -> int:
        pid = x.id if isinstance(x, Prompt) else int(x)
        if pid < 0 or pid >= self.n_prompts:
            raise UnknownPrompt(pid, self.n_prompts)
        return pid

    def response_index(self, y: Response) -> int:
        return self.space.index(y)

    def response(self, idx: int) -> Response:
        return self.space.responses[idx]

    def __repr__(self):
        return (
            f"{type(self).__name__}(vocab={self.vocab}, n_prompts={self.n_prompts}, "
            f"n_params={self.n_params}, frozen={self.frozen})"
        )
