from typing import Optional

import torch

from .base import EOS, Policy, Vocab
from ..errors import InvalidArgument
from ..utils import make_rng


class ParametricPolicy(Policy):
    """Autoregressive policy with a small feed-forward map per position.

    The input at position t is the one-hot concatenation of the prompt id, the
    position and the previous token (slot ``vocab.size`` marks the start). The
    map is linear, or a single tanh hidden layer when ``hidden > 0``. Position
    ``max_len`` can only emit the terminator and contributes log 1 = 0.
    """

    kind = "parametric"

    def __init__(
        self,
        vocab: Vocab,
        n_prompts: int,
        params: Optional[torch.Tensor] = None,
        frozen: bool = False,
        hidden: int = 0,
        bias: bool = False,
    ):
        if hidden < 0:
            raise InvalidArgument(f"hidden must be >= 0, got {hidden}")
        self.hidden = hidden
        self.bias = bias
        if params is None:
            params = torch.zeros(self._count(vocab, n_prompts, hidden, bias), dtype=torch.float64)
        super().__init__(vocab, n_prompts, params, frozen)
        self._encoding = self._build_encoding()
        self._gather = self._build_gather()

    @staticmethod
    def _count(vocab: Vocab, n_prompts: int, hidden: int, bias: bool) -> int:
        enc_dim = n_prompts + vocab.max_len + vocab.size + 1
        v = vocab.size
        if hidden == 0:
            return v * enc_dim + (v if bias else 0)
        return hidden * enc_dim + v * hidden + ((hidden + v) if bias else 0)

    @property
    def enc_dim(self) -> int:
        return self.n_prompts + self.vocab.max_len + self.vocab.size + 1

    def n_params_for(self) -> int:
        return self._count(self.vocab, self.n_prompts, self.hidden, self.bias)

    def structure(self) -> dict:
        return {"hidden": self.hidden, "bias": self.bias}

    def _build_encoding(self) -> torch.Tensor:
        P, T, V = self.n_prompts, self.vocab.max_len, self.vocab.size
        enc = torch.zeros(P, T, V + 1, self.enc_dim, dtype=torch.float64)
        for p in range(P):
            enc[p, :, :, p] = 1.0
        for t in range(T):
            enc[:, t, :, P + t] = 1.0
        for prev in range(V + 1):
            enc[:, :, prev, P + T + prev] = 1.0
        return enc

    def _build_gather(self):
        # (position, previous token, emitted token) per response and position,
        # with a mask for positions that carry a real conditional.
        T, V = self.vocab.max_len, self.vocab.size
        padded, lengths = self.space.padded, self.space.lengths
        n = len(self.space)
        pos = torch.arange(T).expand(n, T)
        tok = padded[:, :T].clone()
        prev = torch.full((n, T), V, dtype=torch.int64)
        prev[:, 1:] = padded[:, :T - 1]
        mask = pos <= lengths[:, None]
        prev = torch.where(mask, prev, torch.full_like(prev, V))
        tok = torch.where(mask, tok, torch.full_like(tok, EOS))
        return pos, prev, tok, mask

    def _unpack(self, params: torch.Tensor):
        V, E, H = self.vocab.size, self.enc_dim, self.hidden
        out, i = [], 0
        shapes = [(V, E)] if H == 0 else [(H, E), (V, H)]
        for shape in shapes:
            n = shape[0] * shape[1]
            w = params[i:i + n].view(*shape)
            i += n
            b = None
            if self.bias:
                b = params[i:i + shape[0]]
                i += shape[0]
            out.append((w, b))
        return out

    def conditional_log_probs(self, params: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Log-softmax conditionals of shape (n_prompts, max_len, size + 1, size)."""
        if params is None:
            params = self.params
        h = self._encoding
        layers = self._unpack(params)
        for k, (w, b) in enumerate(layers):
            h = h @ w.T
            if b is not None:
                h = h + b
            if k < len(layers) - 1:
                h = torch.tanh(h)
        return torch.log_softmax(h, dim=-1)

    def _log_prob_table(self, params: torch.Tensor) -> torch.Tensor:
        cond = self.conditional_log_probs(params)
        pos, prev, tok, mask = self._gather
        per_pos = cond[:, pos, prev, tok]
        per_pos = torch.where(mask, per_pos, torch.zeros_like(per_pos))
        return per_pos.sum(dim=-1)

    @classmethod
    def random(
        cls, vocab: Vocab, n_prompts: int, seed: int, scale: float = 1.0,
        hidden: int = 0, bias: bool = False, frozen: bool = False,
    ) -> "ParametricPolicy":
        n = cls._count(vocab, n_prompts, hidden, bias)
        params = make_rng(seed, "parametric").normal(0.0, scale, size=n)
        return cls(vocab, n_prompts, torch.from_numpy(params), frozen=frozen, hidden=hidden, bias=bias)
