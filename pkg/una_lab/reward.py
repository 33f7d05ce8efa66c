"""Implicit rewards and scores of a policy/reference pair, and explicit reward models."""
import json
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    DimensionMismatch, EmptyBatch, InvalidArgument, MissingEntry, NonFiniteReward,
    NonFrozenReference, NonTrainableModel, OutOfRange, ParseError, SchemaError, WrongFeedbackKind,
)
from .policy import Policy, Prompt, Response, ResponseSpace, Vocab, log_prob
from .records import PAIRWISE, FeedbackRecord, LossResult


@dataclass(frozen=True)
class Beta:
    value: float

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value > 0):
            raise InvalidArgument(f"beta must be a positive finite number, got {self.value}")


@dataclass(frozen=True)
class ScoreBounds:
    min_raw: float = 1.0
    max_raw: float = 5.0

    def __post_init__(self):
        if not self.max_raw > self.min_raw:
            raise InvalidArgument(f"max_raw ({self.max_raw}) must exceed min_raw ({self.min_raw})")


def beta_value(beta) -> float:
    return beta.value if isinstance(beta, Beta) else Beta(float(beta)).value


def sigmoid(z: torch.Tensor) -> torch.Tensor:
    # split on the sign so exp never sees a large positive argument
    e = torch.exp(-torch.abs(z))
    return torch.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def scalar_sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _check_reference(ref: Policy):
    if not ref.frozen:
        raise NonFrozenReference("reference policy must be frozen")


def implicit_reward(pi: Policy, ref: Policy, beta, x, y: Response) -> float:
    _check_reference(ref)
    return beta_value(beta) * (log_prob(pi, x, y) - log_prob(ref, x, y))


def implicit_score(pi: Policy, ref: Policy, beta, x, y: Response) -> float:
    return scalar_sigmoid(implicit_reward(pi, ref, beta, x, y))


def implicit_rewards(pi: Policy, ref: Policy, beta, params: Optional[torch.Tensor] = None) -> torch.Tensor:
    """(n_prompts, n_responses) table of beta * log(pi / ref); differentiable in ``params``."""
    _check_reference(ref)
    return beta_value(beta) * (pi.log_prob_table(params) - ref.log_prob_table())


def bt_probability(r_w: float, r_l: float) -> float:
    if not (math.isfinite(r_w) and math.isfinite(r_l)):
        raise NonFiniteReward(f"rewards must be finite, got ({r_w}, {r_l})")
    return scalar_sigmoid(r_w - r_l)


def normalize_score(raw: float, bounds: ScoreBounds = ScoreBounds(), line: Optional[int] = None) -> float:
    if not (bounds.min_raw <= raw <= bounds.max_raw):
        raise OutOfRange(f"raw score {raw} outside [{bounds.min_raw}, {bounds.max_raw}]", line)
    return (raw - bounds.min_raw) / (bounds.max_raw - bounds.min_raw)


class ExplicitRewardModel:
    """Explicit reward r_phi(x, y).

    ``table`` models look rewards up by (prompt id, response tokens).
    ``trainable_bt`` models score the prompt one-hot crossed with the bag of
    response tokens with a linear map, trained with the Bradley-Terry loss.
    """

    def __init__(
        self,
        kind: str,
        table: Optional[Dict[Tuple[int, Tuple[int, ...]], float]] = None,
        params: Optional[torch.Tensor] = None,
        n_prompts: int = 0,
        vocab: Optional[Vocab] = None,
    ):
        assert kind in ("table", "trainable_bt")
        self.kind = kind
        self.table = dict(table or {})
        self.n_prompts = n_prompts
        self.vocab = vocab
        if kind == "table":
            for key, v in self.table.items():
                if not math.isfinite(v):
                    raise NonFiniteReward(f"reward for {key} is not finite")
            self.params = None
        else:
            dim = n_prompts * vocab.size
            if params is None:
                params = torch.zeros(dim, dtype=torch.float64)
            self.params = torch.as_tensor(params, dtype=torch.float64).detach().clone().reshape(-1)
            if self.params.numel() != dim:
                raise DimensionMismatch(f"expected {dim} reward parameters, got {self.params.numel()}")

    @classmethod
    def table_model(cls, entries: Dict[Tuple[int, Tuple[int, ...]], float]) -> "ExplicitRewardModel":
        return cls("table", table={(int(p), tuple(t)): float(v) for (p, t), v in entries.items()})

    @classmethod
    def from_function(
        cls, fn: Callable[[int, Response], float], n_prompts: int, vocab: Vocab,
    ) -> "ExplicitRewardModel":
        """Tabulate ``fn(prompt_id, response)`` over every response of ``vocab``."""
        space = ResponseSpace.enumerate(vocab)
        return cls.table_model({
            (p, y.tokens): fn(p, y) for p in range(n_prompts) for y in space.responses
        })

    @classmethod
    def from_matrix(cls, rewards, vocab: Vocab) -> "ExplicitRewardModel":
        rewards = np.asarray(rewards, dtype=np.float64)
        space = ResponseSpace.enumerate(vocab)
        return cls.table_model({
            (p, y.tokens): float(rewards[p, i])
            for p in range(rewards.shape[0]) for i, y in enumerate(space.responses)
        })

    @classmethod
    def trainable(cls, n_prompts: int, vocab: Vocab, params=None) -> "ExplicitRewardModel":
        return cls("trainable_bt", params=params, n_prompts=n_prompts, vocab=vocab)

    def with_params(self, params: torch.Tensor) -> "ExplicitRewardModel":
        if self.kind != "trainable_bt":
            raise NonTrainableModel("table reward models have no parameters")
        return ExplicitRewardModel.trainable(self.n_prompts, self.vocab, params)

    def features(self, x, y: Response) -> torch.Tensor:
        pid = x.id if isinstance(x, Prompt) else int(x)
        if pid < 0 or pid >= self.n_prompts:
            raise MissingEntry(f"prompt {pid} outside the reward model's {self.n_prompts} prompts")
        y.validate(self.vocab)
        phi = torch.zeros(self.n_prompts, self.vocab.size, dtype=torch.float64)
        for t in y.tokens:
            phi[pid, t] += 1.0
        return phi.reshape(-1)

    def reward(self, x, y: Response, params: Optional[torch.Tensor] = None):
        if self.kind == "table":
            pid = x.id if isinstance(x, Prompt) else int(x)
            key = (pid, tuple(y.tokens))
            if key not in self.table:
                raise MissingEntry(f"no reward for prompt {pid}, response {list(y.tokens)}")
            return self.table[key]
        return self.features(x, y) @ (self.params if params is None else params)

    def reward_matrix(self, n_prompts: int, vocab: Vocab, prompt_ids: Optional[Sequence[int]] = None) -> torch.Tensor:
        """Rewards of every (prompt, response) pair, shape (n_prompts, n_responses).

        Only the rows in ``prompt_ids`` are looked up when it is given; the rest stay 0.
        """
        space = ResponseSpace.enumerate(vocab)
        out = torch.zeros(n_prompts, len(space), dtype=torch.float64)
        rows = range(n_prompts) if prompt_ids is None else sorted(set(int(p) for p in prompt_ids))
        for p in rows:
            for i, y in enumerate(space.responses):
                out[p, i] = float(self.reward(p, y))
        return out

    def to_json(self) -> dict:
        if self.kind == "table":
            return {"entries": [
                {"prompt": p, "tokens": list(t), "reward": v}
                for (p, t), v in sorted(self.table.items())
            ]}
        return {
            "kind": "trainable_bt",
            "n_prompts": self.n_prompts,
            "vocab": {"size": self.vocab.size, "max_len": self.vocab.max_len},
            "params": self.params.tolist(),
        }

    def save_json(self, path: str):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)

    @classmethod
    def from_json(cls, doc: dict) -> "ExplicitRewardModel":
        if doc.get("kind") == "trainable_bt":
            try:
                vocab = Vocab(doc["vocab"]["size"], doc["vocab"]["max_len"])
                params = torch.tensor(doc["params"], dtype=torch.float64)
                return cls.trainable(doc["n_prompts"], vocab, params)
            except (KeyError, TypeError, ValueError) as err:
                raise SchemaError("params", f"trainable reward model is malformed: {err}")
        if not isinstance(doc.get("entries"), list):
            raise SchemaError("entries", "reward table must hold an 'entries' list")
        table = {}
        for i, e in enumerate(doc["entries"]):
            try:
                key = (int(e["prompt"]), Response.of(e["tokens"]).tokens)
                table[key] = float(e["reward"])
            except (KeyError, TypeError, ValueError) as err:
                raise SchemaError("entries", f"entry {i} is malformed: {err}")
        return cls.table_model(table)

    @classmethod
    def load_json(cls, path: str) -> "ExplicitRewardModel":
        with open(path, encoding="utf-8") as f:
            try:
                doc = json.load(f)
            except (json.JSONDecodeError, UnicodeDecodeError) as e:
                raise ParseError(f"reward model {path} is not valid JSON: {e}")
        if not isinstance(doc, dict):
            raise SchemaError("reward_model", f"{path} must hold a JSON object")
        return cls.from_json(doc)


def explicit_reward(rm: ExplicitRewardModel, x, y: Response) -> float:
    return float(rm.reward(x, y))


def pair_features(rm: ExplicitRewardModel, batch: Sequence[FeedbackRecord]) -> torch.Tensor:
    """phi(x, y_w) - phi(x, y_l) per record, shape (len(batch), n_params)."""
    if rm.kind != "trainable_bt":
        raise NonTrainableModel("rm_loss needs a trainable reward model")
    if len(batch) == 0:
        raise EmptyBatch("reward-model batch is empty")
    rows = []
    for r in batch:
        if r.kind != PAIRWISE:
            raise WrongFeedbackKind(f"rm_loss expects pairwise records, got {r.kind}")
        rows.append(rm.features(r.x, r.y_w) - rm.features(r.x, r.y_l))
    return torch.stack(rows)


def rm_loss_from_features(params: torch.Tensor, diffs: torch.Tensor) -> torch.Tensor:
    return -F.logsigmoid(diffs @ params)


def rm_loss(rm: ExplicitRewardModel, batch: Sequence[FeedbackRecord]) -> LossResult:
    diffs = pair_features(rm, batch)
    params = rm.params.detach().clone().requires_grad_(True)
    per_record = rm_loss_from_features(params, diffs)
    value = per_record.mean()
    grad, = torch.autograd.grad(value, params)
    return LossResult(value.item(), grad.detach(), per_record.detach())
