"""Feedback records and loss results."""
import enum
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch

from .errors import SchemaError
from .policy import Prompt, Response

PAIRWISE = "pairwise"
BINARY = "binary"
SCALAR = "scalar"
KINDS = (PAIRWISE, BINARY, SCALAR)


class Label(enum.Enum):
    desired = "desired"
    undesired = "undesired"


@dataclass(frozen=True)
class FeedbackRecord:
    kind: str
    x: Prompt
    y_w: Optional[Response] = None
    y_l: Optional[Response] = None
    y: Optional[Response] = None
    label: Optional[Label] = None
    raw_score: Optional[float] = None
    chosen_score: Optional[float] = None
    rejected_score: Optional[float] = None

    def __post_init__(self):
        present = {
            name for name in ("y_w", "y_l", "y", "label", "raw_score", "chosen_score", "rejected_score")
            if getattr(self, name) is not None
        }
        if self.kind == PAIRWISE:
            allowed, required = {"y_w", "y_l", "chosen_score", "rejected_score"}, {"y_w", "y_l"}
        elif self.kind == BINARY:
            allowed, required = {"y", "label"}, {"y", "label"}
        elif self.kind == SCALAR:
            allowed, required = {"y", "raw_score"}, {"y", "raw_score"}
        else:
            raise SchemaError("kind", f"unknown feedback kind {self.kind!r}")
        missing = sorted(required - present)
        if missing:
            raise SchemaError(missing[0], f"required for {self.kind} records")
        extra = sorted(present - allowed)
        if extra:
            raise SchemaError(extra[0], f"not allowed on {self.kind} records")
        if self.kind == PAIRWISE and self.y_w == self.y_l:
            raise SchemaError("rejected", "chosen and rejected responses are identical")
        if self.kind == PAIRWISE and (self.chosen_score is None) != (self.rejected_score is None):
            raise SchemaError("chosen_score", "scores must be given for both responses or neither")
        for name in ("raw_score", "chosen_score", "rejected_score"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise SchemaError(name, f"score {v} is not finite")

    @classmethod
    def pairwise(cls, x, y_w, y_l, chosen_score=None, rejected_score=None) -> "FeedbackRecord":
        return cls(PAIRWISE, _prompt(x), y_w=_response(y_w), y_l=_response(y_l),
                   chosen_score=chosen_score, rejected_score=rejected_score)

    @classmethod
    def binary(cls, x, y, label) -> "FeedbackRecord":
        return cls(BINARY, _prompt(x), y=_response(y), label=Label(label))

    @classmethod
    def scalar(cls, x, y, raw_score: float) -> "FeedbackRecord":
        return cls(SCALAR, _prompt(x), y=_response(y), raw_score=float(raw_score))

    @property
    def responses(self) -> List[Response]:
        return [self.y_w, self.y_l] if self.kind == PAIRWISE else [self.y]


def _prompt(x) -> Prompt:
    return x if isinstance(x, Prompt) else Prompt(int(x))


def _response(y) -> Response:
    return y if isinstance(y, Response) else Response.of(y)


@dataclass
class LossResult:
    value: float
    grad: torch.Tensor
    per_record: torch.Tensor


def binarize(records: Sequence[FeedbackRecord]) -> List[FeedbackRecord]:
    """Split each pairwise record into a desired and an undesired binary record."""
    out = []
    for r in records:
        if r.kind != PAIRWISE:
            raise SchemaError("kind", f"binarize expects pairwise records, got {r.kind}")
        out.append(FeedbackRecord.binary(r.x, r.y_w, Label.desired))
        out.append(FeedbackRecord.binary(r.x, r.y_l, Label.undesired))
    return out


def scalarize(records: Sequence[FeedbackRecord]) -> List[FeedbackRecord]:
    """Turn scored pairwise records into two scalar records each."""
    out = []
    for r in records:
        if r.kind != PAIRWISE:
            raise SchemaError("kind", f"scalarize expects pairwise records, got {r.kind}")
        if r.chosen_score is None:
            raise SchemaError("chosen_score", "scalarize needs scored pairwise records")
        out.append(FeedbackRecord.scalar(r.x, r.y_w, r.chosen_score))
        out.append(FeedbackRecord.scalar(r.x, r.y_l, r.rejected_score))
    return out
