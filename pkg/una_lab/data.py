"""Line-delimited JSON feedback datasets.

One record per line::

    {"kind":"pairwise","prompt":0,"chosen":[3],"rejected":[1]}
    {"kind":"binary","prompt":0,"response":[2],"label":"desired"}
    {"kind":"scalar","prompt":0,"response":[2],"raw_score":4.5}

Token lists hold content tokens; a trailing terminator is accepted and added
when absent. Pairwise lines may also carry ``chosen_score``/``rejected_score``.
"""
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

from .errors import EmptyFile, MissingArtifact, ParseError, SchemaError
from .policy import EOS, Response
from .records import BINARY, KINDS, PAIRWISE, SCALAR, FeedbackRecord, Label
from .reward import ScoreBounds, normalize_score
from .utils import canonical_json, content_hash

logger = logging.getLogger(__name__)

FIELDS = {
    PAIRWISE: ({"kind", "prompt", "chosen", "rejected"}, {"chosen_score", "rejected_score"}),
    BINARY: ({"kind", "prompt", "response", "label"}, set()),
    SCALAR: ({"kind", "prompt", "response", "raw_score"}, set()),
}


@dataclass
class Dataset:
    records: Tuple[FeedbackRecord, ...]
    bounds: ScoreBounds = field(default_factory=ScoreBounds)
    content_hash: str = ""
    kind_summary: Dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records, bounds: ScoreBounds = ScoreBounds()) -> "Dataset":
        records = tuple(records)
        if not records:
            raise EmptyFile("dataset has no records")
        for r in records:
            if r.kind == SCALAR:
                normalize_score(r.raw_score, bounds)
        summary = {k: 0 for k in KINDS}
        for r in records:
            summary[r.kind] += 1
        digest = content_hash(canonical_json(record_to_json(r)) for r in records)
        return cls(records, bounds, digest, summary)

    def __len__(self):
        return len(self.records)

    @property
    def prompt_ids(self) -> List[int]:
        return sorted({r.x.id for r in self.records})


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v) -> bool:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        return False
    try:
        return math.isfinite(v)
    except OverflowError:
        # integer literal too large for a float
        return False


def _tokens(obj: dict, name: str, line: int) -> Response:
    v = obj[name]
    if not isinstance(v, list) or not all(_is_int(t) and t >= 0 for t in v):
        raise SchemaError(name, "must be a list of non-negative integer token ids", line)
    if EOS in v[:-1]:
        raise SchemaError(name, "terminator token 0 may only appear at the end", line)
    return Response.of(v)


def parse_record(obj, line: int, bounds: ScoreBounds) -> FeedbackRecord:
    if not isinstance(obj, dict):
        raise SchemaError("record", "each line must be a JSON object", line)
    kind = obj.get("kind")
    if kind not in FIELDS:
        raise SchemaError("kind", f"must be one of {', '.join(KINDS)}, got {kind!r}", line)
    required, optional = FIELDS[kind]
    missing = sorted(required - obj.keys())
    if missing:
        raise SchemaError(missing[0], f"missing from {kind} record", line)
    extra = sorted(obj.keys() - required - optional)
    if extra:
        raise SchemaError(extra[0], f"unexpected on {kind} record", line)
    if not _is_int(obj["prompt"]) or obj["prompt"] < 0:
        raise SchemaError("prompt", "must be a non-negative integer", line)

    if kind == PAIRWISE:
        chosen, rejected = _tokens(obj, "chosen", line), _tokens(obj, "rejected", line)
        if chosen == rejected:
            raise SchemaError("rejected", "identical to chosen", line)
        scores = [obj.get("chosen_score"), obj.get("rejected_score")]
        if (scores[0] is None) != (scores[1] is None):
            raise SchemaError("chosen_score", "give both chosen_score and rejected_score or neither", line)
        for name, s in zip(("chosen_score", "rejected_score"), scores):
            if s is not None:
                if not _is_number(s):
                    raise SchemaError(name, "must be a finite number", line)
                normalize_score(s, bounds, line)
        return FeedbackRecord.pairwise(obj["prompt"], chosen, rejected, *scores)

    response = _tokens(obj, "response", line)
    if kind == BINARY:
        if obj["label"] not in ("desired", "undesired"):
            raise SchemaError("label", f"must be 'desired' or 'undesired', got {obj['label']!r}", line)
        return FeedbackRecord.binary(obj["prompt"], response, Label(obj["label"]))

    if not _is_number(obj["raw_score"]):
        raise SchemaError("raw_score", "must be a finite number", line)
    normalize_score(obj["raw_score"], bounds, line)
    return FeedbackRecord.scalar(obj["prompt"], response, obj["raw_score"])


def ingest(path: str, bounds: ScoreBounds = ScoreBounds()) -> Dataset:
    if not os.path.isfile(path):
        raise MissingArtifact(f"data file {path} not found")
    records = []
    with open(path, "rb") as f:
        for n, blob in enumerate(f, start=1):
            try:
                raw = blob.decode("utf-8")
            except UnicodeDecodeError as e:
                raise ParseError(f"not valid UTF-8: {e.reason}", n)
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", n)
            records.append(parse_record(obj, n, bounds))
    if not records:
        raise EmptyFile(f"{path} holds no records")
    dataset = Dataset.from_records(records, bounds)
    logger.info("ingested %s: %s, hash %s", path, dataset.kind_summary, dataset.content_hash)
    return dataset


def record_to_json(r: FeedbackRecord) -> dict:
    obj = {"kind": r.kind, "prompt": r.x.id}
    if r.kind == PAIRWISE:
        obj["chosen"] = list(r.y_w.content)
        obj["rejected"] = list(r.y_l.content)
        if r.chosen_score is not None:
            obj["chosen_score"] = float(r.chosen_score)
            obj["rejected_score"] = float(r.rejected_score)
    else:
        obj["response"] = list(r.y.content)
        if r.kind == BINARY:
            obj["label"] = r.label.value
        else:
            obj["raw_score"] = float(r.raw_score)
    return obj


def dump_records(records, path: str):
    with open(path, "w") as f:
        for r in records:
            f.write(canonical_json(record_to_json(r)) + "\n")


def dump_dataset(dataset: Dataset, path: str):
    dump_records(dataset.records, path)


def read_bytes(path: str) -> bytes:
    if not os.path.exists(path):
        raise MissingArtifact(f"{path} does not exist")
    with open(path, "rb") as f:
        return f.read()
