"""Flat binary policy checkpoints with a JSON mirror.

Layout: magic ``UNAP``, version u32, kind tag u8, vocab size u32, max_len u32,
parameter count u64, then the parameters as little-endian float64.
"""
import json
import os
import struct

import numpy as np
import torch

from .base import Policy, Vocab
from .tabular import TabularPolicy
from .parametric import ParametricPolicy
from ..errors import MissingArtifact, SchemaError

MAGIC = b"UNAP"
VERSION = 1
HEADER = struct.Struct("<4sIBIIQ")
KIND_TAGS = {"tabular": 0, "parametric": 1}
POLICY_CLASSES = {"tabular": TabularPolicy, "parametric": ParametricPolicy}


def mirror_path(path: str) -> str:
    return os.path.splitext(path)[0] + ".json"


def save_checkpoint(policy: Policy, path: str) -> str:
    params = policy.params.numpy().astype("<f8")
    with open(path, "wb") as f:
        f.write(HEADER.pack(
            MAGIC, VERSION, KIND_TAGS[policy.kind],
            policy.vocab.size, policy.vocab.max_len, params.size,
        ))
        f.write(params.tobytes())

    mirror = {
        "format": MAGIC.decode(),
        "version": VERSION,
        "kind": policy.kind,
        "vocab": {"size": policy.vocab.size, "max_len": policy.vocab.max_len},
        "n_prompts": policy.n_prompts,
        "frozen": policy.frozen,
        "structure": policy.structure(),
        "n_params": int(params.size),
        "params": params.tolist(),
    }
    with open(mirror_path(path), "w") as f:
        json.dump(mirror, f, indent=1)
    return path


def load_checkpoint(path: str) -> Policy:
    if not os.path.exists(path):
        raise MissingArtifact(f"checkpoint {path} not found")
    if not os.path.exists(mirror_path(path)):
        raise MissingArtifact(f"checkpoint mirror {mirror_path(path)} not found")

    with open(path, "rb") as f:
        data = f.read()
    if len(data) < HEADER.size:
        raise SchemaError("header", f"{path} is shorter than the checkpoint header")
    magic, version, tag, size, max_len, n_params = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise SchemaError("magic", f"{path} is not a policy checkpoint")
    if version != VERSION:
        raise SchemaError("version", f"unsupported checkpoint version {version}")
    body = data[HEADER.size:]
    if len(body) != 8 * n_params:
        raise SchemaError("params", f"expected {n_params} parameters, found {len(body) // 8}")
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)

    with open(mirror_path(path)) as f:
        mirror = json.load(f)
    kind = mirror.get("kind")
    if KIND_TAGS.get(kind) != tag:
        raise SchemaError("kind", f"binary kind tag {tag} disagrees with mirror kind {kind!r}")
    if (mirror["vocab"]["size"], mirror["vocab"]["max_len"]) != (size, max_len):
        raise SchemaError("vocab", "binary header vocab disagrees with the JSON mirror")

    cls = POLICY_CLASSES[kind]
    return cls(
        Vocab(size, max_len), mirror["n_prompts"], torch.from_numpy(params),
        frozen=mirror.get("frozen", False), **mirror.get("structure", {}),
    )
