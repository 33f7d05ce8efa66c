import hashlib
import json
from typing import Iterable


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def content_hash(lines: Iterable[str]) -> str:
    """64-bit blake2b digest of newline-joined canonical lines, as hex."""
    h = hashlib.blake2b(digest_size=8)
    for line in lines:
        h.update(line.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def blob_hash(data: bytes) -> str:
    """Git-style blob id of ``data`` (sha1 over ``blob <len>\\0<data>``)."""
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()
