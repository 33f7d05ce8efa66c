from .rng import make_rng
from .hashing import canonical_json, content_hash, blob_hash

__all__ = ["make_rng", "canonical_json", "content_hash", "blob_hash"]
