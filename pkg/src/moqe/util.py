"""Seeded RNG substreams and content digests."""

from __future__ import annotations

import hashlib
import json

import numpy as np


def substream(seed, name):
    """Independent generator derived from (seed, name); stable across runs."""
    h = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(h[:8], "little"))


def sha256_hex(*chunks):
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def array_digest(*arrays):
    """Hex digest over array contents, shapes, and dtypes."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def json_digest(obj):
    return sha256_hex(canonical_json(obj).encode())


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
