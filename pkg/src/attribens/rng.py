"""Deterministic, counter-based random streams keyed by structured tuples.

Every stochastic choice in the library (init, shuffling, subsets, dropout,
masks, projections) draws from a generator keyed by a tuple of ints/strings,
so results never depend on call order, thread count, or process layout.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "keyed_generator", "keyed_uniform"]


def _digest(fields: tuple) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for field in fields:
        if isinstance(field, (bool, np.bool_)):
            raise TypeError("bool keys are ambiguous; use ints or strings")
        if isinstance(field, (int, np.integer)):
            h.update(b"i" + int(field).to_bytes(16, "little", signed=True))
        elif isinstance(field, str):
            encoded = field.encode("utf-8")
            h.update(b"s" + len(encoded).to_bytes(4, "little") + encoded)
        else:
            raise TypeError(f"unsupported key field type: {type(field)!r}")
    return h.digest()


def derive_seed(*fields: int | str) -> int:
    """Collapse a structured key into a stable 63-bit seed."""
    return int.from_bytes(_digest(fields)[:8], "little") >> 1


def keyed_generator(*fields: int | str) -> np.random.Generator:
    """Philox generator keyed by the field tuple; same key, same stream."""
    digest = _digest(fields)
    key = np.frombuffer(digest, dtype=np.uint64)[:2]
    return np.random.Generator(np.random.Philox(key=key))


def keyed_uniform(*fields: int | str) -> float:
    """One uniform draw in [0, 1) fully determined by the field tuple."""
    raw = int.from_bytes(_digest(fields)[:8], "little")
    return raw / 2.0**64
