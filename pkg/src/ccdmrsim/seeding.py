"""Deterministic seed derivation.

Every stochastic draw in a run descends from the master seed through a
stable hash of context tokens (block index, point index, repeat index...),
so reruns of the same configuration are byte-identical and independent of
wall clock, host, or Python hash randomisation.
"""

from __future__ import annotations

import hashlib


def derive_seed(master_seed: int, *tokens) -> int:
    """64-bit seed from the master seed and an ordered token path."""
    payload = repr((int(master_seed),) + tuple(tokens)).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little")
