"""Domain-separated seed derivation.

One user-facing seed governs every random stream in a run; each consumer
derives its own 64-bit seed from (base seed, purpose tag) so that streams
never collide and adding a new consumer never shifts existing ones.
"""

from __future__ import annotations

import hashlib


def derive_seed(base: int, tag: str) -> int:
    digest = hashlib.sha256(f"{base}/{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
