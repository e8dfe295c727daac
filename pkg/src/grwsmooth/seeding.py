"""Stable sub-seeds derived from one root seed."""

import hashlib


def derive_seed(root: int, purpose: str) -> int:
    """64-bit seed from ``(root, purpose)``; stable across runs and platforms."""
    digest = hashlib.sha256(f"{int(root)}:{purpose}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
