"""Seeding and hashing helpers.

Every random draw in the package goes through a Generator built by
`make_rng`, keyed by a tuple of ints/strings, so that any artifact can be
regenerated bit-for-bit from its seed material.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np


def _entropy(parts) -> list[int]:
    out = []
    for p in parts:
        if isinstance(p, (int, np.integer)):
            out.append(int(p) & 0xFFFFFFFFFFFFFFFF)
        elif isinstance(p, str):
            digest = hashlib.sha256(p.encode("utf-8")).digest()
            out.append(int.from_bytes(digest[:8], "little"))
        else:
            raise TypeError(f"seed part must be int or str, got {type(p).__name__}")
    return out


def make_rng(*parts) -> np.random.Generator:
    """Deterministic Generator keyed on a mixed int/str tuple."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(_entropy(parts))))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
