"""Reproducible random streams keyed by (master seed, run index, purpose tag).

Streams are numpy ``Philox`` generators (counter-based). The 128-bit key is
a BLAKE2 digest of the triple, so streams for distinct triples are
independent and identical across platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, run_index: int = 0, tag: str = "") -> np.ndarray:
    h = hashlib.blake2b(digest_size=16)
    h.update(f"{int(seed)}|{int(run_index)}|{tag}".encode())
    return np.frombuffer(h.digest(), dtype="<u8").copy()


def make_stream(seed: int, run_index: int = 0, tag: str = "") -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, run_index, tag)))


def split(stream: np.random.Generator, n: int) -> list[np.random.Generator]:
    """n child streams that do not overlap with each other or the parent (Philox jumps)."""
    bitgen = stream.bit_generator
    children = []
    for i in range(1, n + 1):
        children.append(np.random.Generator(bitgen.jumped(i)))
    return children
