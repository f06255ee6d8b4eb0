"""Keyed, reproducible random streams.

Every consumer of randomness asks for its own stream by naming a context,
e.g. ``derive_stream(seed, ["train", 3, "T", 2])``.  The stream depends only
on ``(master_seed, context)``, so removing a request from a sequence never
shifts the randomness seen by any other request.

Construction
------------
1. The key is serialized as ``seed (u64 LE)`` followed by each label as a
   one-byte tag (``s`` text / ``i`` integer), a u32 LE payload length and the
   payload (UTF-8 text, or the integer as signed 8-byte LE).
2. BLAKE2b with an 8-byte digest turns that into a 64-bit key.
3. SplitMix64 expands the key into the three data words of an SFC64
   generator (counter word starts at 1); 12 outputs are discarded.
4. Raw 64-bit words come from numpy's SFC64 bit generator, whose output is a
   fixed function of its 256-bit state.  Everything above the raw words
   (uniforms, Gaussians, bounded integers) is computed here, so numpy's
   distribution code is never involved.
"""

from __future__ import annotations

import hashlib
import math
import struct
from typing import Sequence, Union

import numpy as np

Label = Union[str, int]

_MASK64 = (1 << 64) - 1
_INV_2_53 = 1.0 / (1 << 53)


def _splitmix64(x: int) -> tuple[int, int]:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


def serialize_key(master_seed: int, context: Sequence[Label]) -> bytes:
    if not 0 <= master_seed <= _MASK64:
        raise ValueError("master_seed must fit in 64 unsigned bits")
    parts = [struct.pack("<Q", master_seed)]
    for label in context:
        # bool is an int subclass; keep it out so True and 1 can't be confused
        if isinstance(label, bool) or not isinstance(label, (str, int)):
            raise TypeError(f"context labels must be str or int, got {label!r}")
        if isinstance(label, str):
            payload = label.encode("utf-8")
            parts.append(b"s" + struct.pack("<I", len(payload)) + payload)
        else:
            parts.append(b"i" + struct.pack("<I", 8) + struct.pack("<q", label))
    return b"".join(parts)


def hash_key(master_seed: int, context: Sequence[Label]) -> int:
    digest = hashlib.blake2b(serialize_key(master_seed, context), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RandStream:
    """A deterministic stream of random draws bound to one key."""

    _DISCARD = 12

    def __init__(self, key: int):
        s = key
        words = []
        for _ in range(3):
            s, z = _splitmix64(s)
            words.append(z)
        self._bg = np.random.SFC64()
        state = self._bg.state
        state["state"]["state"] = np.array(words + [1], dtype=np.uint64)
        state["has_uint32"] = 0
        state["uinteger"] = 0
        self._bg.state = state
        self._bg.random_raw(self._DISCARD)

    # raw words ----------------------------------------------------------

    def next_u64(self) -> int:
        return int(self._bg.random_raw())

    def u64s(self, n: int) -> np.ndarray:
        return self._bg.random_raw(n)

    # floats -------------------------------------------------------------

    def next_uniform(self) -> float:
        return (self.next_u64() >> 11) * _INV_2_53

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1); consumes exactly ``n`` words."""
        raw = self._bg.random_raw(n)
        return (raw >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def gaussians(self, n: int) -> np.ndarray:
        """``n`` standard normals by Box-Muller.

        Always consumes ``2 * ceil(n / 2)`` words: each pair of uniforms gives
        a cosine and a sine variate, and an odd tail drops its sine.
        """
        pairs = (n + 1) // 2
        u = self.uniforms(2 * pairs)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))  # 1 - u in (0, 1]
        theta = 2.0 * math.pi * u[1::2]
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def next_gaussian(self) -> float:
        return float(self.gaussians(1)[0])

    # integers -----------------------------------------------------------

    def _bounded(self, raw: np.ndarray, bounds: Sequence[int]) -> list[int]:
        # multiply-shift: floor(x * m / 2^64), one word per draw
        return [(int(x) * m) >> 64 for x, m in zip(raw, bounds)]

    def shuffle(self, n: int) -> np.ndarray:
        """Uniform random permutation of ``range(n)`` (Fisher-Yates)."""
        perm = list(range(n))
        if n < 2:
            return np.array(perm, dtype=np.int64)
        bounds = range(n, 1, -1)
        picks = self._bounded(self._bg.random_raw(n - 1), bounds)
        for i, j in zip(range(n - 1, 0, -1), picks):
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)

    def sample_k(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)`` by partial Fisher-Yates."""
        if k > n:
            raise ValueError("sample larger than population")
        if k < 0:
            raise ValueError("k must be non-negative")
        pool = list(range(n))
        if k == 0:
            return np.array([], dtype=np.int64)
        bounds = range(n, n - k, -1)
        picks = self._bounded(self._bg.random_raw(k), bounds)
        for i, j in enumerate(picks):
            j += i
            pool[i], pool[j] = pool[j], pool[i]
        return np.array(pool[:k], dtype=np.int64)


def derive_stream(master_seed: int, context: Sequence[Label]) -> RandStream:
    if len(context) == 0:
        raise ValueError("context must be non-empty")
    return RandStream(hash_key(master_seed, context))
