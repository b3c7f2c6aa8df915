"""Per-event random streams.

Every event owns an independent xoshiro256** generator whose state is
derived from ``(seed, event_index, stream)`` through SplitMix64.  Because no
state is shared between events, results do not depend on how events are
split across workers.  The compiled kernel implements the same generator.
"""

from __future__ import annotations

import math

MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_STREAM_MIX = 0xD1B54A32D192ED03
_INV_2_53 = 1.0 / 9007199254740992.0

STREAM_TRANSPORT = 0
STREAM_DIGITIZE = 1


def splitmix64(x: int) -> tuple[int, int]:
    """One SplitMix64 step; returns (new_state, output)."""
    x = (x + _GOLDEN) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def event_key(seed: int, event: int, stream: int) -> int:
    return ((seed & MASK64) ^ ((event * _GOLDEN) & MASK64) ^ ((stream * _STREAM_MIX) & MASK64)) & MASK64


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class EventRng:
    """xoshiro256** generator seeded for one (seed, event, stream) triple."""

    __slots__ = ("s0", "s1", "s2", "s3")

    def __init__(self, seed: int, event: int = 0, stream: int = 0):
        x = event_key(seed, event, stream)
        x, self.s0 = splitmix64(x)
        x, self.s1 = splitmix64(x)
        x, self.s2 = splitmix64(x)
        x, self.s3 = splitmix64(x)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s0, self.s1, self.s2, self.s3
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s0, self.s1, self.s2, self.s3 = s0, s1, s2, s3
        return result

    def random(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * _INV_2_53

    def normal(self) -> float:
        """Standard normal deviate (Box-Muller, one value per call)."""
        u1 = self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)
