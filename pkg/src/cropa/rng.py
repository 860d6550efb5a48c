"""SplitMix64 generator and FNV-1a hashing.

Every random draw in the package goes through :class:`Rng` so that runs are
bit-reproducible from a seed.  ``uniform`` converts the raw 64-bit output to a
double (round-to-nearest) and divides by 2**64, which other implementations
can reproduce exactly.
"""

from __future__ import annotations

import math

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
TWO_64 = 18446744073709551616.0
_BELOW_ONE = math.nextafter(1.0, 0.0)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class Rng:
    """SplitMix64 stream."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        u = float(self.next()) / TWO_64
        # values within 2**10 of 2**64 round up to 1.0
        return u if u < 1.0 else _BELOW_ONE

    def uniform(self, a: float, b: float) -> float:
        return a + (b - a) * self.random()

    def randbelow(self, n: int) -> int:
        if n < 1:
            raise ValueError("n must be positive")
        return min(int(self.random() * n), n - 1)

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        return lo + self.randbelow(hi - lo + 1)

    def gauss(self, sigma: float = 1.0) -> float:
        """Box-Muller normal draw; consumes two outputs per call."""
        u1 = self.random()
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(1.0 - u1))
        return sigma * r * math.cos(2.0 * math.pi * u2)

    def fork(self, salt: int) -> "Rng":
        return Rng(self.state ^ (salt & MASK64))


def fnv1a_64(data: bytes | str) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h
