"""Cross-platform deterministic PRNG for sampling decisions.

A SplitMix64 stream feeds Fisher-Yates shuffles. The algorithm is fixed
here (not delegated to a host library) so that identical seeds yield
identical shuffles on every platform and in any reimplementation.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def next_below(self, bound: int) -> int:
        """Uniform integer in [0, bound) by rejection (no modulo bias)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = MASK64 - (MASK64 % bound)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % bound


def fnv1a64(text: str) -> int:
    """FNV-1a 64-bit hash of UTF-8 bytes; used to derive per-class seeds."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


def shuffled(items, rng: SplitMix64) -> list:
    """Fisher-Yates shuffle driven by the SplitMix64 stream; returns a new list."""
    out = list(items)
    for i in range(len(out) - 1, 0, -1):
        j = rng.next_below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out
