"""Portable pseudo-random numbers for reproducible dataset synthesis.

A splitmix64 stage expands the user seed into the state of a xorshift128+
generator. Both algorithms are defined purely on 64-bit integer arithmetic,
so a given seed yields the identical stream on every platform and Python
build. numpy's generators would also do, but pinning the algorithm here
keeps synthesized datasets byte-stable even across numpy versions.
"""

from __future__ import annotations

from .errors import UsageError

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns (output, next_state)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64, state


def derive_seed(*parts: int | str) -> int:
    """Fold seed components (ints or strings) into one 64-bit seed.

    Used to hand independent, order-insensitive-to-scheduling streams to
    parallel synthesis workers: each worker derives its seed from the run
    seed plus a stable task key instead of consuming a shared stream.
    """
    state = 0x8C9A2B7D1E5F3A61
    for part in parts:
        if isinstance(part, str):
            for byte in part.encode("utf-8"):
                out, state = splitmix64(state ^ byte)
                state ^= out
        else:
            out, state = splitmix64(state ^ (int(part) & _MASK64))
            state ^= out
    out, _ = splitmix64(state)
    return out


class Xorshift128Plus:
    """xorshift128+ generator seeded through splitmix64."""

    def __init__(self, seed: int):
        s = int(seed) & _MASK64
        self._s0, s = splitmix64(s)
        self._s1, _ = splitmix64(s)
        if self._s0 == 0 and self._s1 == 0:
            self._s0 = 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        s1, s0 = self._s0, self._s1
        result = (s0 + s1) & _MASK64
        self._s0 = s0
        s1 = (s1 ^ (s1 << 23)) & _MASK64
        self._s1 = s1 ^ s0 ^ (s1 >> 18) ^ (s0 >> 5)
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def randrange(self, n: int) -> int:
        """Uniform integer in [0, n) without modulo bias."""
        if n <= 0:
            raise UsageError(f"randrange bound must be positive, got {n}")
        limit = _MASK64 - (_MASK64 + 1) % n
        while True:
            value = self.next_u64()
            if value <= limit:
                return value % n

    def randint(self, low: int, high: int) -> int:
        """Uniform integer in [low, high] inclusive."""
        if high < low:
            raise UsageError(f"empty randint range [{low}, {high}]")
        return low + self.randrange(high - low + 1)

    def choice(self, seq):
        if not seq:
            raise UsageError("choice from an empty sequence")
        return seq[self.randrange(len(seq))]
