"""Portable 64-bit PRNG for data generation.

xorshift64* (Vigna, 2016): shifts 12, 25, 27 and output multiplier
0x2545F4914F6CDD1D. Streams are seeded through splitmix64 so that nearby
(seed, index, stream) triples give unrelated sequences. Pure integer
arithmetic, so the output is identical on every platform.
"""
MASK64 = (1 << 64) - 1
_MULT = 0x2545F4914F6CDD1D
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


class XorShift64Star:
    def __init__(self, *key: int):
        state = 0
        for k in key:
            state = splitmix64(state ^ (int(k) & MASK64))
        self.state = state or _GOLDEN

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * _MULT) & MASK64

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        """Float in [lo, hi) from the top 53 bits."""
        return lo + (hi - lo) * ((self.next_u64() >> 11) * (1.0 / (1 << 53)))

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        span = hi - lo + 1
        return lo + self.next_u64() % span

    def uniforms(self, n: int, lo: float = 0.0, hi: float = 1.0) -> list:
        return [self.uniform(lo, hi) for _ in range(n)]
