"""
Deterministic random numbers

splitmix64 is counter based: the k-th output of a stream is
``mix(state0 + k * GOLDEN)``, which lets whole blocks of draws be produced with
numpy while staying bit-identical to one-at-a-time draws.

A stream is addressed by a key ``(seed, index, tag)``; the same key always
yields the same sequence.
"""
import math
from dataclasses import dataclass

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
TWO_PI = 2.0 * math.pi
INV_2_53 = 2.0 ** -53


def mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


def fnv1a64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode('utf-8'):
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


@dataclass(frozen=True)
class StreamKey:
    seed: int
    index: int = 0
    tag: str = ''

    def initial_state(self) -> int:
        s = mix64((self.seed + GOLDEN) & MASK64)
        s = mix64(((s ^ (self.index & MASK64)) + GOLDEN) & MASK64)
        return mix64(s ^ fnv1a64(self.tag))

    def to_list(self) -> list:
        return [self.seed, self.index, self.tag]

    @classmethod
    def from_list(cls, values) -> 'StreamKey':
        seed, index, tag = values
        return cls(int(seed), int(index), str(tag))


class DeterministicRng:
    """
    splitmix64 generator with Box-Muller gaussians

    Draw accounting: ``uniform`` consumes one 64-bit output, gaussians are
    produced in pairs from two uniforms (``u1`` for the radius, ``u2`` for the
    angle); ``next_gaussian`` caches the second value of a pair.
    """

    def __init__(self, seed: int | StreamKey = 0, index: int = 0, tag: str = ''):
        self.key = seed if isinstance(seed, StreamKey) else StreamKey(int(seed), int(index), tag)
        self.state = self.key.initial_state()
        self._cached = None

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def uniform(self) -> float:
        """
        Uniform in [0, 1) with 53 bits of resolution
        """
        return (self.next_u64() >> 11) * INV_2_53

    def uniform_range(self, low: float, high: float) -> float:
        return low + (high - low) * self.uniform()

    def randint(self, low: int, high: int) -> int:
        """
        Integer uniform in [low, high] (both inclusive)
        """
        return low + min(int(self.uniform() * (high - low + 1)), high - low)

    def choice(self, options):
        return options[self.randint(0, len(options) - 1)]

    def uniform_array(self, n: int) -> np.ndarray:
        counters = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN) + np.uint64(self.state)
        self.state = (self.state + n * GOLDEN) & MASK64
        return (_mix64_array(counters) >> np.uint64(11)).astype(np.float64) * INV_2_53

    def gaussian_array(self, n: int) -> np.ndarray:
        """
        ``n`` standard normal draws; consumes ``2 * ceil(n / 2)`` uniforms.

        The cache of ``next_gaussian`` is dropped first.
        """
        self._cached = None
        pairs = (n + 1) // 2
        u = self.uniform_array(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        angle = TWO_PI * u[:, 1]
        z = np.empty((pairs, 2), dtype=np.float64)
        z[:, 0] = radius * np.cos(angle)
        z[:, 1] = radius * np.sin(angle)
        return z.reshape(-1)[:n]

    def next_gaussian(self) -> float:
        if self._cached is not None:
            value, self._cached = self._cached, None
            return value
        pair = self.gaussian_array(2)
        self._cached = float(pair[1])
        return float(pair[0])


def rng_next_gaussian(rng: DeterministicRng) -> float:
    return rng.next_gaussian()


def rng_uniform(rng: DeterministicRng) -> float:
    return rng.uniform()
