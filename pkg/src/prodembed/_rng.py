"""Small seeded generator usable inside numba kernels.

numba's global Mersenne Twister is noticeably slower in tight sampling
loops; xorshift64* is plenty for negative sampling and keeps each training
run reproducible from its own state array.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def next_uniform(state):
    """Uniform float in [0, 1); advances ``state`` (one-element uint64 array)."""
    x = state[0]
    x ^= x >> numba.uint64(12)
    x ^= x << numba.uint64(25)
    x ^= x >> numba.uint64(27)
    state[0] = x
    return float((x * numba.uint64(2685821657736338717)) >> numba.uint64(11)) * (
        1.0 / 9007199254740992.0
    )


@numba.njit(cache=True)
def next_below(state, n):
    """Uniform integer in [0, n)."""
    i = int(next_uniform(state) * n)
    return n - 1 if i >= n else i


def rng_state(seed: int) -> np.ndarray:
    word = np.random.SeedSequence(seed).generate_state(1, dtype=np.uint64)
    return np.array([word[0] | np.uint64(1)], dtype=np.uint64)


@numba.njit(cache=True)
def splitmix64(x):
    x = x + numba.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> numba.uint64(30))) * numba.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> numba.uint64(27))) * numba.uint64(0x94D049BB133111EB)
    return x ^ (x >> numba.uint64(31))


@numba.njit(cache=True)
def derive_state(seed, a, b, state):
    """Fill ``state`` from the triple (seed, a, b); independent streams per triple."""
    x = splitmix64(numba.uint64(seed))
    x = splitmix64(x ^ numba.uint64(a))
    x = splitmix64(x ^ numba.uint64(b))
    state[0] = x | numba.uint64(1)
