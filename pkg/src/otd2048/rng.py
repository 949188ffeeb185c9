"""Seedable random streams shared by the Python API and the numba kernels.

Training workers and evaluation episodes each need an independent,
reproducible random stream. The generator is xoshiro256** whose state is
four 64-bit words living in a numpy array, so compiled kernels can advance
it in place; stream k of a seed is obtained by seeding a splitmix64
sequence with the master seed and taking its outputs 4k..4k+3 as the
initial state (the seeding procedure recommended by the xoshiro authors).

Both algorithms are pinned: the sequence produced by a given
``(seed, stream)`` pair is part of this package's compatibility contract
and will not change between versions. Derived draws are pinned too:
``below(n)`` is ``next_u64() % n`` and ``unit()`` uses the top 53 bits.
"""

from __future__ import annotations

import numpy as np
from numba import njit

U64 = np.uint64

_SM_GAMMA = U64(0x9E3779B97F4A7C15)
_SM_MIX1 = U64(0xBF58476D1CE4E5B9)
_SM_MIX2 = U64(0x94D049BB133111EB)
_UNIT_SCALE = 1.0 / 9007199254740992.0  # 2**-53


@njit(cache=True, nogil=True)
def splitmix64(state):
    """Advance a 1-element uint64 state array and return the next output."""
    state[0] = state[0] + _SM_GAMMA
    z = state[0]
    z = (z ^ (z >> U64(30))) * _SM_MIX1
    z = (z ^ (z >> U64(27))) * _SM_MIX2
    return z ^ (z >> U64(31))


@njit(cache=True, nogil=True)
def xoshiro_next(s):
    """Advance a 4-element uint64 xoshiro256** state in place."""
    x = s[1] * U64(5)
    result = ((x << U64(7)) | (x >> U64(57))) * U64(9)
    t = s[1] << U64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = (s[3] << U64(45)) | (s[3] >> U64(19))
    return result


@njit(cache=True, nogil=True)
def xoshiro_below(s, n):
    """Uniform-ish integer in [0, n); n must be small (modulo draw)."""
    return xoshiro_next(s) % U64(n)


@njit(cache=True, nogil=True)
def xoshiro_unit(s):
    """Uniform float64 in [0, 1) from the top 53 bits."""
    return float(xoshiro_next(s) >> U64(11)) * _UNIT_SCALE


def seed_state(seed: int, stream: int = 0) -> np.ndarray:
    """Initial xoshiro state for the given master seed and stream index."""
    if stream < 0:
        raise ValueError("stream index must be non-negative")
    sm = np.array([U64(seed & 0xFFFFFFFFFFFFFFFF)], dtype=np.uint64)
    for _ in range(4 * stream):
        splitmix64(sm)
    state = np.empty(4, dtype=np.uint64)
    for i in range(4):
        state[i] = splitmix64(sm)
    if not state.any():
        state[0] = U64(1)  # xoshiro state must not be all-zero
    return state


class Stream:
    """One independent random stream.

    The underlying state array is handed directly to compiled kernels,
    which advance it in place; draws made through this object and draws
    made inside kernels therefore consume the same sequence.
    """

    __slots__ = ("seed", "stream", "state")

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self.state = seed_state(self.seed, self.stream)

    def next_u64(self) -> int:
        return int(xoshiro_next(self.state))

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        return int(xoshiro_below(self.state, n))

    def unit(self) -> float:
        return float(xoshiro_unit(self.state))

    def substream(self, k: int) -> "Stream":
        """Stream k of this stream's seed (independent of this object)."""
        return Stream(self.seed, self.stream + 1 + k)

    def snapshot(self) -> np.ndarray:
        return self.state.copy()

    def restore(self, snap: np.ndarray) -> None:
        self.state[:] = snap

    def __repr__(self) -> str:
        return f"Stream(seed={self.seed}, stream={self.stream})"
