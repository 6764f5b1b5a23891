"""Deterministic random number generation.

A splitmix64-seeded xoshiro256** generator with a vectorized lane mode for
bulk draws. All state arithmetic is explicit 64-bit, so streams are
reproducible across platforms and numpy builds. Generators are owned by the
caller and passed explicitly; there is no global state.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state once; returns (new_state, output)."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def mix_seed(*parts: int) -> int:
    """Fold integers into a single 64-bit seed (order-sensitive)."""
    state = 0
    out = 0
    for part in parts:
        state = (state ^ (part & _MASK64)) & _MASK64
        state, out = splitmix64(state)
    return out


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def _splitmix64_bulk(state: np.ndarray, rounds: int) -> np.ndarray:
    """Vectorized splitmix64: `rounds` outputs per lane, shape (rounds, n)."""
    state = state.astype(np.uint64, copy=True)
    outs = np.empty((rounds, state.size), dtype=np.uint64)
    with np.errstate(over="ignore"):
        for r in range(rounds):
            state += np.uint64(_GOLDEN)
            z = state.copy()
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            outs[r] = z ^ (z >> np.uint64(31))
    return outs


class Rng:
    """xoshiro256** stream seeded via splitmix64.

    Scalar draws advance a single 4-word state. Bulk draws consume one
    scalar output to key a block of independent lanes (one xoshiro256**
    stream per element, advanced in lockstep with numpy), so array results
    are identical regardless of how the surrounding code is batched.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        sm = self.seed
        state = []
        for _ in range(4):
            sm, word = splitmix64(sm)
            state.append(word)
        self._s = state

    def spawn(self, *key: int) -> "Rng":
        """Derive an independent child stream without consuming draws."""
        return Rng(mix_seed(self.seed, *key))

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * 2.0**-53
        return low + (high - low) * u

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection-free modulo of 64 bits.

        Bias is < n / 2**64, negligible for the small n used here.
        """
        if n <= 0:
            raise ValueError("randint bound must be positive")
        return self.next_u64() % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    # -- bulk lane draws ----------------------------------------------------

    def _lanes(self, n: int, draws: int) -> np.ndarray:
        """u64 matrix of shape (draws, n): n lanes advanced `draws` times."""
        base = self.next_u64()
        with np.errstate(over="ignore"):
            lane_keys = np.uint64(base) + np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GOLDEN)
            s0, s1, s2, s3 = _splitmix64_bulk(lane_keys, 4)
            out = np.empty((draws, n), dtype=np.uint64)
            for d in range(draws):
                out[d] = np.left_shift(s1 * np.uint64(5), np.uint64(7)) | np.right_shift(
                    s1 * np.uint64(5), np.uint64(57)
                )
                out[d] *= np.uint64(9)
                t = np.left_shift(s1, np.uint64(17))
                s2 ^= s0
                s3 ^= s1
                s1 ^= s2
                s0 ^= s3
                s2 ^= t
                s3 = np.left_shift(s3, np.uint64(45)) | np.right_shift(s3, np.uint64(19))
        return out

    def uniform_array(self, shape, low: float = 0.0, high: float = 1.0, dtype=np.float64) -> np.ndarray:
        n = int(np.prod(shape)) if np.ndim(shape) or isinstance(shape, (tuple, list)) else int(shape)
        bits = self._lanes(max(n, 1), 1)[0]
        u = (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = (low + (high - low) * u).astype(dtype)
        return out[:n].reshape(shape)

    def normal_array(self, shape, mean: float = 0.0, sigma: float = 1.0, dtype=np.float64) -> np.ndarray:
        """Box-Muller over two lane draws per element."""
        n = int(np.prod(shape)) if np.ndim(shape) or isinstance(shape, (tuple, list)) else int(shape)
        bits = self._lanes(max(n, 1), 2)
        u1 = (bits[0] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u2 = (bits[1] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        # guard u1 = 0 before the log
        u1 = np.maximum(u1, 2.0**-53)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        out = (mean + sigma * z).astype(dtype)
        return out[:n].reshape(shape)
