"""Portable seeded random streams.

Bit generation is xoshiro256** run over 64 independent lanes, each lane's
state filled from a splitmix64 sequence keyed by the seed.  All arithmetic is
explicit uint64 math in numpy, so a given key yields the same bytes on every
platform and numpy version.  Gaussians come from Box-Muller, gammas from
Marsaglia-Tsang.
"""
from __future__ import annotations

import hashlib

import numpy as np

_LANES = 64
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x`` (state already advanced by the caller)."""
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_key(*parts) -> int:
    """Fold integers, strings and nested tuples into a single 64-bit key."""
    key = 0x6A09E667F3BCC908
    for part in parts:
        if isinstance(part, (tuple, list)):
            part = derive_key(*part)
        elif isinstance(part, str):
            part = int.from_bytes(hashlib.blake2b(part.encode("utf-8"), digest_size=8).digest(), "little")
        key = splitmix64((key ^ (int(part) & _MASK64)) + 0x9E3779B97F4A7C15)
        key = splitmix64(key + 0x9E3779B97F4A7C15)
    return key


def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class Rng:
    """Deterministic stream keyed by any tuple of ints/strings.

    >>> Rng(7).random(3).tolist() == Rng(7).random(3).tolist()
    True
    """

    def __init__(self, *key):
        if not key:
            raise ValueError("Rng needs at least one key component")
        x = derive_key(*key)
        words = []
        for _ in range(4 * _LANES):
            x = (x + 0x9E3779B97F4A7C15) & _MASK64
            words.append(splitmix64(x))
        self._s = np.array(words, dtype=np.uint64).reshape(4, _LANES)
        self._buf = np.empty(0, dtype=np.uint64)

    def child(self, *key) -> "Rng":
        """An independent stream; consumes one word from this stream."""
        return Rng(int(self.next_u64(1)[0]), *key)

    def _step(self):
        s0, s1, s2, s3 = self._s
        with np.errstate(over="ignore"):
            result = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._s[3] = _rotl(s3, 45)
        return result

    def next_u64(self, n: int) -> np.ndarray:
        chunks = [self._buf]
        have = self._buf.size
        while have < n:
            block = self._step()
            chunks.append(block)
            have += block.size
        allv = np.concatenate(chunks) if len(chunks) > 1 else self._buf
        self._buf = allv[n:]
        return allv[:n]

    # -- distributions -------------------------------------------------------
    def random(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return float(u[0]) if size is None else u.reshape(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return low + (high - low) * self.random(size)

    def normal(self, size=None, loc=0.0, scale=1.0):
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.random(m)  # (0, 1]
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        z = loc + scale * z
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, low, high=None, size=None):
        if high is None:
            low, high = 0, low
        n = 1 if size is None else int(np.prod(size))
        v = low + np.floor(self.random(n) * (high - low)).astype(np.int64)
        return int(v[0]) if size is None else v.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random(n), kind="stable")

    def gamma(self, shape: float, size: int) -> np.ndarray:
        if shape <= 0:
            raise ValueError("gamma shape must be positive")
        if shape < 1.0:
            boost = self.random(size) ** (1.0 / shape)
            return self.gamma(shape + 1.0, size) * boost
        d = shape - 1.0 / 3.0
        c = 1.0 / np.sqrt(9.0 * d)
        out = np.empty(size)
        todo = np.arange(size)
        while todo.size:
            k = todo.size
            x = self.normal(k)
            v = (1.0 + c * x) ** 3
            u = self.random(k)
            ok = (v > 0) & (np.log(np.where(u > 0, u, 1e-300)) <
                            0.5 * x * x + d - d * np.where(v > 0, v, 1.0)
                            + d * np.log(np.where(v > 0, v, 1.0)))
            out[todo[ok]] = d * v[ok]
            todo = todo[~ok]
        return out

    def dirichlet(self, alpha) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=np.float64)
        g = np.array([self.gamma(a, 1)[0] for a in alpha])
        total = g.sum()
        if total <= 0:  # every draw underflowed for tiny alpha
            g = np.zeros_like(alpha)
            g[self.integers(alpha.size)] = 1.0
            return g
        return g / total
