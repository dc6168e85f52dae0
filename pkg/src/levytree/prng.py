"""Counter-based splittable seeds and Gaussian sampling.

A seed is a 64-bit unsigned integer (or a numpy array of them, which is how
batches of independent paths are represented).  All randomness comes from the
Threefry-2x32 block cipher with 20 rounds, keyed by the seed.  Splitting and
drawing normals hash disjoint counter domains, so both are pure functions of
the seed and nothing is ever mutated.

Normals use the inverse normal CDF of a 52-bit uniform on the open unit
interval.  This transform is part of the reproducibility contract: changing it
changes every path.

When numba is installed the hash runs as a compiled ufunc; the pure numpy
implementation is the fallback and the reference, and both give identical
bits.  Set ``LEVYTREE_PURE_NUMPY=1`` to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.special import ndtri

__all__ = [
    "SEED_BITS",
    "as_seed",
    "parse_seed",
    "seed_batch",
    "split_seed",
    "normal",
    "threefry2x32",
]

SEED_BITS = 64

_ROTATIONS = (13, 15, 26, 6, 17, 29, 16, 24)
_PARITY = np.uint32(0x1BD11BDA)
# Second counter word separates the child-derivation stream from the
# Gaussian stream of the same key.
_SPLIT_DOMAIN = np.uint32(0x53504C54)
_NORMAL_DOMAIN = np.uint32(0x4E524D4C)
_MASK32 = np.uint64(0xFFFFFFFF)


def threefry2x32(key0, key1, ctr0, ctr1):
    """Threefry-2x32-20 on broadcast uint32 arrays; returns the two output words."""
    k0 = np.asarray(key0, dtype=np.uint32)
    k1 = np.asarray(key1, dtype=np.uint32)
    c0 = np.asarray(ctr0, dtype=np.uint32)
    c1 = np.asarray(ctr1, dtype=np.uint32)
    shape = np.broadcast_shapes(k0.shape, k1.shape, c0.shape, c1.shape)
    ks = (k0, k1, k0 ^ k1 ^ _PARITY)

    # Working arrays are at least 1-d so in-place uint32 arithmetic wraps
    # silently instead of going through numpy scalars.
    work = shape if shape else (1,)
    x0 = np.empty(work, dtype=np.uint32)
    x1 = np.empty(work, dtype=np.uint32)
    x0[...] = c0
    x1[...] = c1
    x0 += ks[0]
    x1 += ks[1]
    tmp = np.empty(work, dtype=np.uint32)
    for block in range(5):
        for i in range(4):
            rot = _ROTATIONS[4 * (block % 2) + i]
            x0 += x1
            np.right_shift(x1, 32 - rot, out=tmp)
            np.left_shift(x1, rot, out=x1)
            x1 |= tmp
            x1 ^= x0
        inject = block + 1
        x0 += ks[inject % 3]
        x1 += ks[(inject + 1) % 3]
        x1 += np.uint32(inject)
    return x0.reshape(shape), x1.reshape(shape)


def as_seed(seed) -> np.ndarray:
    """Coerce an int, numpy integer or integer array into a uint64 seed array."""
    if isinstance(seed, np.ndarray):
        if seed.dtype == np.uint64:
            return seed
        if not np.issubdtype(seed.dtype, np.integer):
            raise TypeError(f"seed array must have an integer dtype, got {seed.dtype}")
        if np.any(seed < 0):
            raise ValueError("seeds must be non-negative")
        return seed.astype(np.uint64)
    if isinstance(seed, (bool, np.bool_)) or not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    value = int(seed)
    if not 0 <= value < 2**SEED_BITS:
        raise ValueError(f"seed {value} does not fit in {SEED_BITS} unsigned bits")
    return np.asarray(value, dtype=np.uint64)


def parse_seed(text: str) -> int:
    """Parse a decimal or 0x-prefixed hexadecimal 64-bit seed."""
    try:
        value = int(text.strip().replace("_", ""), 0)
    except ValueError:
        raise ValueError(f"not a decimal or hex integer: {text!r}") from None
    if not 0 <= value < 2**SEED_BITS:
        raise ValueError(f"seed {text!r} does not fit in {SEED_BITS} unsigned bits")
    return value


def _hash_numpy(seed, ctr, domain):
    hi = (seed >> np.uint64(32)).astype(np.uint32)
    lo = (seed & _MASK32).astype(np.uint32)
    x0, x1 = threefry2x32(hi, lo, ctr, domain)
    return (x0.astype(np.uint64) << np.uint64(32)) | x1.astype(np.uint64)


def _compile_hash():
    """Threefry keyed by a 64-bit seed as a numba ufunc, or None without numba."""
    try:
        import numba
    except ImportError:
        return None

    # uint64 arithmetic with explicit masking keeps numba's integer promotion
    # from changing the 32-bit wrap-around.
    m = np.uint64(0xFFFFFFFF)
    rots = tuple(np.uint64(r) for r in _ROTATIONS)
    parity = np.uint64(int(_PARITY))

    @numba.vectorize(["uint64(uint64, uint32, uint32)"], nopython=True, cache=False)
    def hash64(seed, ctr, domain):
        k0 = seed >> np.uint64(32)
        k1 = seed & m
        k2 = k0 ^ k1 ^ parity
        x0 = (np.uint64(ctr) + k0) & m
        x1 = (np.uint64(domain) + k1) & m
        for block in range(5):
            base = 4 * (block % 2)
            for i in range(4):
                rot = rots[base + i]
                x0 = (x0 + x1) & m
                x1 = ((x1 << rot) | (x1 >> (np.uint64(32) - rot))) & m
                x1 ^= x0
            inject = block + 1
            j = inject % 3
            ka = k0 if j == 0 else (k1 if j == 1 else k2)
            j = (inject + 1) % 3
            kb = k0 if j == 0 else (k1 if j == 1 else k2)
            x0 = (x0 + ka) & m
            x1 = (x1 + kb + np.uint64(inject)) & m
        return (x0 << np.uint64(32)) | x1

    return hash64


_HASH = None if os.environ.get("LEVYTREE_PURE_NUMPY") else _compile_hash()


def _hash(seed, ctr, domain, *, pure: bool = False):
    """Threefry of counters ``ctr`` under 64-bit keys ``seed``, packed as ``x0 << 32 | x1``."""
    if _HASH is None or pure:
        return _hash_numpy(seed, ctr, domain)
    return _HASH(seed, ctr, domain)


def _children(seed, n: int, *, pure: bool = False) -> np.ndarray:
    if int(n) != n or n < 1:
        raise ValueError(f"split count must be a positive integer, got {n!r}")
    seed = as_seed(seed)
    ctr = np.arange(int(n), dtype=np.uint32)
    return _hash(seed[..., None], ctr, _SPLIT_DOMAIN, pure=pure)


def split_seed(seed, n: int) -> tuple[np.ndarray, ...]:
    """Derive ``n`` child seeds; each child has the shape of ``seed``.

    Child ``i`` is the Threefry hash of counter ``i`` under the parent key, so
    it depends only on ``(seed, i)``.  The result does not depend on ``n``
    beyond its length.
    """
    kids = _children(seed, n)
    return tuple(kids[..., i].copy() for i in range(kids.shape[-1]))


def seed_batch(seed, n: int) -> np.ndarray:
    """``n`` independent root seeds derived from one seed, as a 1-d array.

    Used to fan a single configured seed out into a Monte-Carlo batch.
    """
    root = as_seed(seed)
    if root.ndim != 0:
        raise ValueError("seed_batch expects a scalar seed")
    return _children(root, n)


def normal(seed, dim: int, variance=1.0) -> np.ndarray:
    """Centred Gaussian draws of shape ``seed.shape + (dim,)``.

    ``normal(s, d, v)`` is computed as ``sqrt(v) * normal(s, d, 1)`` so the
    scaling identity holds bit for bit.
    """
    if int(dim) != dim or dim < 1:
        raise ValueError(f"dim must be a positive integer, got {dim!r}")
    variance = np.asarray(variance, dtype=np.float64)
    if np.any(variance < 0) or not np.all(np.isfinite(variance)):
        raise ValueError("variance must be finite and non-negative")
    seed = as_seed(seed)
    ctr = np.arange(int(dim), dtype=np.uint32)
    # Top 52 of the 64 hash bits; k + 0.5 is exact below 2**52 so u stays
    # inside (0, 1).
    bits = _hash(seed[..., None], ctr, _NORMAL_DOMAIN) >> np.uint64(12)
    u = (bits.astype(np.float64) + 0.5) * 2.0**-52
    z = ndtri(u)
    if variance.ndim:
        variance = variance[..., None]
    return np.sqrt(variance) * z
