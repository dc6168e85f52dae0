"""Conditional Gaussian sampling of increments and Lévy areas.

Midpoint bridges split ``[s, u]`` at ``t = (s+u)/2`` given the rescaled triple
over ``[s, u]``; they drive the tree descent.  Interpolations sample the
single-index value at an arbitrary ``r`` in ``[s, u]`` given both endpoint
values and the triple between them; they finish a query inside a leaf.

Every sampler has a ``*_given`` twin that takes the Gaussian draws explicitly,
which is what the tree and the tests use.  Seeded versions consume split
children in a fixed order: ``Z`` then ``X1`` then ``X2``.

Times are batch-shaped arrays (or scalars); triple fields carry a trailing
dimension axis.
"""

from __future__ import annotations

import contextlib
import contextvars

import numpy as np

from .levy import LevyTriple, RescaledTriple, _col, concat, where
from .prng import normal, split_seed

__all__ = [
    "midpoint_w",
    "midpoint_wh",
    "midpoint_whk",
    "interp_w",
    "interp_wh",
    "interp_whk",
    "conditional_mean_whk",
    "conditional_cov_whk",
    "covariance_factor",
    "inject_fault",
]

# Mutation hook for testing the validators; see inject_fault.
_FAULT: contextvars.ContextVar[str | None] = contextvars.ContextVar("levytree_fault", default=None)
FAULTS = ("flip-k-mean",)


@contextlib.contextmanager
def inject_fault(name: str):
    """Deliberately corrupt one bridge coefficient inside the ``with`` block.

    ``"flip-k-mean"`` negates the weight of K in the conditional mean of H.
    Only meant for checking that the statistical suites catch real bugs.
    """
    if name not in FAULTS:
        raise ValueError(f"unknown fault {name!r}; known: {', '.join(FAULTS)}")
    token = _FAULT.set(name)
    try:
        yield
    finally:
        _FAULT.reset(token)


def _dim(x) -> int:
    return np.shape(x)[-1]


def _check_midpoint(s, t, u):
    s, t, u = (np.asarray(x, dtype=np.float64) for x in (s, t, u))
    if not np.all(u > s):
        raise ValueError("midpoint bridge needs u > s")
    if not np.all(t == 0.5 * (s + u)):
        raise ValueError("t must be the exact midpoint of [s, u]")


def _check_width(s, u):
    if not np.all(np.asarray(u, dtype=np.float64) > np.asarray(s, dtype=np.float64)):
        raise ValueError("midpoint bridge needs u > s")


def _check_inside(s, r, u):
    s, r, u = (np.asarray(x, dtype=np.float64) for x in (s, r, u))
    if not (np.all(s <= r) and np.all(r <= u)):
        raise ValueError("interpolation time outside [s, u]")
    return s, r, u


# ---------------------------------------------------------------- midpoints


def midpoint_w_given(width, w_s, w_u, xi):
    """Value at the midpoint given endpoint values; ``xi`` is standard normal."""
    return 0.5 * (w_s + w_u) + 0.5 * np.sqrt(_col(width)) * xi


def midpoint_w(s, t, u, w_s, w_u, seed):
    """Brownian bridge midpoint value ``w_t`` from ``w_s``, ``w_u``."""
    _check_midpoint(s, t, u)
    w_s = np.asarray(w_s, dtype=np.float64)
    w_u = np.asarray(w_u, dtype=np.float64)
    return midpoint_w_given(np.asarray(u) - np.asarray(s), w_s, w_u, normal(seed, _dim(w_s)))


def midpoint_wh_given(width, ysu: RescaledTriple, z, n):
    """Split ``(W, Hbar)`` over ``[s,u]`` at the midpoint.

    ``z`` has variance ``width/16`` and ``n`` variance ``width/12``.
    """
    d = _col(width)
    w_st = 0.5 * ysu.w + 1.5 / d * ysu.hbar + z
    h_common = 0.125 * ysu.hbar - 0.25 * d * z
    h_split = 0.25 * d * n
    left = RescaledTriple(w_st, h_common + h_split)
    right = RescaledTriple(ysu.w - w_st, h_common - h_split)
    return left, right


def midpoint_wh(s, u, ysu: RescaledTriple, seed):
    """Seeded midpoint split of ``(W, Hbar)``; returns triples over both halves."""
    _check_width(s, u)
    width = np.asarray(u, dtype=np.float64) - np.asarray(s, dtype=np.float64)
    k_z, k_n = split_seed(seed, 2)
    dim = _dim(ysu.w)
    return midpoint_wh_given(width, ysu, normal(k_z, dim, width / 16.0), normal(k_n, dim, width / 12.0))


def midpoint_whk_given(width, ysu: RescaledTriple, z, x1, x2):
    """Split ``(W, Hbar, Kbar)`` over ``[s,u]`` at the midpoint.

    Draw variances are ``width/16``, ``width/768`` and ``width/2880``.
    """
    d = _col(width)
    w_st = 0.5 * ysu.w + 1.5 / d * ysu.hbar + z
    h_common = 0.125 * ysu.hbar - 0.25 * d * z
    h_split = 1.875 / d * ysu.kbar + 0.5 * d * x1
    d2 = d * d
    k_common = ysu.kbar / 32.0 - 0.125 * d2 * x1
    k_split = 0.25 * d2 * x2
    left = RescaledTriple(w_st, h_common + h_split, k_common + k_split)
    right = RescaledTriple(ysu.w - w_st, h_common - h_split, k_common - k_split)
    return left, right


def midpoint_whk(s, u, ysu: RescaledTriple, seed):
    """Seeded midpoint split of ``(W, Hbar, Kbar)``; returns triples over both halves."""
    _check_width(s, u)
    width = np.asarray(u, dtype=np.float64) - np.asarray(s, dtype=np.float64)
    k_z, k_1, k_2 = split_seed(seed, 3)
    dim = _dim(ysu.w)
    return midpoint_whk_given(
        width,
        ysu,
        normal(k_z, dim, width / 16.0),
        normal(k_1, dim, width / 768.0),
        normal(k_2, dim, width / 2880.0),
    )


# ----------------------------------------------------------- interpolation


def _fractions(s, r, u):
    """Width and the normalised positions p = (r-s)/width, q = (u-r)/width."""
    s, r, u = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64) for x in (s, r, u)))
    width = u - s
    safe = np.where(width > 0, width, 1.0)
    return width, (r - s) / safe, (u - r) / safe


def _endpoints(s, r, u, value, y_s, y_u):
    """Return stored endpoints exactly when ``r`` coincides with one."""
    r = np.asarray(r)
    at_s = r == np.asarray(s)
    at_u = r == np.asarray(u)
    if np.any(at_u):
        value = where(at_u, y_u, value)
    if np.any(at_s):
        value = where(at_s, y_s, value)
    return value


def interp_w_given(s, r, u, w_s, w_u, xi):
    width, p, q = _fractions(s, r, u)
    out = w_s + _col(p) * (w_u - w_s) + np.sqrt(_col(width * p * q)) * xi
    r = np.asarray(r)
    out = np.where(_col(r == np.asarray(u)), w_u, out)
    return np.where(_col(r == np.asarray(s)), w_s, out)


def interp_w(s, r, u, w_s, w_u, seed):
    """Brownian bridge sample at ``r`` given the values at ``s`` and ``u``."""
    _check_inside(s, r, u)
    w_s = np.asarray(w_s, dtype=np.float64)
    w_u = np.asarray(w_u, dtype=np.float64)
    return interp_w_given(s, r, u, w_s, w_u, normal(seed, _dim(w_s)))


def interp_wh_given(s, r, u, y_s, y_u, ysu, x1, x2):
    width, p, q = _fractions(s, r, u)
    d = _col(width)
    pc, qc = _col(p), _col(q)
    cubes = pc**3 + qc**3
    pq = pc * qc
    safe = np.where(d > 0, d, 1.0)
    w_sr = pc * ysu.w + 6.0 * pq * ysu.hbar / safe + np.sqrt(d * pq * cubes) * x1
    d32 = d * np.sqrt(d)
    root_cubes = np.sqrt(np.where(cubes > 0, cubes, 1.0))
    a = d32 * pc**3.5 * np.sqrt(qc) / (2.0 * root_cubes)
    c = np.sqrt(3.0) * d32 * pq**1.5 / (6.0 * root_cubes)
    h_sr = pc**3 * ysu.hbar - a * x1 + c * x2
    value = concat(0.0, s, r, y_s, RescaledTriple(w_sr, h_sr))
    return _endpoints(s, r, u, value, y_s, y_u)


def interp_wh(s, r, u, y_s: RescaledTriple, y_u: RescaledTriple, ysu: RescaledTriple, seed):
    """Single-index ``(W, Hbar)`` at ``r`` from the values at ``s``, ``u`` and between them."""
    _check_inside(s, r, u)
    k1, k2 = split_seed(seed, 2)
    dim = _dim(ysu.w)
    return interp_wh_given(s, r, u, y_s, y_u, ysu, normal(k1, dim), normal(k2, dim))


def conditional_mean_whk(s, r, u, y_su: LevyTriple) -> LevyTriple:
    """Mean of ``(W, H, K)`` over ``[s, r]`` given ``(W, H, K)`` over ``[s, u]``."""
    _check_inside(s, r, u)
    _, p, q = _fractions(s, r, u)
    return _conditional_mean(_col(p), _col(q), y_su.w, y_su.h, y_su.k)


def _conditional_mean(p, q, w, h, k):
    pq = p * q
    k_weight = -30.0 if _FAULT.get() == "flip-k-mean" else 30.0
    return LevyTriple(
        p * w + 6.0 * pq * h + 60.0 * pq * (q - p) * k,
        p * p * h + k_weight * p * p * q * k,
        p**3 * k,
    )


def normalised_cov(p, q) -> np.ndarray:
    """Conditional covariance for a unit-length interval, shape ``p.shape + (3, 3)``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    pq = p * q
    p2, q2 = p * p, q * q
    ww = pq * ((p - q) ** 4 + 4.0 * p2 * q2)
    wh = -0.5 * p**3 * q * (p2 - 3.0 * pq + 6.0 * q2)
    wk = p**4 * q * (p - q) / 12.0
    # Written with an explicit factor p*q (using p + q = 1) so entries stay
    # accurate to relative precision near both ends of the interval.
    hh = pq / 12.0 * (3.0 * p2 * p2 - 6.0 * p2 * pq + 10.0 * p2 * q2 + 5.0 * pq * q2 + q2 * q2)
    hk = -(p**5) * q / 24.0
    kk = pq / 720.0 * (5.0 * p2 * p2 + 10.0 * p2 * pq + 10.0 * p2 * q2 + 5.0 * pq * q2 + q2 * q2)
    return np.stack(
        [
            np.stack([ww, wh, wk], axis=-1),
            np.stack([wh, hh, hk], axis=-1),
            np.stack([wk, hk, kk], axis=-1),
        ],
        axis=-2,
    )


def conditional_cov_whk(s, r, u) -> np.ndarray:
    """Covariance of ``(W, H, K)`` over ``[s, r]`` given the triple over ``[s, u]``.

    Returns a ``(..., 3, 3)`` array; exactly zero when ``r`` is ``s`` or ``u``.
    """
    _check_inside(s, r, u)
    width, p, q = _fractions(s, r, u)
    return width[..., None, None] * normalised_cov(p, q)


def covariance_factor(cov, rtol: float = 1e-14) -> np.ndarray:
    """Symmetric square root ``F`` with ``F @ F.T == cov`` via a clamped eigendecomposition.

    Plain Cholesky loses accuracy as the matrix approaches rank one near the
    interval ends, so negative round-off eigenvalues are clamped instead.
    Eigenvalues more negative than ``rtol`` times the largest one raise.
    """
    cov = np.asarray(cov, dtype=np.float64)
    vals, vecs = np.linalg.eigh(cov)
    scale = np.max(np.abs(vals), axis=-1, keepdims=True)
    if np.any(vals < -rtol * scale - 1e-300):
        raise np.linalg.LinAlgError("covariance matrix is not positive semidefinite")
    root = np.sqrt(np.clip(vals, 0.0, None))
    return (vecs * root[..., None, :]) @ np.swapaxes(vecs, -1, -2)


def interp_whk_given(s, r, u, y_s, y_u, ysu, xi):
    """``xi`` holds standard normals with shape ``batch + (3, dim)`` (rows W, H, K)."""
    width, p, q = _fractions(s, r, u)
    d = _col(width)
    safe = np.where(d > 0, d, 1.0)
    pc, qc = _col(p), _col(q)
    mean = _conditional_mean(pc, qc, ysu.w, ysu.hbar / safe, ysu.kbar / (safe * safe))
    factor = covariance_factor(normalised_cov(p, q))
    noise = np.sqrt(d)[..., None, :] * np.matmul(factor, xi)
    h = _col(width * p)
    y_sr = RescaledTriple(
        mean.w + noise[..., 0, :],
        h * (mean.h + noise[..., 1, :]),
        h * h * (mean.k + noise[..., 2, :]),
    )
    value = concat(0.0, s, r, y_s, y_sr)
    return _endpoints(s, r, u, value, y_s, y_u)


def interp_whk(s, r, u, y_s: RescaledTriple, y_u: RescaledTriple, ysu: RescaledTriple, seed):
    """Single-index ``(W, Hbar, Kbar)`` at ``r`` from the values at ``s``, ``u`` and between them."""
    _check_inside(s, r, u)
    dim = _dim(ysu.w)
    xi = np.stack([normal(k, dim) for k in split_seed(seed, 3)], axis=-2)
    return interp_whk_given(s, r, u, y_s, y_u, ysu, xi)
