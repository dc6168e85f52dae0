"""Virtual Brownian tree: a whole Brownian path (with Lévy areas) from one seed.

The interval ``[t0, t1]`` is normalised to ``[0, 1]`` so every tree time is an
exact dyadic rational.  A query descends ``L`` levels of midpoint bridges,
always choosing the half that contains the query, and finishes inside the
final leaf with an interpolation.  Node values are generated top-down, so a
vertex value does not depend on the depth or on any other query.

Seeds may be arrays: a ``TreeConfig`` whose seed has shape ``S`` represents
``S`` independent paths, and queries broadcast against ``S``.  This is how the
Monte-Carlo code evaluates many paths at once.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import bridges
from .levy import LevyMode, LevyTriple, RescaledTriple, concat, subtract, where
from .prng import as_seed, normal, split_seed

__all__ = [
    "MAX_DEPTH",
    "SameLeafWarning",
    "TreeConfig",
    "eval_point",
    "eval_interval",
    "eval_normalised",
    "eval_grid",
    "grid_normalised",
    "descend",
    "normalise",
    "to_levy",
    "dyadic_grid",
]

# Beyond this the midpoints s + 2**-(l+1) stop being exact in float64
# next to s = 1 - 2**-l.
MAX_DEPTH = 52


class SameLeafWarning(UserWarning):
    """Both ends of an interval query fall strictly inside one leaf."""


@dataclass(frozen=True, eq=False)
class TreeConfig:
    """Everything that determines a path: interval, leaf tolerance, dimension, mode, seed."""

    t0: float
    t1: float
    tol: float
    dim: int = 1
    mode: LevyMode = LevyMode.SPACE_TIME_TIME
    seed: object = 0

    def __post_init__(self):
        t0, t1, tol = float(self.t0), float(self.t1), float(self.tol)
        if not (math.isfinite(t0) and math.isfinite(t1) and math.isfinite(tol)):
            raise ValueError("t0, t1 and tol must be finite")
        if not t0 < t1:
            raise ValueError(f"need t0 < t1, got [{t0}, {t1}]")
        if not 0 < tol <= t1 - t0:
            raise ValueError(f"tol must lie in (0, t1 - t0], got {tol}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim!r}")
        object.__setattr__(self, "t0", t0)
        object.__setattr__(self, "t1", t1)
        object.__setattr__(self, "tol", tol)
        object.__setattr__(self, "dim", int(self.dim))
        object.__setattr__(self, "mode", LevyMode.parse(self.mode))
        object.__setattr__(self, "seed", as_seed(self.seed))
        depth = 0
        while 2.0**-depth > tol / (t1 - t0):
            depth += 1
        if depth > MAX_DEPTH:
            raise ValueError(f"tol too small: depth {depth} exceeds {MAX_DEPTH}")
        object.__setattr__(self, "_depth", depth)

    @property
    def depth(self) -> int:
        """Number of bisection levels L, the smallest with ``(t1-t0) 2**-L <= tol``."""
        return self._depth

    @property
    def length(self) -> float:
        return self.t1 - self.t0

    @property
    def leaf_width(self) -> float:
        return self.length * 2.0**-self.depth

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.seed.shape

    def replace(self, **changes) -> "TreeConfig":
        return dataclasses.replace(self, **changes)

    def __repr__(self):
        seed = int(self.seed) if self.seed.ndim == 0 else f"array{self.seed.shape}"
        return (
            f"TreeConfig(t0={self.t0!r}, t1={self.t1!r}, tol={self.tol!r}, dim={self.dim}, "
            f"mode={self.mode.short}, seed={seed}, depth={self.depth})"
        )


def normalise(cfg: TreeConfig, r) -> np.ndarray:
    """Map query times to ``[0, 1]``, snapping round-off neighbours of vertices onto them."""
    r = np.asarray(r, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ValueError("query times must be finite")
    if np.any(r < cfg.t0) or np.any(r > cfg.t1):
        raise ValueError(f"query time outside [{cfg.t0}, {cfg.t1}]")
    rhat = (r - cfg.t0) / cfg.length
    scale = 2.0**cfg.depth
    k = np.rint(rhat * scale)
    snap = np.abs(rhat * scale - k) <= 4.0 * np.finfo(float).eps * scale
    return np.clip(np.where(snap, k / scale, rhat), 0.0, 1.0)


def _root(cfg: TreeConfig):
    """Root seed for the descent and the unit-interval triple."""
    rho, k_w, k_h, k_k = split_seed(cfg.seed, 4)
    w = normal(k_w, cfg.dim)
    h = normal(k_h, cfg.dim, 1.0 / 12.0) if cfg.mode >= LevyMode.SPACE_TIME else None
    k = normal(k_k, cfg.dim, 1.0 / 720.0) if cfg.mode >= LevyMode.SPACE_TIME_TIME else None
    return rho, RescaledTriple(w, h, k)


def _bisect(mode, s, width, y_s, y_u, y_su, seed):
    """Values at the midpoint plus the triples over both halves."""
    dim = y_su.w.shape[-1]
    t = s + 0.5 * width
    if mode == LevyMode.NONE:
        w_t = bridges.midpoint_w_given(width, y_s.w, y_u.w, normal(seed, dim))
        return RescaledTriple(w_t), RescaledTriple(w_t - y_s.w), RescaledTriple(y_u.w - w_t)
    if mode == LevyMode.SPACE_TIME:
        k_z, k_n = split_seed(seed, 2)
        left, right = bridges.midpoint_wh_given(
            width, y_su, normal(k_z, dim, width / 16.0), normal(k_n, dim, width / 12.0)
        )
    else:
        k_z, k_1, k_2 = split_seed(seed, 3)
        left, right = bridges.midpoint_whk_given(
            width,
            y_su,
            normal(k_z, dim, width / 16.0),
            normal(k_1, dim, width / 768.0),
            normal(k_2, dim, width / 2880.0),
        )
    return concat(0.0, s, t, y_s, left), left, right


def _finish(mode, s, r, u, y_s, y_u, y_su, seed):
    dim = y_su.w.shape[-1]
    if mode == LevyMode.NONE:
        return RescaledTriple(bridges.interp_w_given(s, r, u, y_s.w, y_u.w, normal(seed, dim)))
    if mode == LevyMode.SPACE_TIME:
        k1, k2 = split_seed(seed, 2)
        return bridges.interp_wh_given(s, r, u, y_s, y_u, y_su, normal(k1, dim), normal(k2, dim))
    xi = np.stack([normal(k, dim) for k in split_seed(seed, 3)], axis=-2)
    return bridges.interp_whk_given(s, r, u, y_s, y_u, y_su, xi)


def _broadcast(y: RescaledTriple, shape) -> RescaledTriple:
    return y.map(lambda a: np.broadcast_to(a, tuple(shape) + a.shape[-1:]))


def descend(cfg: TreeConfig, rhat: np.ndarray) -> RescaledTriple:
    """Single-index rescaled triple over ``[0, rhat]`` on the unit interval."""
    rho, root = _root(cfg)
    shape = np.broadcast_shapes(cfg.seed.shape, rhat.shape)
    rho = np.broadcast_to(rho, shape)
    rhat = np.broadcast_to(rhat, shape)
    y_s = RescaledTriple.zeros(shape, cfg.dim, cfg.mode)
    y_u = _broadcast(root, shape)
    y_su = y_u
    s = np.zeros(shape)
    for level in range(cfg.depth):
        width = 2.0**-level
        t = s + 0.5 * width
        rho_left, rho_right, rho_mid = split_seed(rho, 3)
        y_t, y_st, y_tu = _bisect(cfg.mode, s, width, y_s, y_u, y_su, rho_mid)
        left = rhat <= t
        rho = np.where(left, rho_left, rho_right)
        y_s = where(left, y_s, y_t)
        y_u = where(left, y_t, y_u)
        y_su = where(left, y_st, y_tu)
        s = np.where(left, s, t)
    u = s + 2.0**-cfg.depth
    return _finish(cfg.mode, s, rhat, u, y_s, y_u, y_su, rho)


def eval_normalised(cfg: TreeConfig, r) -> tuple[np.ndarray, RescaledTriple]:
    """Normalised query times and the rescaled single-index triples there.

    This is the tree's raw output before undoing the normalisation; interval
    queries subtract two of these.
    """
    rhat = normalise(cfg, r)
    return rhat, descend(cfg, rhat)


def to_levy(cfg: TreeConfig, h, ybar: RescaledTriple) -> LevyTriple:
    """Rescale by the normalised length ``h`` and undo the time normalisation."""
    h = np.asarray(h, dtype=np.float64)
    positive = h > 0
    hc = np.where(positive, h, 1.0)[..., None]
    scale = math.sqrt(cfg.length)

    def areas(x, power):
        if x is None:
            return None
        return np.where(positive[..., None], x / hc**power, 0.0) * scale

    return LevyTriple(ybar.w * scale, areas(ybar.hbar, 1), areas(ybar.kbar, 2))


def eval_point(cfg: TreeConfig, r) -> LevyTriple:
    """``(W, H, K)`` over ``[t0, r]``; ``r`` may be an array of query times.

    The result has batch shape ``broadcast(seed.shape, shape(r))`` followed by
    the dimension axis.
    """
    rhat, ybar = eval_normalised(cfg, r)
    return to_levy(cfg, rhat, ybar)


def _leaf_interior(cfg, rhat):
    scaled = rhat * 2.0**cfg.depth
    cell = np.floor(scaled)
    return cell, scaled != cell


def eval_interval(cfg: TreeConfig, r0, r1) -> LevyTriple:
    """``(W, H, K)`` over ``[r0, r1]`` via Chen's relation on two single-index queries."""
    r0 = np.asarray(r0, dtype=np.float64)
    r1 = np.asarray(r1, dtype=np.float64)
    if not np.all(r0 < r1):
        raise ValueError("interval query needs r0 < r1")
    h0, h1 = normalise(cfg, r0), normalise(cfg, r1)
    if not np.all(h0 < h1):
        raise ValueError("interval shorter than the time resolution of the tree")
    c0, in0 = _leaf_interior(cfg, h0)
    c1, in1 = _leaf_interior(cfg, h1)
    if np.any((c0 == c1) & in0 & in1):
        warnings.warn(
            "both interval ends lie strictly inside one leaf; the joint law of such "
            "queries is not Brownian (choose tol <= the smallest query spacing)",
            SameLeafWarning,
            stacklevel=2,
        )
    shape = np.broadcast_shapes(h0.shape, h1.shape)
    both = np.stack(np.broadcast_arrays(h0, h1))
    if cfg.seed.ndim:
        both = both.reshape((2,) + (1,) * max(cfg.seed.ndim - len(shape), 0) + shape)
    ybar = descend(cfg, both)
    first = ybar.map(lambda a: a[0])
    second = ybar.map(lambda a: a[1])
    return to_levy(cfg, h1 - h0, subtract(h0, h1, first, second))


def dyadic_grid(cfg: TreeConfig) -> np.ndarray:
    """The ``2**L + 1`` tree vertices mapped back to ``[t0, t1]``."""
    n = 2**cfg.depth
    vertices = np.arange(n + 1, dtype=np.float64) / n
    times = cfg.t0 + cfg.length * vertices
    times[-1] = cfg.t1
    return times


def _interleave(a, b, axis):
    """Merge ``a`` (n+1 entries) and ``b`` (n entries) alternately along ``axis``."""
    n = b.shape[axis]
    shape = list(a.shape)
    shape[axis] = a.shape[axis] + n
    out = np.empty(shape, dtype=a.dtype)
    idx = [slice(None)] * len(shape)
    idx[axis] = slice(0, None, 2)
    out[tuple(idx)] = a
    idx[axis] = slice(1, None, 2)
    out[tuple(idx)] = b
    return out


def grid_normalised(cfg: TreeConfig, depth: int | None = None) -> tuple[np.ndarray, RescaledTriple]:
    """Normalised vertex times and rescaled single-index triples for a whole grid.

    Fields have shape ``seed.shape + (2**depth + 1, dim)``.  Generation is
    level by level, ``O(2**depth)`` work in total.
    """
    depth = cfg.depth if depth is None else int(depth)
    if not 0 <= depth <= cfg.depth:
        raise ValueError(f"grid depth must lie in [0, {cfg.depth}]")
    rho, root = _root(cfg)
    vertices = RescaledTriple(*(
        None if a is None else np.stack([np.zeros_like(a), a], axis=-2)
        for a in (root.w, root.hbar, root.kbar)
    ))
    spans = root.map(lambda a: a[..., None, :])
    rho = rho[..., None]
    for level in range(depth):
        width = 2.0**-level
        s = np.arange(2**level, dtype=np.float64) * width
        rho_left, rho_right, rho_mid = split_seed(rho, 3)
        y_s = vertices.map(lambda a: a[..., :-1, :])
        y_u = vertices.map(lambda a: a[..., 1:, :])
        y_t, y_st, y_tu = _bisect(cfg.mode, s, width, y_s, y_u, spans, rho_mid)
        vertices = RescaledTriple(*(
            None if a is None else _interleave(a, b, -2)
            for a, b in zip((vertices.w, vertices.hbar, vertices.kbar), (y_t.w, y_t.hbar, y_t.kbar))
        ))
        spans = _merge_spans(y_st, y_tu)
        rho = _pairs(rho_left, rho_right)
    return np.arange(2**depth + 1, dtype=np.float64) / 2**depth, vertices


def eval_grid(cfg: TreeConfig, depth: int | None = None) -> tuple[np.ndarray, LevyTriple]:
    """All vertex values at once.

    Returns the grid times and the triples over ``[t0, v]`` for every vertex
    ``v``; fields have shape ``seed.shape + (2**depth + 1, dim)``.  ``depth``
    may stop short of the tree depth to get a coarser grid.  Values equal
    :func:`eval_point` at the same times bit for bit, at ``O(2**depth)`` cost
    instead of ``O(depth 2**depth)``.
    """
    grid, vertices = grid_normalised(cfg, depth)
    times = cfg.t0 + cfg.length * grid
    times[-1] = cfg.t1
    return times, to_levy(cfg, np.broadcast_to(grid, cfg.seed.shape + grid.shape), vertices)


def _pairs(a, b):
    """Interleave two equal-length arrays along the last axis."""
    return np.stack([a, b], axis=-1).reshape(a.shape[:-1] + (2 * a.shape[-1],))


def _merge_spans(left: RescaledTriple, right: RescaledTriple) -> RescaledTriple:
    def merge(a, b):
        if a is None:
            return None
        return np.stack([a, b], axis=-2).reshape(a.shape[:-2] + (2 * a.shape[-2], a.shape[-1]))

    return RescaledTriple(merge(left.w, right.w), merge(left.hbar, right.hbar), merge(left.kbar, right.kbar))
