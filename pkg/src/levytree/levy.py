"""Brownian increments with space-time and space-time-time Lévy areas.

Two representations are used throughout:

* ``LevyTriple`` holds ``(W, H, K)`` over an interval, in the natural scaling
  where ``Var W = h``, ``Var H = h/12`` and ``Var K = h/720``.
* ``RescaledTriple`` holds ``(W, Hbar, Kbar) = (W, h H, h^2 K)``.  These
  concatenate with polynomial (division-free) coefficients, which is why the
  tree works in this form.

Array fields carry a trailing dimension axis; any leading axes are batch axes.
Time arguments broadcast against the batch shape (not the dimension axis).

The private helpers ``concat`` and ``subtract`` skip validation and accept
arrays of times; the public functions validate and then call them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "LevyMode",
    "LevyTriple",
    "RescaledTriple",
    "TimeInterval",
    "bridge_value",
    "chen_combine",
    "single_index_subtract",
    "rescale",
    "unrescale",
]


class LevyMode(enum.IntEnum):
    """Which Lévy areas are generated alongside the increment."""

    NONE = 0
    SPACE_TIME = 1
    SPACE_TIME_TIME = 2

    @classmethod
    def parse(cls, value) -> "LevyMode":
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            return cls(int(value))
        if isinstance(value, str):
            key = value.strip().lower().replace("_", "-")
            if key in _MODE_NAMES:
                return _MODE_NAMES[key]
        raise ValueError(f"unknown Levy mode {value!r}; expected one of none, st, stt")

    @property
    def short(self) -> str:
        return ("none", "st", "stt")[self]


_MODE_NAMES = {
    "none": LevyMode.NONE,
    "w": LevyMode.NONE,
    "st": LevyMode.SPACE_TIME,
    "space-time": LevyMode.SPACE_TIME,
    "stt": LevyMode.SPACE_TIME_TIME,
    "space-time-time": LevyMode.SPACE_TIME_TIME,
}


def _as_field(x):
    return None if x is None else np.asarray(x, dtype=np.float64)


def _mode_of(h, k) -> LevyMode:
    if k is not None and h is None:
        raise ValueError("a space-time-time component requires a space-time component")
    if h is None:
        return LevyMode.NONE
    return LevyMode.SPACE_TIME if k is None else LevyMode.SPACE_TIME_TIME


@dataclass(frozen=True, eq=False)
class LevyTriple:
    """Increment ``w`` with optional space-time area ``h`` and space-time-time area ``k``."""

    w: np.ndarray
    h: np.ndarray | None = None
    k: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "w", _as_field(self.w))
        object.__setattr__(self, "h", _as_field(self.h))
        object.__setattr__(self, "k", _as_field(self.k))
        _mode_of(self.h, self.k)

    @property
    def mode(self) -> LevyMode:
        return _mode_of(self.h, self.k)

    def fields(self):
        return tuple(x for x in (self.w, self.h, self.k) if x is not None)


@dataclass(frozen=True, eq=False)
class RescaledTriple:
    """Increment with areas rescaled by the interval length: ``hbar = h H``, ``kbar = h^2 K``."""

    w: np.ndarray
    hbar: np.ndarray | None = None
    kbar: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "w", _as_field(self.w))
        object.__setattr__(self, "hbar", _as_field(self.hbar))
        object.__setattr__(self, "kbar", _as_field(self.kbar))
        _mode_of(self.hbar, self.kbar)

    @property
    def mode(self) -> LevyMode:
        return _mode_of(self.hbar, self.kbar)

    def fields(self):
        return tuple(x for x in (self.w, self.hbar, self.kbar) if x is not None)

    def map(self, fn) -> "RescaledTriple":
        """Apply ``fn`` to every populated field."""
        return RescaledTriple(
            fn(self.w),
            None if self.hbar is None else fn(self.hbar),
            None if self.kbar is None else fn(self.kbar),
        )

    @staticmethod
    def zeros(shape, dim: int, mode: LevyMode) -> "RescaledTriple":
        z = np.zeros(tuple(shape) + (dim,))
        return RescaledTriple(
            z,
            z.copy() if mode >= LevyMode.SPACE_TIME else None,
            z.copy() if mode >= LevyMode.SPACE_TIME_TIME else None,
        )


@dataclass(frozen=True)
class TimeInterval:
    """Closed interval ``[s, u]`` with ``s <= u``."""

    s: float
    u: float

    def __post_init__(self):
        if not (np.isfinite(self.s) and np.isfinite(self.u)):
            raise ValueError("interval endpoints must be finite")
        if self.s > self.u:
            raise ValueError(f"interval start {self.s} exceeds end {self.u}")

    @property
    def length(self) -> float:
        return self.u - self.s


def where(mask, a: RescaledTriple, b: RescaledTriple) -> RescaledTriple:
    """Per-batch-element selection between two triples."""
    m = np.asarray(mask)[..., None]
    return RescaledTriple(
        np.where(m, a.w, b.w),
        None if a.hbar is None else np.where(m, a.hbar, b.hbar),
        None if a.kbar is None else np.where(m, a.kbar, b.kbar),
    )


def _col(t):
    """Lift a batch-shaped time array so it broadcasts over the dimension axis."""
    return np.asarray(t, dtype=np.float64)[..., None]


def _truncate(y: RescaledTriple, mode: LevyMode | None) -> tuple[RescaledTriple, LevyMode]:
    if mode is None:
        return y, y.mode
    mode = LevyMode.parse(mode)
    if y.mode < mode:
        raise ValueError(f"triple carries {y.mode.short} components but mode {mode.short} was requested")
    return RescaledTriple(
        y.w,
        y.hbar if mode >= LevyMode.SPACE_TIME else None,
        y.kbar if mode >= LevyMode.SPACE_TIME_TIME else None,
    ), mode


def concat(s, t, u, left: RescaledTriple, right: RescaledTriple) -> RescaledTriple:
    """Chen concatenation of ``[s,t]`` and ``[t,u]`` without validation.

    Written without dividing by ``u - s`` so that ``s = t = 0`` (reattaching
    an interval to an empty prefix) is handled exactly.
    """
    s, t, u = _col(s), _col(t), _col(u)
    w = left.w + right.w
    if left.hbar is None or right.hbar is None:
        return RescaledTriple(w)
    # (u - s) times the bridge value of W at t.
    bridge = (u - s) * left.w - (t - s) * w
    hbar = left.hbar + right.hbar + 0.5 * bridge
    if left.kbar is None or right.kbar is None:
        return RescaledTriple(w, hbar)
    kbar = (
        left.kbar
        + right.kbar
        + 0.5 * (u - t) * left.hbar
        - 0.5 * (t - s) * right.hbar
        + (u + s - 2.0 * t) / 12.0 * bridge
    )
    return RescaledTriple(w, hbar, kbar)


def subtract(t, u, y_t: RescaledTriple, y_u: RescaledTriple) -> RescaledTriple:
    """Recover ``[t,u]`` from single-index triples over ``[0,t]`` and ``[0,u]``; no validation."""
    t, u = _col(t), _col(u)
    w = y_u.w - y_t.w
    if y_t.hbar is None or y_u.hbar is None:
        return RescaledTriple(w)
    bridge = u * y_t.w - t * y_u.w
    hbar = y_u.hbar - y_t.hbar - 0.5 * bridge
    if y_t.kbar is None or y_u.kbar is None:
        return RescaledTriple(w, hbar)
    kbar = (
        y_u.kbar
        - y_t.kbar
        - 0.5 * (u - t) * y_t.hbar
        + 0.5 * t * hbar
        - (u - 2.0 * t) / 12.0 * bridge
    )
    return RescaledTriple(w, hbar, kbar)


def bridge_value(s, t, u, w_st, w_su):
    """Brownian bridge ``W_{s,t} - (t-s)/(u-s) W_{s,u}``; zero on a degenerate interval."""
    s, t, u = float(s), float(t), float(u)
    if not s <= t <= u:
        raise ValueError(f"bridge time {t} outside [{s}, {u}]")
    w_st = np.asarray(w_st, dtype=np.float64)
    w_su = np.asarray(w_su, dtype=np.float64)
    if u == s:
        return np.zeros(np.broadcast_shapes(w_st.shape, w_su.shape))
    return w_st - (t - s) / (u - s) * w_su


def _check_ordered(s, t, u):
    s, t, u = (np.asarray(x, dtype=np.float64) for x in (s, t, u))
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t)) and np.all(np.isfinite(u))):
        raise ValueError("times must be finite")
    return s, t, u


def chen_combine(s, t, u, left: RescaledTriple, right: RescaledTriple, mode=None) -> RescaledTriple:
    """Combine rescaled triples over ``[s,t]`` and ``[t,u]`` into one over ``[s,u]``.

    ``mode`` defaults to the richest mode both triples support; requesting a
    richer one than they carry is an error.
    """
    s, t, u = _check_ordered(s, t, u)
    if not (np.all(s < t) and np.all(t < u)):
        raise ValueError("chen_combine needs s < t < u")
    left, m1 = _truncate(left, mode)
    right, m2 = _truncate(right, mode)
    m = min(m1, m2)
    left, _ = _truncate(left, m)
    right, _ = _truncate(right, m)
    return concat(s, t, u, left, right)


def single_index_subtract(t, u, y_t: RescaledTriple, y_u: RescaledTriple, mode=None) -> RescaledTriple:
    """Triple over ``[t,u]`` from single-index triples over ``[0,t]`` and ``[0,u]``."""
    _, t, u = _check_ordered(0.0, t, u)
    if not (np.all(0.0 <= t) and np.all(t < u)):
        raise ValueError("single_index_subtract needs 0 <= t < u")
    y_t, m1 = _truncate(y_t, mode)
    y_u, m2 = _truncate(y_u, mode)
    m = min(m1, m2)
    y_t, _ = _truncate(y_t, m)
    y_u, _ = _truncate(y_u, m)
    return subtract(t, u, y_t, y_u)


def _check_length(h):
    h = np.asarray(h, dtype=np.float64)
    if not np.all(h > 0) or not np.all(np.isfinite(h)):
        raise ValueError("interval length must be positive and finite")
    return h[..., None]


def rescale(h, ybar: RescaledTriple) -> LevyTriple:
    """Convert ``(W, Hbar, Kbar)`` over an interval of length ``h`` to ``(W, H, K)``."""
    hc = _check_length(h)
    return LevyTriple(
        ybar.w,
        None if ybar.hbar is None else ybar.hbar / hc,
        None if ybar.kbar is None else ybar.kbar / (hc * hc),
    )


def unrescale(h, y: LevyTriple) -> RescaledTriple:
    """Inverse of :func:`rescale`."""
    hc = _check_length(h)
    return RescaledTriple(
        y.w,
        None if y.h is None else y.h * hc,
        None if y.k is None else y.k * (hc * hc),
    )
