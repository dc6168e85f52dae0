"""SDE stepping on top of the tree: steppers, step-size control, solve loops.

States are arrays of shape ``(paths, e)``; every solve is vectorised over
paths, which are the seeds of the driving :class:`TreeConfig`.  A stepper is
any callable ``stepper(problem, x, s, t, y)`` where ``y`` is the
:class:`LevyTriple` over ``[s, t]``; its ``levy_mode`` attribute says which
areas it reads.

All Brownian data come from one tree per path, so solves with different step
sequences on the same seeds see the same path.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .levy import LevyMode, LevyTriple, RescaledTriple, subtract, where
from .vbt import TreeConfig, descend, grid_normalised, normalise, to_levy

__all__ = [
    "SdeProblem",
    "ControllerState",
    "PIControl",
    "CirControl",
    "StepSizeUnderflowError",
    "SpacingWarning",
    "Solution",
    "uses_levy",
    "euler_maruyama_step",
    "cir_die_step",
    "cir_die_stepper",
    "cir_step_controller",
    "pi_controller",
    "half_step_error",
    "adaptive_solve",
    "fixed_step_solve",
    "VertexGrid",
    "exact_integrated_bm_step",
    "exact_triple_integrated_bm_step",
]


class StepSizeUnderflowError(RuntimeError):
    """A step was rejected at the minimum step size."""


class SpacingWarning(UserWarning):
    """The solver may query the path more finely than the tree resolves."""


@dataclass(frozen=True, eq=False)
class SdeProblem:
    """``dX = f(X) dt + g(X) dW`` on ``[0, horizon]`` with ``X_0 = x0``.

    ``drift`` maps ``(..., e)`` to ``(..., e)`` and ``diffusion`` maps
    ``(..., e)`` to ``(..., e, d)``, one column per noise coordinate.
    """

    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    x0: np.ndarray
    horizon: float
    noise_dim: int = 1
    name: str = ""

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=np.float64))
        if x0.ndim != 1:
            raise ValueError("x0 must be a vector")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if int(self.noise_dim) != self.noise_dim or self.noise_dim < 1:
            raise ValueError("noise_dim must be a positive integer")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "horizon", float(self.horizon))
        g = np.asarray(self.diffusion(x0))
        if g.shape[-2:] != (x0.size, self.noise_dim):
            raise ValueError(f"diffusion returns shape {g.shape}, expected (..., {x0.size}, {self.noise_dim})")

    @property
    def state_dim(self) -> int:
        return self.x0.size


def uses_levy(mode):
    """Mark a stepper with the Lévy areas it consumes."""
    mode = LevyMode.parse(mode)

    def mark(fn):
        fn.levy_mode = mode
        return fn

    return mark


def _increment(y):
    return y.w if isinstance(y, LevyTriple) else np.asarray(y, dtype=np.float64)


def _finite(x):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite state produced by a step")
    return x


@uses_levy("none")
def euler_maruyama_step(problem: SdeProblem, x, s, t, y):
    """``x + f(x) h + g(x) w``; ``y`` may be a triple or the bare increment."""
    h = np.asarray(t, dtype=np.float64) - np.asarray(s, dtype=np.float64)
    if not np.all(h > 0):
        raise ValueError("step needs s < t")
    x = np.asarray(x, dtype=np.float64)
    w = _increment(y)
    out = x + problem.drift(x) * h[..., None] + np.einsum("...ed,...d->...e", problem.diffusion(x), w)
    return _finite(out)


def _cir_btilde(a, b, sigma, truncate):
    if not (a > 0 and sigma >= 0):
        raise ValueError("need a > 0 and sigma >= 0")
    btilde = b - sigma * sigma / (4.0 * a)
    if btilde < 0 and not truncate:
        raise ValueError(f"btilde = {btilde:g} < 0: the scheme cannot keep a positive root")
    return btilde


def _cir_root(a, btilde, sigma, x, h, w):
    A = 1.0 + 0.5 * a * h
    B = np.sqrt(x) + 0.5 * sigma * w
    C = 0.5 * a * btilde * h
    disc = B * B + 4.0 * A * C
    if btilde >= 0:
        root = np.sqrt(disc)
        # For B < 0 the conjugate form avoids cancellation in B + sqrt(disc).
        with np.errstate(divide="ignore", invalid="ignore"):
            y = np.where(B >= 0, (B + root) / (2.0 * A), 2.0 * C / (root - B))
    else:
        y = np.maximum(B + np.sqrt(np.maximum(disc, 0.0)), 0.0) / (2.0 * A)
    return y * y


def cir_die_step(a, b, sigma, x, s, t, w, *, truncate: bool = False):
    """Drift-implicit Euler step for ``dX = a(b - X) dt + sigma sqrt(X) dW`` on ``y = sqrt(x)``.

    Solves ``A y'^2 - B y' - C = 0`` with ``A = 1 + a h/2``,
    ``B = y + sigma w/2`` and ``C = a btilde h/2`` where
    ``btilde = b - sigma^2/(4a)``, and returns ``y'^2``.

    With ``btilde >= 0`` the positive root always exists.  Otherwise the step
    is rejected unless ``truncate`` is set, in which case a negative
    discriminant is clamped to zero and the root to ``max(., 0)``; that is the
    non-negative minimiser of the quadratic's residual.
    """
    btilde = _cir_btilde(a, b, sigma, truncate)
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("CIR state must be non-negative")
    h = np.asarray(t, dtype=np.float64) - np.asarray(s, dtype=np.float64)
    if not np.all(h > 0):
        raise ValueError("step needs s < t")
    return _finite(_cir_root(a, btilde, sigma, x, h, np.asarray(w, dtype=np.float64)))


def cir_die_stepper(a, b, sigma, *, truncate: bool = False):
    """Wrap :func:`cir_die_step` as a stepper for a one-dimensional state.

    Parameters are checked once here rather than on every step.
    """
    btilde = _cir_btilde(a, b, sigma, truncate)

    @uses_levy("none")
    def step(problem, x, s, t, y):
        h = np.asarray(t) - np.asarray(s)
        return _cir_root(a, btilde, sigma, x[..., 0], h, _increment(y)[..., 0])[..., None]

    step.__name__ = "cir_die"
    return step


@uses_levy("space-time")
def exact_integrated_bm_step(state, s, t, y: LevyTriple):
    """Exact step of ``dX1 = X2 dt, dX2 = dW`` using ``int_s^t W_{s,r} dr = h (W/2 + H)``."""
    state = np.asarray(state, dtype=np.float64)
    h = (np.asarray(t, dtype=np.float64) - np.asarray(s, dtype=np.float64))[..., None]
    x1, x2 = state[..., 0:1], state[..., 1:2]
    w, area = y.w[..., :1], y.h[..., :1]
    return np.concatenate([x1 + x2 * h + h * (0.5 * w + area), x2 + w], axis=-1)


@uses_levy("space-time-time")
def exact_triple_integrated_bm_step(state, s, t, y: LevyTriple):
    """Exact step of ``dX1 = X2 dt, dX2 = X3 dt, dX3 = dW``.

    Uses ``int_s^t W_{s,r} dr = h (W/2 + H)`` and
    ``int_s^t (t - r) W_{s,r} dr = h^2 (W/6 + H/2 + K)``.
    """
    state = np.asarray(state, dtype=np.float64)
    h = (np.asarray(t, dtype=np.float64) - np.asarray(s, dtype=np.float64))[..., None]
    x1, x2, x3 = state[..., 0:1], state[..., 1:2], state[..., 2:3]
    w, hh, kk = y.w[..., :1], y.h[..., :1], y.k[..., :1]
    return np.concatenate(
        [
            x1 + x2 * h + 0.5 * x3 * h * h + h * h * (w / 6.0 + 0.5 * hh + kk),
            x2 + x3 * h + h * (0.5 * w + hh),
            x3 + w,
        ],
        axis=-1,
    )


def _problem_step(fn):
    """Adapt a ``(state, s, t, y)`` exact step to the stepper signature."""

    def step(problem, x, s, t, y):
        return fn(x, s, t, y)

    step.levy_mode = fn.levy_mode
    step.__name__ = fn.__name__
    return step


integrated_bm_stepper = _problem_step(exact_integrated_bm_step)
triple_integrated_bm_stepper = _problem_step(exact_triple_integrated_bm_step)


# --------------------------------------------------------------- control


@dataclass(frozen=True)
class ControllerState:
    """Step bounds, tolerances and PI gains plus the running ``h`` and previous error."""

    h: float | np.ndarray
    h_min: float
    h_max: float
    tol: float = 1e-3
    rtol: float = 0.0
    err_prev: float | np.ndarray = 1.0
    k_p: float = 0.1
    k_i: float = 0.3
    safety: float = 0.9
    max_growth: float = 5.0
    max_shrink: float = 0.1
    err_floor: float = 1e-10

    def __post_init__(self):
        if not 0 < self.h_min <= self.h_max:
            raise ValueError("need 0 < h_min <= h_max")
        h = np.asarray(self.h)
        if np.any(h < self.h_min) or np.any(h > self.h_max):
            raise ValueError("h must lie within [h_min, h_max]")
        if not (math.isfinite(self.k_p) and math.isfinite(self.k_i)):
            raise ValueError("gains must be finite")
        if not self.tol > 0 or self.rtol < 0:
            raise ValueError("need tol > 0 and rtol >= 0")

    def replace(self, **changes) -> "ControllerState":
        return dataclasses.replace(self, **changes)


def pi_controller(err, state: ControllerState, order: float):
    """Accept flag, next step and updated state for a normalised error ``err``.

    ``h_next = h * safety * err^(-k_i/q) * (err_prev/err)^(k_p/q)`` with
    ``q = order + 1/2``, the factor limited to ``[max_shrink, max_growth]`` and
    the result clamped to ``[h_min, h_max]``.  ``err_prev`` only advances on
    acceptance.
    """
    err = np.asarray(err, dtype=np.float64)
    if np.any(err < 0):
        raise ValueError("error estimates are non-negative")
    q = order + 0.5
    e = np.maximum(err, state.err_floor)
    factor = state.safety * e ** (-state.k_i / q) * (state.err_prev / e) ** (state.k_p / q)
    factor = np.clip(factor, state.max_shrink, state.max_growth)
    h_next = np.clip(state.h * factor, state.h_min, state.h_max)
    accept = err <= 1.0
    new = state.replace(h=h_next, err_prev=np.where(accept, e, state.err_prev))
    if np.ndim(h_next) == 0:
        return bool(accept), float(h_next), new.replace(h=float(h_next), err_prev=float(new.err_prev))
    return accept, h_next, new


def cir_step_controller(x, tol: float, bounds: ControllerState, constant: float = 1.0):
    """``h = (sqrt(C) x tol)^(2/3)`` clamped to the bounds; non-positive ``x`` gives ``h_min``.

    Equating a local error of size ``h^2 / x`` with ``sqrt(C h) tol`` gives
    this rule; ``constant`` is ``C``.
    """
    x = np.asarray(x, dtype=np.float64)
    raw = np.cbrt(np.square(math.sqrt(constant) * np.maximum(x, 0.0) * tol))
    h = np.clip(raw, bounds.h_min, bounds.h_max)
    return np.where(x > 0, h, bounds.h_min)


class PIControl:
    """Half-stepping error estimate plus the PI update, per path."""

    uses_error = True

    def __init__(self, state: ControllerState, order: float):
        self.state = state
        self.order = float(order)

    @property
    def h_min(self):
        return self.state.h_min

    @property
    def query_spacing(self):
        return 0.5 * self.state.h_min

    def start(self, n):
        return self.state.replace(h=np.full(n, float(np.max(self.state.h))), err_prev=np.ones(n))

    def propose(self, x, cs):
        return cs.h

    def error(self, fine, coarse):
        num = np.sqrt(np.mean((fine - coarse) ** 2, axis=-1))
        den = self.state.tol + self.state.rtol * np.sqrt(np.mean(fine**2, axis=-1))
        return num / den

    def update(self, err, cs, active):
        accept, h_next, new = pi_controller(err, cs, self.order)
        keep = ~active
        return accept, new.replace(h=np.where(keep, cs.h, h_next), err_prev=np.where(keep, cs.err_prev, new.err_prev))


class CirControl:
    """State-based step choice for CIR; never rejects."""

    uses_error = False

    def __init__(self, tol: float, h_min: float, h_max: float, constant: float = 1.0, component: int = 0):
        self.tol = float(tol)
        self.bounds = ControllerState(h=h_min, h_min=h_min, h_max=h_max, tol=tol)
        self.constant = float(constant)
        self.component = component

    @property
    def h_min(self):
        return self.bounds.h_min

    @property
    def query_spacing(self):
        return self.bounds.h_min

    def start(self, n):
        return None

    def propose(self, x, cs):
        return cir_step_controller(x[..., self.component], self.tol, self.bounds, self.constant)


# ------------------------------------------------------------------ solves


@dataclass
class Solution:
    """Per-path trajectories and statistics of a vectorised solve."""

    times: list[np.ndarray]
    states: list[np.ndarray]
    checkpoints: np.ndarray
    at_checkpoints: np.ndarray
    n_accepted: np.ndarray
    n_rejected: np.ndarray
    failed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def final(self) -> np.ndarray:
        return self.at_checkpoints[:, -1]

    def mean_step(self, horizon: float) -> float:
        ok = ~self.failed
        return horizon / float(np.mean(self.n_accepted[ok]))


def _path_seeds(path: TreeConfig) -> np.ndarray:
    return path.seed.reshape(-1)


def _levy_between(cfg, h0, h1, y0, y1):
    return to_levy(cfg, h1 - h0, subtract(h0, h1, y0, y1))


def _subset(y: RescaledTriple, idx):
    return y.map(lambda a: a[idx])


def _assign(dst: RescaledTriple, idx, src: RescaledTriple):
    for a, b in zip(dst.fields(), src.fields()):
        a[idx] = b


def _checkpoints(problem, checkpoints):
    cps = np.array([problem.horizon] if checkpoints is None else checkpoints, dtype=np.float64)
    cps = np.unique(cps)
    if cps.size == 0 or cps[0] <= 0 or cps[-1] != problem.horizon:
        raise ValueError("checkpoints must be positive and end at the horizon")
    return cps


def _check_path(problem, stepper, path):
    mode = getattr(stepper, "levy_mode", LevyMode.NONE)
    if path.mode < mode:
        raise ValueError(f"stepper needs {mode.short} Levy areas but the path has {path.mode.short}")
    if path.dim != problem.noise_dim:
        raise ValueError("path dimension differs from the problem's noise dimension")
    if path.t0 + problem.horizon > path.t1 * (1 + 1e-15):
        raise ValueError("path interval shorter than the problem horizon")


def half_step_error(problem: SdeProblem, stepper, x, s, t, path: TreeConfig, control: PIControl | None = None):
    """One step against two half steps over ``[s, t]`` on the same path.

    Returns the two-half-step result and the error estimate: the RMS over
    state components of the difference, divided by ``control``'s tolerance
    when one is given.
    """
    from .vbt import eval_interval

    s, t = float(s), float(t)
    if not s < t:
        raise ValueError("need s < t")
    m = 0.5 * (s + t)
    x = np.asarray(x, dtype=np.float64)
    coarse = stepper(problem, x, s, t, eval_interval(path, path.t0 + s, path.t0 + t))
    y1 = eval_interval(path, path.t0 + s, path.t0 + m)
    y2 = eval_interval(path, path.t0 + m, path.t0 + t)
    fine = stepper(problem, stepper(problem, x, s, m, y1), m, t, y2)
    if control is not None:
        return fine, control.error(fine, coarse)
    return fine, np.sqrt(np.mean((fine - coarse) ** 2, axis=-1))


class VertexGrid:
    """Values of every path at every tree vertex, generated once and reused.

    Serves the same numbers as point queries at vertex times, bit for bit,
    so several solves on one batch of paths can share one grid generation.
    Adaptive solves driven by a grid round each step end to the nearest
    vertex.  Memory is ``paths * (2**depth + 1) * dim`` values per area.
    """

    def __init__(self, path: TreeConfig):
        self.path = path
        self.rhat, self.values = grid_normalised(path)
        self.cells = 2**path.depth

    @property
    def n_paths(self) -> int:
        return self.path.seed.size

    def index(self, t):
        """Vertex index of solver time ``t`` (measured from ``t0``), rounded to the nearest."""
        return np.rint(np.asarray(t) / self.path.length * self.cells).astype(np.int64)

    def snap(self, t):
        return self.index(t) * (self.path.length / self.cells)

    def query(self, idx, t):
        k = self.index(t)
        rows = idx if k.ndim == 1 else idx[:, None]
        return self.rhat[k], self.values.map(lambda a: a.reshape(-1, *a.shape[-2:])[rows, k])


class _TreeQueries:
    """Point queries straight to the tree for a batch of paths."""

    def __init__(self, path: TreeConfig):
        self.path = path
        self.seeds = _path_seeds(path)

    @property
    def n_paths(self) -> int:
        return self.seeds.size

    def snap(self, t):
        return t

    def query(self, idx, t):
        rhat = normalise(self.path, self.path.t0 + t)
        seeds = self.seeds[idx] if t.ndim == 1 else self.seeds[idx][:, None]
        return rhat, descend(self.path.replace(seed=seeds), rhat)


def adaptive_solve(
    problem: SdeProblem,
    stepper,
    control,
    path: TreeConfig | VertexGrid,
    *,
    checkpoints=None,
    strict: bool = True,
    record: bool = True,
    max_iterations: int = 10_000_000,
) -> Solution:
    """Integrate every path of ``path`` to the horizon with adaptive steps.

    ``control`` is a :class:`PIControl` (half-stepping with rejections) or a
    :class:`CirControl` (state-based, no rejections).  Steps are never shorter
    than ``h_min`` except that a step landing within ``h_min`` of the next
    checkpoint is stretched onto it.  A rejection at ``h_min`` raises
    :class:`StepSizeUnderflowError`, or with ``strict=False`` marks the path
    as failed and drops it.

    ``path`` may be a :class:`VertexGrid`; step ends (and half-step
    midpoints) are then rounded to the nearest tree vertex, which needs
    ``h_min`` of at least one leaf (two with half-stepping).
    """
    if isinstance(path, VertexGrid):
        source, cfg = path, path.path
        leaves = 2 if control.uses_error else 1
        if control.h_min < leaves * cfg.leaf_width * (1 - 1e-12):
            raise ValueError(f"grid-driven solves need h_min >= {leaves} leaf width(s)")
    else:
        source, cfg = _TreeQueries(path), path
    _check_path(problem, stepper, cfg)
    if control.query_spacing < cfg.leaf_width:
        warnings.warn(
            f"queries may be {control.query_spacing:g} apart but tree leaves are {cfg.leaf_width:g} wide; "
            "nearby queries can share a leaf and lose the Brownian joint law",
            SpacingWarning,
            stacklevel=2,
        )
    cps = _checkpoints(problem, checkpoints)
    if isinstance(source, VertexGrid) and not np.array_equal(source.snap(cps), cps):
        raise ValueError("checkpoints must be tree vertices for grid-driven solves")
    n, e = source.n_paths, problem.state_dim
    t = np.zeros(n)
    x = np.broadcast_to(problem.x0, (n, e)).copy()
    rhat_t = np.zeros(n)
    y_t = RescaledTriple.zeros((n,), cfg.dim, cfg.mode)
    cs = control.start(n)
    cp_idx = np.zeros(n, dtype=np.int64)
    at_cp = np.full((n, cps.size, e), np.nan)
    n_acc = np.zeros(n, dtype=np.int64)
    n_rej = np.zeros(n, dtype=np.int64)
    failed = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    log_t, log_x, log_ok = [], [], []
    h_min = control.h_min
    for _ in range(max_iterations):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        h = np.broadcast_to(control.propose(x, cs), (n,))[idx]
        target = cps[cp_idx[idx]]
        t_next = t[idx] + h
        t_next = source.snap(np.where(t_next >= target - h_min, target, t_next))
        t_sub, x_sub = t[idx], x[idx]
        y_prev = _subset(y_t, idx)
        h_prev = rhat_t[idx]
        if control.uses_error:
            mid = source.snap(0.5 * (t_sub + t_next))
            rhat, ys = source.query(idx, np.stack([mid, t_next], axis=-1))
            y_mid = ys.map(lambda a: a[:, 0])
            y_new = ys.map(lambda a: a[:, 1])
            r_mid, r_new = rhat[:, 0], rhat[:, 1]
            coarse = stepper(problem, x_sub, t_sub, t_next, _levy_between(cfg, h_prev, r_new, y_prev, y_new))
            half = stepper(problem, x_sub, t_sub, mid, _levy_between(cfg, h_prev, r_mid, y_prev, y_mid))
            x_new = stepper(problem, half, mid, t_next, _levy_between(cfg, r_mid, r_new, y_mid, y_new))
            err = control.error(x_new, coarse)
            full_err = np.zeros(n)
            full_err[idx] = err
            accept_full, cs = control.update(full_err, cs, active)
            accept = accept_full[idx]
        else:
            r_new, y_new = source.query(idx, t_next)
            x_new = stepper(problem, x_sub, t_sub, t_next, _levy_between(cfg, h_prev, r_new, y_prev, y_new))
            accept = np.ones(idx.size, dtype=bool)
        ok = idx[accept]
        t[ok] = t_next[accept]
        x[ok] = x_new[accept]
        rhat_t[ok] = r_new[accept]
        _assign(y_t, ok, y_new.map(lambda a: a[accept]))
        n_acc[ok] += 1
        hit = ok[t[ok] == cps[cp_idx[ok]]]
        at_cp[hit, cp_idx[hit]] = x[hit]
        cp_idx[hit] += 1
        finished = hit[cp_idx[hit] == cps.size]
        active[finished] = False
        cp_idx[finished] = cps.size - 1
        bad = idx[~accept]
        n_rej[bad] += 1
        stuck = bad[h[~accept] <= h_min]
        if stuck.size:
            if strict:
                raise StepSizeUnderflowError(
                    f"step rejected at h_min={h_min:g} on {stuck.size} path(s), e.g. path {stuck[0]} at t={t[stuck[0]]:g}"
                )
            failed[stuck] = True
            active[stuck] = False
        if record:
            log_t.append(t.copy())
            log_x.append(x.copy())
            log_ok.append(np.isin(np.arange(n), ok))
    else:
        raise RuntimeError(f"adaptive solve did not finish within {max_iterations} iterations")
    times, states = _trajectories(problem, n, log_t, log_x, log_ok) if record else ([], [])
    return Solution(times, states, cps, at_cp, n_acc, n_rej, failed)


def _trajectories(problem, n, log_t, log_x, log_ok):
    if not log_t:
        return [np.zeros(1) for _ in range(n)], [problem.x0[None].copy() for _ in range(n)]
    ts = np.stack(log_t, axis=1)
    xs = np.stack(log_x, axis=1)
    oks = np.stack(log_ok, axis=1)
    times, states = [], []
    for i in range(n):
        sel = oks[i]
        times.append(np.concatenate([[0.0], ts[i, sel]]))
        states.append(np.concatenate([problem.x0[None], xs[i, sel]]))
    return times, states


def fixed_step_solve(
    problem: SdeProblem,
    stepper,
    path: TreeConfig | VertexGrid,
    step: float,
    *,
    checkpoints=None,
    max_values: int = 8_000_000,
) -> Solution:
    """Constant-step solve on every path, vectorised over paths.

    The horizon and every checkpoint must be whole multiples of ``step``.
    Brownian data on the step grid come from the level-by-level grid
    generator when the grid consists of tree vertices and from batched point
    queries otherwise; both give identical values.  Paths are processed in
    chunks so at most about ``max_values`` path values are held at once.
    A prebuilt :class:`VertexGrid` is used as is.
    """
    grid = path if isinstance(path, VertexGrid) else None
    if grid is not None:
        path = grid.path
    _check_path(problem, stepper, path)
    if step < path.leaf_width * (1 - 1e-12):
        warnings.warn(
            f"step {step:g} is finer than the tree leaves ({path.leaf_width:g})",
            SpacingWarning,
            stacklevel=2,
        )
    cps = _checkpoints(problem, checkpoints)
    n_steps = int(round(problem.horizon / step))
    if not math.isclose(n_steps * step, problem.horizon, rel_tol=1e-12):
        raise ValueError("the horizon must be a whole number of steps")
    cp_steps = np.rint(cps / step).astype(np.int64)
    if not np.allclose(cp_steps * step, cps, rtol=1e-12, atol=0):
        raise ValueError("checkpoints must fall on the step grid")
    seeds = _path_seeds(path)
    n, e = seeds.size, problem.state_dim
    at_cp = np.empty((n, cps.size, e))
    fields = 1 + int(path.mode)
    chunk = max(1, max_values // ((n_steps + 1) * path.dim * fields))
    chunk = min(chunk, n)
    grid_depth = _grid_depth(path, problem.horizon, step, n_steps)
    if grid is not None:
        if grid_depth is None:
            raise ValueError("grid-driven constant steps must be vertex spacings of the tree")
        chunk = n
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        sub = path.replace(seed=seeds[start:stop])
        if grid is not None:
            stride = 2 ** (path.depth - grid_depth)
            rhat = grid.rhat[: n_steps * stride + 1 : stride]
            ys = grid.values.map(lambda a: a.reshape(-1, *a.shape[-2:])[:, : n_steps * stride + 1 : stride])
        elif grid_depth is not None:
            rhat, ys = grid_normalised(sub, grid_depth)
            rhat = rhat[: n_steps + 1]
            ys = ys.map(lambda a: a[:, : n_steps + 1])
        else:
            times = path.t0 + np.arange(n_steps + 1) * step
            rhat = normalise(path, times)
            ys = descend(sub.replace(seed=sub.seed[:, None]), rhat)
        incs = _levy_between(
            path, rhat[:-1], rhat[1:], ys.map(lambda a: a[:, :-1]), ys.map(lambda a: a[:, 1:])
        )
        del ys
        x = np.broadcast_to(problem.x0, (stop - start, e)).copy()
        k_cp = 0
        for k in range(n_steps):
            y = LevyTriple(*(None if a is None else a[:, k] for a in (incs.w, incs.h, incs.k)))
            s_k = np.full(stop - start, k * step)
            x = stepper(problem, x, s_k, s_k + step, y)
            while k_cp < cps.size and cp_steps[k_cp] == k + 1:
                at_cp[start:stop, k_cp] = x
                k_cp += 1
    n_acc = np.full(n, n_steps, dtype=np.int64)
    return Solution([], [], cps, at_cp, n_acc, np.zeros(n, dtype=np.int64), np.zeros(n, dtype=bool))


def _grid_depth(path, horizon, step, n_steps):
    """Depth whose vertex spacing equals ``step``, if the step grid is a vertex grid."""
    ratio = path.length / step
    depth = int(round(math.log2(ratio))) if ratio >= 1 else -1
    if depth < 0 or depth > path.depth or 2.0**depth != ratio:
        return None
    return depth
