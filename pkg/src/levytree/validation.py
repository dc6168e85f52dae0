"""Independent oracles and Monte-Carlo suites for the generator.

The oracles do not share code with the samplers:

* Every increment or rescaled area over ``[s, r]`` is a Wiener integral
  ``int phi dW`` with a polynomial kernel ``phi`` supported on ``[s, r]``, so
  exact covariances are integrals of kernel products (done with
  ``numpy.polynomial``).  Conditional laws follow by Schur complement.
* Trapezoid quadrature of the Brownian bridge on a fine grid gives pathwise
  estimates of the rescaled areas.

Suites return a :class:`MomentReport`: one row per statistic with its
empirical value, target, Monte-Carlo standard error and z-score.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial
from scipy import stats
from scipy.integrate import trapezoid

from .levy import LevyMode
from .prng import seed_batch
from .vbt import TreeConfig, dyadic_grid, eval_grid, eval_point, normalise

__all__ = [
    "Kernel",
    "kernel",
    "kernel_cov",
    "joint_cov",
    "conditional_law",
    "quadrature_oracle_H",
    "quadrature_oracle_K",
    "MomentStat",
    "MomentReport",
    "moment_suite",
    "conditional_suite",
    "nondyadic_joint_suite",
    "same_leaf_linkage",
    "refinement_invariance_suite",
    "spacing_ok",
]

DEFAULT_THRESHOLD = 4.0


# ------------------------------------------------------------------ kernels


@dataclass(frozen=True)
class Kernel:
    """Polynomial integrand ``poly`` on ``[a, b]`` of a Wiener integral."""

    a: float
    b: float
    poly: Polynomial


def kernel(kind: str, s: float, r: float) -> Kernel:
    """Kernel of ``W``, ``Hbar`` or ``Kbar`` over ``[s, r]``."""
    s, r = float(s), float(r)
    if not s <= r:
        raise ValueError("kernel interval needs s <= r")
    m = 0.5 * (s + r)
    d = r - s
    if kind == "W":
        poly = Polynomial([1.0])
    elif kind == "Hbar":
        poly = Polynomial([m, -1.0])
    elif kind == "Kbar":
        poly = Polynomial([m * r - 0.5 * r * r + d * d / 12.0, -m, 0.5])
    else:
        raise ValueError(f"unknown functional {kind!r}")
    return Kernel(s, r, poly)


def kernel_cov(k1: Kernel, k2: Kernel) -> float:
    """Exact covariance of two Wiener integrals."""
    lo, hi = max(k1.a, k2.a), min(k1.b, k2.b)
    if hi <= lo:
        return 0.0
    anti = (k1.poly * k2.poly).integ()
    return float(anti(hi) - anti(lo))


def joint_cov(kernels) -> np.ndarray:
    kernels = list(kernels)
    n = len(kernels)
    out = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            out[i, j] = out[j, i] = kernel_cov(kernels[i], kernels[j])
    return out


def _natural_scale(s, r):
    """Factors turning (W, Hbar, Kbar) over [s, r] into (W, H, K)."""
    d = r - s
    return np.array([1.0, 1.0 / d, 1.0 / d**2])


def conditional_law(s: float, r: float, u: float, given: str = "WHK"):
    """Regression matrix and residual covariance of ``(W, H, K)_{s,r}`` on the triple over ``[s,u]``.

    Returns ``(B, Sigma)`` with ``E[Y_sr | Y_su] = B @ Y_su`` in natural
    (not rescaled) units.  ``given="WH"`` conditions on ``(W, H)`` only and
    then ``B`` is 3 by 2.
    """
    if not s < r <= u:
        raise ValueError("need s < r <= u")
    kinds = ("W", "Hbar", "Kbar")
    gk = kinds[: len(given)]
    ks_r = [kernel(k, s, r) for k in kinds]
    ks_u = [kernel(k, s, u) for k in gk]
    cov = joint_cov(ks_r + ks_u)
    a = _natural_scale(s, r)
    b = _natural_scale(s, u)[: len(gk)]
    cov = cov * np.outer(np.concatenate([a, b]), np.concatenate([a, b]))
    c_rr, c_ru, c_uu = cov[:3, :3], cov[:3, 3:], cov[3:, 3:]
    coef = np.linalg.solve(c_uu, c_ru.T).T
    resid = c_rr - coef @ c_ru.T
    return coef, 0.5 * (resid + resid.T)


# --------------------------------------------------------------- quadrature


def _bridge(times, w):
    times = np.asarray(times, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if times.ndim != 1 or times.size < 4:
        raise ValueError("quadrature needs a grid of at least 4 points")
    if w.shape[-1] != times.size:
        raise ValueError("path samples must have the grid along the last axis")
    w = w - w[..., :1]
    frac = (times - times[0]) / (times[-1] - times[0])
    return times, w - frac * w[..., -1:]


def quadrature_oracle_H(times, w) -> np.ndarray:
    """Trapezoid estimate of ``Hbar`` over ``[times[0], times[-1]]``.

    ``w`` holds path values with the grid on the last axis.
    """
    times, b = _bridge(times, w)
    return trapezoid(b, times, axis=-1)


def quadrature_oracle_K(times, w) -> np.ndarray:
    """Trapezoid estimate of ``Kbar`` over ``[times[0], times[-1]]``."""
    times, b = _bridge(times, w)
    mid = 0.5 * (times[0] + times[-1])
    return trapezoid(b * (mid - times), times, axis=-1)


# ------------------------------------------------------------------ reports


@dataclass
class MomentStat:
    name: str
    empirical: float
    target: float
    se: float
    z: float
    passed: bool
    rule: str = "z"


@dataclass
class MomentReport:
    suite: str
    stats: list[MomentStat] = field(default_factory=list)
    threshold: float = DEFAULT_THRESHOLD

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.stats)

    @property
    def failures(self) -> list[MomentStat]:
        return [s for s in self.stats if not s.passed]

    def add_z(self, name, empirical, target, se):
        """Pass iff ``|z| <= threshold`` where ``z = (empirical - target) / se``."""
        z = _zscore(empirical, target, se)
        self.stats.append(
            MomentStat(name, float(empirical), float(target), float(se), z, abs(z) <= self.threshold)
        )

    def add_relative(self, name, empirical, target, se, rtol):
        """Pass iff the relative error is within ``rtol``; z is still reported."""
        z = _zscore(empirical, target, se)
        ok = abs(empirical - target) <= rtol * abs(target)
        self.stats.append(
            MomentStat(name, float(empirical), float(target), float(se), z, bool(ok), f"rel{rtol:g}")
        )

    def extend(self, other: "MomentReport"):
        self.stats.extend(other.stats)

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["suite", "statistic", "empirical", "target", "se", "z", "rule", "pass"])
        for s in self.stats:
            out.writerow([
                self.suite, s.name, f"{s.empirical:.17g}", f"{s.target:.17g}",
                f"{s.se:.17g}", f"{s.z:.17g}", s.rule, int(s.passed),
            ])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{self.suite}: {'PASS' if self.passed else 'FAIL'} ({len(self.stats)} statistics)"]
        for s in self.stats:
            flag = "ok  " if s.passed else "FAIL"
            lines.append(
                f"  {flag} {s.name:<34} emp={s.empirical:+.6e} target={s.target:+.6e} z={s.z:+.2f}"
            )
        return "\n".join(lines)


def _zscore(empirical, target, se):
    diff = float(empirical) - float(target)
    if se > 0:
        return diff / float(se)
    return 0.0 if diff == 0 else math.copysign(math.inf, diff)


def _product_stat(x, y):
    """Mean of ``x*y`` and its standard error (means are known to be zero)."""
    prod = x * y
    return prod.mean(), prod.std(ddof=1) / math.sqrt(prod.size)


# ------------------------------------------------------------------- suites


def _batch_cfg(cfg: TreeConfig, n_seeds: int) -> TreeConfig:
    root = cfg.seed if cfg.seed.ndim == 0 else cfg.seed.reshape(-1)[0]
    return cfg.replace(seed=seed_batch(root, n_seeds))


_COMPONENTS = (("W", "w"), ("H", "h"), ("K", "k"))


def moment_suite(cfg: TreeConfig, n_seeds: int, query_times, threshold=DEFAULT_THRESHOLD) -> MomentReport:
    """Variances, cross-covariances and Gaussianity of ``(W, H, K)`` over ``[t0, r]``."""
    if n_seeds < 10_000:
        raise ValueError("moment_suite needs at least 10^4 seeds")
    batch = _batch_cfg(cfg, n_seeds)
    report = MomentReport("moments", threshold=threshold)
    for r in np.atleast_1d(np.asarray(query_times, dtype=np.float64)):
        if r <= cfg.t0:
            raise ValueError("query times must exceed t0")
        y = eval_point(batch, r)
        d = r - cfg.t0
        present = [(label, getattr(y, attr)) for label, attr in _COMPONENTS if getattr(y, attr) is not None]
        targets = {"W": d, "H": d / 12.0, "K": d / 720.0}
        for label, x in present:
            for i in range(cfg.dim):
                xi = x[:, i]
                m, se = _product_stat(xi, np.ones_like(xi))
                report.add_z(f"mean {label}[{i}] r={r:g}", m, 0.0, se)
                v, se = _product_stat(xi, xi)
                report.add_z(f"var {label}[{i}] r={r:g}", v, targets[label], se)
                if xi.size >= 20:
                    report.add_z(f"skew {label}[{i}] r={r:g}", stats.skewtest(xi).statistic, 0.0, 1.0)
                    report.add_z(f"kurt {label}[{i}] r={r:g}", stats.kurtosistest(xi).statistic, 0.0, 1.0)
        for a in range(len(present)):
            for b in range(a, len(present)):
                la, xa = present[a]
                lb, xb = present[b]
                for i in range(cfg.dim):
                    for j in range(cfg.dim):
                        if (a, i) >= (b, j) or (a == b and i == j):
                            continue
                        c, se = _product_stat(xa[:, i], xb[:, j])
                        report.add_z(f"cov {la}[{i}],{lb}[{j}] r={r:g}", c, 0.0, se)
    return report


@dataclass
class _RegressionSums:
    """Sufficient statistics for a no-intercept multivariate regression."""

    xx: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    xy: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    yy: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    n: int = 0

    def add(self, x, y):
        self.xx += x.T @ x
        self.xy += x.T @ y
        self.yy += y.T @ y
        self.n += x.shape[0]


def conditional_suite(
    n_seeds: int,
    s: float,
    r: float,
    u: float,
    *,
    seed: int = 0,
    depth: int = 0,
    dim: int = 1,
    chunk: int = 250_000,
    rtol: float = 0.03,
    floor: float = 1e-4,
    threshold: float = DEFAULT_THRESHOLD,
) -> MomentReport:
    """Regress generated ``Y_{s,r}`` on ``Y_{s,u}`` and compare with the exact conditional law.

    Paths live on a tree over ``[s, u]`` of the given depth; each seed
    contributes ``dim`` independent samples.  Regression coefficients are
    z-tested.  Residual covariance entries larger than ``floor`` must match
    within ``rtol`` relative; smaller ones are z-tested.
    """
    if not s < r <= u:
        raise ValueError("conditional_suite needs s < r <= u")
    coef_t, cov_t = conditional_law(s, r, u)
    base = TreeConfig(s, u, (u - s) * 2.0**-depth, dim=dim, mode=LevyMode.SPACE_TIME_TIME)
    seeds = seed_batch(seed, n_seeds)
    sums = _RegressionSums()
    for start in range(0, n_seeds, chunk):
        cfg = base.replace(seed=seeds[start:start + chunk, None])
        y = eval_point(cfg, np.array([r, u]))
        y_r = np.stack([y.w[:, 0], y.h[:, 0], y.k[:, 0]], axis=-1).reshape(-1, 3)
        y_u = np.stack([y.w[:, 1], y.h[:, 1], y.k[:, 1]], axis=-1).reshape(-1, 3)
        sums.add(y_u, y_r)
    n = sums.n
    xx_inv = np.linalg.inv(sums.xx)
    coef = (xx_inv @ sums.xy).T
    resid = (sums.yy - sums.xy.T @ xx_inv @ sums.xy) / (n - 3)
    resid = 0.5 * (resid + resid.T)
    report = MomentReport(f"conditional s={s:g} r={r:g} u={u:g}", threshold=threshold)
    names = "WHK"
    for i in range(3):
        for j in range(3):
            se = math.sqrt(max(resid[i, i], 0.0) * xx_inv[j, j])
            report.add_z(f"coef {names[i]}_sr on {names[j]}_su", coef[i, j], coef_t[i, j], se)
    for i in range(3):
        for j in range(i, 3):
            se = math.sqrt(max(resid[i, i] * resid[j, j] + resid[i, j] ** 2, 0.0) / n)
            name = f"resid cov {names[i]}{names[j]}"
            if abs(cov_t[i, j]) > floor:
                report.add_relative(name, resid[i, j], cov_t[i, j], se, rtol)
            else:
                report.add_z(name, resid[i, j], cov_t[i, j], se)
    return report


def spacing_ok(cfg: TreeConfig, times) -> bool:
    """Every gap between consecutive query times (and ``t0``) contains a tree vertex."""
    pts = np.unique(np.concatenate([[cfg.t0], np.asarray(times, dtype=np.float64).ravel()]))
    scaled = normalise(cfg, pts) * 2.0**cfg.depth
    lo = np.ceil(scaled[:-1])
    hi = np.floor(scaled[1:])
    return bool(np.all(lo <= hi))


def nondyadic_joint_suite(cfg: TreeConfig, n_seeds: int, query_times, threshold=DEFAULT_THRESHOLD) -> MomentReport:
    """Joint covariance of ``(W, Hbar, Kbar)`` over ``[t0, q]`` for all ``q`` in the query set.

    Targets come from the kernel oracle; every covariance entry and every
    increment variance is z-tested.  Query sets whose gaps contain no tree
    vertex are refused, because the generated law is wrong there.
    """
    times = np.sort(np.asarray(query_times, dtype=np.float64).ravel())
    if not spacing_ok(cfg, times):
        raise ValueError("query set violates the spacing condition: some gap contains no tree vertex")
    batch = _batch_cfg(cfg, n_seeds)
    y = eval_point(batch.replace(seed=batch.seed[:, None]), times)
    d = times - cfg.t0
    cols, kernels, names = [], [], []
    for j, q in enumerate(times):
        cols.append(y.w[:, j])
        kernels.append(kernel("W", cfg.t0, q))
        names.append(f"W({q:g})")
        if y.h is not None:
            cols.append(y.h[:, j] * d[j])
            kernels.append(kernel("Hbar", cfg.t0, q))
            names.append(f"Hbar({q:g})")
        if y.k is not None:
            cols.append(y.k[:, j] * d[j] ** 2)
            kernels.append(kernel("Kbar", cfg.t0, q))
            names.append(f"Kbar({q:g})")
    target = joint_cov(kernels)
    report = MomentReport("nondyadic joint", threshold=threshold)
    for a in range(len(cols)):
        for b in range(a, len(cols)):
            for i in range(cfg.dim):
                c, se = _product_stat(cols[a][:, i], cols[b][:, i])
                report.add_z(f"cov {names[a]},{names[b]} [{i}]", c, target[a, b], se)
    for j in range(len(times)):
        for k in range(j + 1, len(times)):
            for i in range(cfg.dim):
                inc = y.w[:, k, i] - y.w[:, j, i]
                v, se = _product_stat(inc, inc)
                report.add_z(f"var W({times[k]:g})-W({times[j]:g}) [{i}]", v, times[k] - times[j], se)
    return report


@dataclass
class LinkageResult:
    """Outcome of regressing ``W_q`` on everything known at the leaf ends and at ``r``."""

    residual_var: float
    leaf_width: float
    coefficients: np.ndarray
    linked: bool


def same_leaf_linkage(cfg: TreeConfig, q: float, r: float, n_seeds: int = 2000, rtol: float = 1e-6) -> LinkageResult:
    """Show that two queries inside one leaf are deterministically linked.

    Regresses ``W_q`` on the triples at the leaf's two vertices and at ``r``
    (all populated components, every coordinate).  A residual variance near
    zero means ``W_q`` is an affine function of those values, which a genuine
    Brownian path does not allow.  ``linked`` is true when the residual
    variance is below ``rtol`` times the leaf width.
    """
    hq, hr = normalise(cfg, np.array([q, r])) * 2.0**cfg.depth
    cell = math.floor(hq)
    if not (cell == math.floor(hr) and hq != cell and hr != cell):
        raise ValueError("q and r must lie strictly inside the same leaf")
    v0 = cfg.t0 + cfg.leaf_width * cell
    v1 = cfg.t0 + cfg.leaf_width * (cell + 1)
    batch = _batch_cfg(cfg, n_seeds)
    y = eval_point(batch.replace(seed=batch.seed[:, None]), np.array([q, v0, v1, r]))
    target = y.w[:, 0, 0]
    regressors = [np.ones(n_seeds)]
    for field_ in y.fields():
        for j in (1, 2, 3):
            regressors.extend(field_[:, j, i] for i in range(cfg.dim))
    design = np.stack(regressors, axis=-1)
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    resid = target - design @ coef
    var = float(resid.var())
    return LinkageResult(var, cfg.leaf_width, coef, var < rtol * cfg.leaf_width)


@dataclass
class RefinementResult:
    grid_equal: bool
    max_rel_diff: float
    nondyadic_differs: bool

    @property
    def passed(self) -> bool:
        return self.grid_equal


def refinement_invariance_suite(
    seed,
    depth1: int,
    depth2: int,
    *,
    t0: float = 0.0,
    t1: float = 1.0,
    dim: int = 1,
    mode=LevyMode.SPACE_TIME_TIME,
    probe: float | None = None,
) -> RefinementResult:
    """Compare vertex values of a shallow tree with a deeper tree on the same seed.

    Vertex values must agree bit for bit.  The non-vertex ``probe`` time
    (default 30% into the interval) is expected to differ, since the leaf
    containing it changes with depth.
    """
    if not 0 <= depth1 < depth2:
        raise ValueError("need 0 <= depth1 < depth2")
    length = t1 - t0
    shallow = TreeConfig(t0, t1, length * 2.0**-depth1, dim=dim, mode=mode, seed=seed)
    deep = shallow.replace(tol=length * 2.0**-depth2)
    times = dyadic_grid(shallow)
    a, b = eval_point(shallow, times), eval_point(deep, times)
    equal = all(np.array_equal(x, y) for x, y in zip(a.fields(), b.fields()))
    rel = max(
        float(np.max(np.abs(x - y) / np.maximum(np.abs(x), 1e-300), initial=0.0))
        for x, y in zip(a.fields(), b.fields())
    )
    probe = t0 + 0.3 * length if probe is None else probe
    pa, pb = eval_point(shallow, probe), eval_point(deep, probe)
    differs = any(not np.array_equal(x, y) for x, y in zip(pa.fields(), pb.fields()))
    return RefinementResult(equal, rel, differs)


def quadrature_rms(depth: int, n_seeds: int, seed: int = 0, chunk: int = 250):
    """RMS gaps between the tree's rescaled areas over ``[0, 1]`` and their trapezoid estimates.

    Returns ``(rms_H, rms_K)``; the trapezoid uses the tree's own vertex
    values, so the comparison is path by path.
    """
    seeds = seed_batch(seed, n_seeds)
    base = TreeConfig(0.0, 1.0, 2.0**-depth, dim=1, mode=LevyMode.SPACE_TIME_TIME)
    sq_h = sq_k = 0.0
    for start in range(0, n_seeds, chunk):
        cfg = base.replace(seed=seeds[start:start + chunk])
        times, y = eval_grid(cfg)
        w = y.w[..., 0]
        sq_h += float(np.sum((y.h[:, -1, 0] - quadrature_oracle_H(times, w)) ** 2))
        sq_k += float(np.sum((y.k[:, -1, 0] - quadrature_oracle_K(times, w)) ** 2))
    return math.sqrt(sq_h / n_seeds), math.sqrt(sq_k / n_seeds)
