"""Strong-order-of-convergence experiments on paired Brownian paths.

Every solver configuration in a sweep is run on the same seeds as the
reference, so per-path errors measure discretisation alone.  Paths are
processed in chunks; each chunk's vertex grid is generated once and shared by
the reference and all configurations.

Strong error follows the usual definition: the RMS over paths of the error at
each checkpoint, then the maximum over checkpoints (``sup_error``).  The
terminal RMS error (``error``) is what the slope fit uses.  Adaptive runs
report their mean step ``T / mean(accepted steps)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .levy import LevyMode, LevyTriple
from .prng import seed_batch
from .solvers import (
    CirControl,
    SdeProblem,
    Solution,
    VertexGrid,
    adaptive_solve,
    cir_die_stepper,
    euler_maruyama_step,
    fixed_step_solve,
    integrated_bm_stepper,
)
from .vbt import TreeConfig, to_levy

__all__ = [
    "SolverConfig",
    "SocRecord",
    "SocEstimate",
    "CirComparison",
    "fit_soc",
    "gbm_problem",
    "ou_problem",
    "cir_problem",
    "integrated_bm_problem",
    "sweep",
    "soc_experiment",
    "cir_experiment",
    "MODELS",
]


# ------------------------------------------------------------------ results


@dataclass(frozen=True)
class SocRecord:
    """One solver configuration's errors against the reference."""

    label: str
    stepping: str
    parameter: float
    mean_step: float
    error: float
    sup_error: float
    n_paths: int
    n_failed: int = 0


@dataclass(frozen=True)
class SocEstimate:
    """Records of one solver family plus the fitted log-log slope.

    ``slope`` is ``nan`` for exact schemes, whose errors are rounding noise.
    """

    label: str
    records: tuple[SocRecord, ...]
    slope: float
    intercept: float
    residual: float
    exact: bool = False

    @property
    def constant(self) -> float:
        """The ``C`` in ``error ~ C h^slope``."""
        return math.exp(self.intercept)


def fit_soc(mean_steps, errors) -> tuple[float, float, float]:
    """Least-squares line through ``(log h, log error)``: slope, intercept, RMS residual."""
    h = np.asarray(mean_steps, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    if h.shape != e.shape:
        raise ValueError("need one error per step size")
    usable = np.isfinite(h) & np.isfinite(e) & (h > 0) & (e > 0)
    if usable.sum() < 3:
        raise ValueError(f"a slope fit needs at least 3 usable step sizes, got {int(usable.sum())}")
    lh, le = np.log(h[usable]), np.log(e[usable])
    slope, intercept = np.polyfit(lh, le, 1)
    resid = le - (slope * lh + intercept)
    return float(slope), float(intercept), float(np.sqrt(np.mean(resid**2)))


def _estimate(label, records, exact=False, exact_tol=1e-9) -> SocEstimate:
    records = tuple(records)
    if exact or all(r.error < exact_tol for r in records):
        if len(records) < 3:
            raise ValueError("a slope fit needs at least 3 step sizes")
        return SocEstimate(label, records, math.nan, math.nan, math.nan, exact=True)
    slope, intercept, residual = fit_soc([r.mean_step for r in records], [r.error for r in records])
    return SocEstimate(label, records, slope, intercept, residual)


# ------------------------------------------------------------------- models


@dataclass(frozen=True)
class Model:
    """A test SDE, the Lévy areas its stepper needs and optionally an exact solution."""

    name: str
    problem: SdeProblem
    stepper: Callable
    exact: Callable[[LevyTriple, np.ndarray], np.ndarray] | None = None
    params: dict = field(default_factory=dict)


def gbm_problem(mu: float = 0.5, sigma: float = 1.0, x0: float = 1.0, horizon: float = 1.0) -> Model:
    """``dX = mu X dt + sigma X dW`` with ``X_t = x0 exp((mu - sigma^2/2) t + sigma W_t)``."""
    problem = SdeProblem(
        lambda x: mu * x,
        lambda x: sigma * x[..., None],
        [x0],
        horizon,
        name="gbm",
    )

    def exact(y: LevyTriple, times):
        return x0 * np.exp((mu - 0.5 * sigma**2) * times[..., None] + sigma * y.w)

    return Model("gbm", problem, euler_maruyama_step, exact, dict(mu=mu, sigma=sigma, x0=x0))


def ou_problem(theta: float = 1.0, mean: float = 0.0, sigma: float = 1.0, x0: float = 1.0, horizon: float = 1.0) -> Model:
    """``dX = theta (mean - X) dt + sigma dW``; additive noise, no exact reference used."""
    problem = SdeProblem(
        lambda x: theta * (mean - x),
        lambda x: np.full(x.shape + (1,), sigma),
        [x0],
        horizon,
        name="ou",
    )
    return Model("ou", problem, euler_maruyama_step, None, dict(theta=theta, mean=mean, sigma=sigma, x0=x0))


def cir_problem(
    a: float = 1.0, b: float = 1.0, sigma: float = 1.5, x0: float = 1.0, horizon: float = 1.0, truncate: bool | None = None
) -> Model:
    """``dX = a (b - X) dt + sigma sqrt(X) dW`` stepped by drift-implicit Euler.

    ``truncate`` defaults to on exactly when ``b - sigma^2/(4a) < 0``.
    """
    if truncate is None:
        truncate = b - sigma * sigma / (4.0 * a) < 0
    problem = SdeProblem(
        lambda x: a * (b - x),
        lambda x: sigma * np.sqrt(np.maximum(x, 0.0))[..., None],
        [x0],
        horizon,
        name="cir",
    )
    stepper = cir_die_stepper(a, b, sigma, truncate=truncate)
    return Model("cir", problem, stepper, None, dict(a=a, b=b, sigma=sigma, x0=x0, truncate=truncate))


def integrated_bm_problem(horizon: float = 1.0) -> Model:
    """``dX1 = X2 dt, dX2 = dW`` from rest, solved exactly from ``(W, H)``."""
    problem = SdeProblem(
        lambda x: np.stack([x[..., 1], np.zeros_like(x[..., 1])], axis=-1),
        lambda x: np.broadcast_to(np.array([[0.0], [1.0]]), x.shape + (1,)),
        [0.0, 0.0],
        horizon,
        name="integrated-bm",
    )

    def exact(y: LevyTriple, times):
        t = times[..., None]
        return np.concatenate([t * (0.5 * y.w + y.h), y.w], axis=-1)

    return Model("integrated-bm", problem, integrated_bm_stepper, exact, {})


MODELS = {"gbm": gbm_problem, "ou": ou_problem, "integrated-bm": integrated_bm_problem, "cir": cir_problem}


# -------------------------------------------------------------------- sweeps


@dataclass(frozen=True)
class SolverConfig:
    """One configuration of a sweep; ``run`` solves every path of a grid."""

    label: str
    stepping: str
    parameter: float
    run: Callable[[VertexGrid, np.ndarray], Solution]


def constant_config(label, model: Model, step: float) -> SolverConfig:
    def run(grid, checkpoints):
        return fixed_step_solve(model.problem, model.stepper, grid, step, checkpoints=checkpoints)

    return SolverConfig(label, "constant", step, run)


def adaptive_config(label, model: Model, control, parameter: float) -> SolverConfig:
    def run(grid, checkpoints):
        return adaptive_solve(model.problem, model.stepper, control, grid, checkpoints=checkpoints, strict=False, record=False)

    return SolverConfig(label, "adaptive", parameter, run)


def exact_reference(model: Model):
    """Reference from the model's closed form evaluated on the same path."""
    if model.exact is None:
        raise ValueError(f"model {model.name!r} has no exact solution")

    def reference(grid: VertexGrid, checkpoints):
        k = grid.index(checkpoints)
        ybar = grid.values.map(lambda a: a[:, k])
        y = to_levy(grid.path, np.broadcast_to(grid.rhat[k], ybar.w.shape[:-1]), ybar)
        return model.exact(y, checkpoints)

    return reference


def fine_reference(model: Model, step: float):
    """Reference from a constant-step solve with the model's own stepper."""

    def reference(grid: VertexGrid, checkpoints):
        return fixed_step_solve(model.problem, model.stepper, grid, step, checkpoints=checkpoints).at_checkpoints

    return reference


def _chunks(n, size):
    return [(start, min(n, start + size)) for start in range(0, n, size)]


def sweep(
    model: Model,
    path: TreeConfig,
    configs: Sequence[SolverConfig],
    reference,
    *,
    checkpoints=None,
    chunk: int = 25,
    threads: int = 1,
) -> list[SocRecord]:
    """Errors of every configuration against ``reference`` on the paths of ``path``.

    ``reference(grid, checkpoints)`` returns states of shape
    ``(paths, checkpoints, e)``.  Chunks of ``chunk`` paths can run on
    ``threads`` worker threads; results are combined in path order so the
    output does not depend on scheduling.
    """
    horizon = model.problem.horizon
    cps = np.unique(np.asarray([horizon] if checkpoints is None else checkpoints, dtype=np.float64))
    seeds = path.seed.reshape(-1)

    def run_chunk(bounds):
        grid = VertexGrid(path.replace(seed=seeds[bounds[0] : bounds[1]]))
        ref = reference(grid, cps)
        out = []
        for cfg in configs:
            sol = cfg.run(grid, cps)
            ok = ~sol.failed
            sq = np.sum((sol.at_checkpoints[ok] - ref[ok]) ** 2, axis=-1)
            out.append((sq.sum(axis=0), int(ok.sum()), int(sol.n_accepted[ok].sum()), int((~ok).sum())))
        return out

    bounds = _chunks(seeds.size, chunk)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run_chunk, bounds))
    else:
        parts = [run_chunk(b) for b in bounds]

    records = []
    for j, cfg in enumerate(configs):
        sq = sum(p[j][0] for p in parts)
        n_ok = sum(p[j][1] for p in parts)
        steps = sum(p[j][2] for p in parts)
        n_failed = sum(p[j][3] for p in parts)
        rms = np.sqrt(sq / max(n_ok, 1))
        mean_step = horizon * n_ok / steps if steps else math.nan
        records.append(
            SocRecord(cfg.label, cfg.stepping, cfg.parameter, mean_step, float(rms[-1]), float(rms.max()), n_ok, n_failed)
        )
    return records


def _default_steps():
    return tuple(2.0**-k for k in range(3, 8))


def soc_experiment(
    model: str | Model = "gbm",
    *,
    n_seeds: int = 200,
    steps: Sequence[float] | None = None,
    seed: int = 0,
    chunk: int = 25,
    threads: int = 1,
    **params,
) -> SocEstimate:
    """Constant-step strong order of a model's stepper on paired paths.

    Models with a closed form use it as the reference; otherwise the
    reference is the same stepper at ``min(steps) / 32``.
    """
    if isinstance(model, str):
        if model not in MODELS or model == "cir":
            raise ValueError(f"unknown model {model!r}; choose gbm, ou or integrated-bm (cir has its own experiment)")
        model = MODELS[model](**params)
    steps = tuple(sorted(_default_steps() if steps is None else steps, reverse=True))
    if len(steps) < 3:
        raise ValueError("a slope fit needs at least 3 step sizes")
    horizon = model.problem.horizon
    ref_step = min(steps) / 32
    mode = getattr(model.stepper, "levy_mode", LevyMode.NONE)
    path = TreeConfig(0.0, horizon, ref_step, dim=model.problem.noise_dim, mode=mode, seed=seed_batch(seed, n_seeds))
    reference = exact_reference(model) if model.exact is not None else fine_reference(model, path.leaf_width)
    configs = [constant_config(model.name, model, h) for h in steps]
    records = sweep(model, path, configs, reference, checkpoints=_checkpoint_grid(horizon, max(steps)), chunk=chunk, threads=threads)
    return _estimate(model.name, records, exact=model.name == "integrated-bm")


def _checkpoint_grid(horizon, coarsest):
    n = max(1, int(round(horizon / coarsest)))
    return horizon * np.arange(1, n + 1) / n


# ---------------------------------------------------------------------- CIR


@dataclass(frozen=True)
class CirComparison:
    """Constant against adaptive drift-implicit Euler on one set of paths."""

    params: dict
    constant: SocEstimate
    adaptive: SocEstimate

    @property
    def ratio(self) -> float:
        return self.adaptive.slope / self.constant.slope


def cir_experiment(
    sigma: float = 1.5,
    *,
    a: float = 1.0,
    b: float = 1.0,
    x0: float = 1.0,
    horizon: float = 1.0,
    n_seeds: int = 200,
    steps: Sequence[float] | None = None,
    tolerances: Sequence[float] = (3e-2, 1e-2, 3e-3, 1e-3, 3e-4),
    h_min: float = 2.0**-14,
    h_max: float | None = None,
    constant: float = 1.0,
    seed: int = 0,
    chunk: int = 25,
    threads: int = 1,
) -> CirComparison:
    """Strong order of constant and state-adaptive drift-implicit Euler for CIR.

    The adaptive runs use ``h = (sqrt(C) x tol)^(2/3)`` clamped to
    ``[h_min, h_max]``.  The reference is a constant-step solve at
    ``h_min / 32`` on the same paths; that is also the tree's leaf width, so
    adaptive step ends are rounded to within half a reference step.
    """
    model = cir_problem(a, b, sigma, x0, horizon)
    steps = tuple(sorted(_default_steps() if steps is None else steps, reverse=True))
    h_max = horizon if h_max is None else h_max
    ref_step = h_min / 32
    if min(steps) < 32 * ref_step * (1 - 1e-12):
        raise ValueError("constant steps must be at least 32 reference steps")
    path = TreeConfig(0.0, horizon, ref_step, mode="none", seed=seed_batch(seed, n_seeds))
    if not math.isclose(path.leaf_width, ref_step, rel_tol=1e-12):
        raise ValueError("h_min / 32 must be a power-of-two fraction of the horizon")
    configs = [constant_config("die-constant", model, h) for h in steps]
    configs += [
        adaptive_config("die-adaptive", model, CirControl(tol, h_min, h_max, constant), tol)
        for tol in sorted(tolerances, reverse=True)
    ]
    records = sweep(
        model,
        path,
        configs,
        fine_reference(model, ref_step),
        checkpoints=_checkpoint_grid(horizon, max(steps)),
        chunk=chunk,
        threads=threads,
    )
    params = dict(model.params, horizon=horizon, h_min=h_min, h_max=h_max, constant=constant, reference_step=ref_step)
    return CirComparison(
        params,
        _estimate("die-constant", [r for r in records if r.stepping == "constant"]),
        _estimate("die-adaptive", [r for r in records if r.stepping == "adaptive"]),
    )
