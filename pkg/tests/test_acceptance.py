"""Acceptance criteria 1 to 10, each at its stated tolerance.

Every test is marked ``acceptance(n, title)``; the terminal summary prints one
PASS/FAIL line per criterion with the measured values.
"""

import gc
import math
import time
import tracemalloc
import warnings

import numpy as np
import pytest

from levytree.bridges import conditional_cov_whk
from levytree.experiments import cir_experiment, soc_experiment
from levytree.levy import chen_combine, unrescale
from levytree.prng import seed_batch
from levytree.solvers import SdeProblem, adaptive_solve, euler_maruyama_step, exact_integrated_bm_step, PIControl, ControllerState
from levytree.validation import (
    conditional_suite,
    moment_suite,
    quadrature_rms,
    refinement_invariance_suite,
    same_leaf_linkage,
)
from levytree.vbt import SameLeafWarning, TreeConfig, eval_grid, eval_interval, eval_point

MIDPOINT_COV = np.array([
    [1 / 16, -1 / 32, 0.0],
    [-1 / 32, 13 / 768, -1 / 1536],
    [0.0, -1 / 1536, 31 / 46080],
])
MIDPOINT_CHOLESKY = np.array([
    [1 / 4, 0.0, 0.0],
    [-1 / 8, 1 / math.sqrt(768), 0.0],
    [0.0, -1 / math.sqrt(3072), 1 / math.sqrt(2880)],
])


@pytest.mark.acceptance(1, "closed-form midpoint covariance and Cholesky factor")
def test_midpoint_identity(measured):
    cov = conditional_cov_whk(0.0, 0.5, 1.0)
    chol = np.linalg.cholesky(cov)
    measured["cov_err"] = f"{np.abs(cov - MIDPOINT_COV).max():.1e}"
    measured["chol_err"] = f"{np.abs(chol - MIDPOINT_CHOLESKY).max():.1e}"
    np.testing.assert_allclose(cov, MIDPOINT_COV, rtol=0, atol=1e-12)
    np.testing.assert_allclose(chol, MIDPOINT_CHOLESKY, rtol=0, atol=1e-12)


@pytest.mark.acceptance(2, "unconditional moments over 1e5 seeds")
def test_unconditional_moments(measured):
    cfg = TreeConfig(0.0, 1.0, 2.0**-10, dim=2, mode="stt", seed=2)
    start = time.perf_counter()
    rep = moment_suite(cfg, 10**5, [0.25, 0.61, 1.0])
    elapsed = time.perf_counter() - start
    zs = [abs(s.z) for s in rep.stats if s.name.startswith(("var", "cov"))]
    measured["max|z| var/cov"] = f"{max(zs):.2f}"
    measured["failures"] = len(rep.failures)
    measured["seconds"] = f"{elapsed:.0f}"
    for r in (0.25, 0.61, 1.0):
        for label, target in (("W", r), ("H", r / 12), ("K", r / 720)):
            stat = next(s for s in rep.stats if s.name == f"var {label}[0] r={r:g}")
            assert stat.target == pytest.approx(target, rel=1e-15)
    # Every pair among (W, H, K) in every coordinate pair is covered.
    covs = [s for s in rep.stats if s.name.startswith("cov") and s.name.endswith("r=0.61")]
    assert len(covs) == 15
    assert rep.passed, rep.table()
    assert elapsed < 120


@pytest.mark.acceptance(3, "conditional law at r=0.3 and r=0.5 over 1e5 seeds")
def test_conditional_law(measured):
    # Each seed drives 200 independent coordinates; the 3% bound on the small
    # WK residual entry at r=0.3 needs about 9e6 samples.
    start = time.perf_counter()
    reports = [conditional_suite(10**5, 0.0, r, 1.0, seed=3, dim=200, chunk=5000) for r in (0.3, 0.5)]
    elapsed = time.perf_counter() - start
    for rep, r in zip(reports, (0.3, 0.5)):
        coef_z = max(abs(s.z) for s in rep.stats if s.name.startswith("coef"))
        rel = max(
            abs(s.empirical - s.target) / abs(s.target) for s in rep.stats if s.rule.startswith("rel")
        )
        measured[f"r={r} max|z| coef"] = f"{coef_z:.2f}"
        measured[f"r={r} max rel cov"] = f"{rel:.3f}"
    measured["seconds"] = f"{elapsed:.0f}"
    for rep in reports:
        assert rep.passed, rep.table()
    assert elapsed < 180


@pytest.mark.acceptance(4, "pathwise quadrature oracle for H and K")
def test_quadrature_oracle(measured):
    start = time.perf_counter()
    rms_h, _ = quadrature_rms(10, 2000, seed=4)
    target = 2.0**-10 / math.sqrt(12)
    rms_k = [quadrature_rms(d, 2000, seed=4)[1] for d in range(6, 11)]
    elapsed = time.perf_counter() - start
    measured["rms_H/target"] = f"{rms_h / target:.3f}"
    measured["rms_K depths 6..10"] = " ".join(f"{v:.2e}" for v in rms_k)
    assert 0.5 * target <= rms_h <= 2.0 * target
    assert all(a > b for a, b in zip(rms_k, rms_k[1:]))
    assert elapsed < 300


def _partition(rng, eps, cells=20):
    while True:
        cuts = np.sort(rng.uniform(0.0, 1.0, cells - 1))
        edges = np.concatenate([[0.0], cuts, [1.0]])
        if np.diff(edges).min() >= 2 * eps:
            return edges


@pytest.mark.acceptance(5, "Chen telescoping over random partitions")
def test_chen_telescoping(measured):
    eps = 2.0**-10
    rng = np.random.default_rng(5)
    worst = worst_step = 0.0
    for i in range(100):
        cfg = TreeConfig(0.0, 1.0, eps, dim=2, mode="stt", seed=1000 + i)
        edges = _partition(rng, eps)
        acc = None
        x = x0 = np.array([0.4, -0.3])
        with warnings.catch_warnings():
            warnings.simplefilter("error", SameLeafWarning)
            for lo, hi in zip(edges[:-1], edges[1:]):
                y = eval_interval(cfg, lo, hi)
                x = exact_integrated_bm_step(x, lo, hi, y)
                y = unrescale(hi - lo, y)
                acc = y if acc is None else chen_combine(0.0, lo, hi, acc, y)
        end = eval_point(cfg, 1.0)
        ref = unrescale(1.0, end)
        for a, b in zip(acc.fields(), ref.fields()):
            worst = max(worst, float(np.abs(a - b).max() / np.abs(b).max()))
        one = exact_integrated_bm_step(x0, 0.0, 1.0, end)
        worst_step = max(worst_step, float(np.abs(x - one).max() / np.abs(one).max()))
    measured["max rel chen"] = f"{worst:.1e}"
    measured["max rel stepper"] = f"{worst_step:.1e}"
    assert worst < 1e-10
    assert worst_step < 1e-10


@pytest.mark.acceptance(6, "determinism and refinement invariance")
def test_determinism_and_refinement(measured):
    def build():
        return TreeConfig(0.25, 1.75, 1e-4, dim=3, mode="stt", seed=0xDEADBEEF)

    times = np.array([1.7, 0.3, 1.1, 0.25, 0.9999])
    a, b = eval_point(build(), times), eval_point(build(), times)
    assert all(np.array_equal(x, y) for x, y in zip(a.fields(), b.fields()))
    ia, ib = eval_interval(build(), 0.4, 1.3), eval_interval(build(), 0.4, 1.3)
    assert all(np.array_equal(x, y) for x, y in zip(ia.fields(), ib.fields()))
    ga, gb = eval_grid(build().replace(tol=2.0**-8)), eval_grid(build().replace(tol=2.0**-8))
    assert all(np.array_equal(x, y) for x, y in zip(ga[1].fields(), gb[1].fields()))
    problem = SdeProblem(lambda x: 0.5 * x, lambda x: x[..., None], np.array([1.0]), 1.0)
    control = PIControl(ControllerState(h=0.25, h_min=2.0**-11, h_max=0.25, tol=0.05), order=0.5)
    path = TreeConfig(0.0, 1.0, 2.0**-12, seed=seed_batch(6, 10))
    sa = adaptive_solve(problem, euler_maruyama_step, control, path)
    sb = adaptive_solve(problem, euler_maruyama_step, control, path)
    assert all(np.array_equal(x, y) for x, y in zip(sa.states, sb.states))
    worst = 0.0
    for mode in ("none", "st", "stt"):
        for l1, l2 in ((3, 10), (0, 6), (5, 16)):
            res = refinement_invariance_suite(7, l1, l2, t0=-1.0, t1=2.0, dim=2, mode=mode)
            worst = max(worst, res.max_rel_diff)
            assert res.nondyadic_differs
    measured["max rel refinement"] = f"{worst:.1e}"
    assert worst <= 1e-15


@pytest.mark.acceptance(7, "eval_point time affine in depth, memory flat")
def test_complexity(measured):
    rng = np.random.default_rng(7)
    depths = np.arange(8, 21)
    cfgs = {int(d): TreeConfig(0.0, 1.0, 2.0**-int(d), mode="stt", seed=8) for d in depths}
    queries = rng.uniform(0.0, 1.0, 4)
    for cfg in cfgs.values():
        eval_point(cfg, 0.3)
    # Short interleaved samples, minimum per depth: scheduler noise only ever adds time.
    samples = {int(d): math.inf for d in depths}
    gc.disable()
    try:
        for _ in range(150):
            for d in rng.permutation(depths):
                start = time.perf_counter()
                for q in queries:
                    eval_point(cfgs[int(d)], q)
                samples[int(d)] = min(samples[int(d)], (time.perf_counter() - start) / queries.size)
    finally:
        gc.enable()
    t = np.array([samples[int(d)] for d in depths])
    slope, intercept = np.polyfit(depths, t, 1)
    r2 = 1 - np.sum((t - (slope * depths + intercept)) ** 2) / np.sum((t - t.mean()) ** 2)
    peaks = []
    for d in (8, 12, 16, 20):
        tracemalloc.start()
        eval_point(cfgs[d], 0.37)
        peaks.append(tracemalloc.get_traced_memory()[1])
        tracemalloc.stop()
    measured["R2"] = f"{r2:.4f}"
    measured["us/level"] = f"{slope * 1e6:.0f}"
    measured["peak bytes L=8,12,16,20"] = " ".join(map(str, peaks))
    assert slope > 0 and r2 > 0.95
    assert max(peaks) <= 1.05 * min(peaks)


@pytest.mark.acceptance(8, "same-leaf queries are deterministically linked")
def test_same_leaf_linkage(measured):
    cfg = TreeConfig(0.0, 1.0, 2.0**-4, dim=2, mode="stt", seed=9)
    res = same_leaf_linkage(cfg, 0.27, 0.3)
    measured["residual var / leaf"] = f"{res.residual_var / res.leaf_width:.1e}"
    assert res.linked and res.residual_var < 1e-6 * res.leaf_width
    # Control: in separate leaves the same regression leaves genuine Brownian noise.
    fine = TreeConfig(0.0, 1.0, 2.0**-8, dim=2, mode="stt", seed=seed_batch(9, 2000)[:, None])
    y = eval_point(fine, np.array([0.3, 0.25, 0.3125, 0.27]))
    design = np.column_stack([np.ones(2000)] + [f[:, j, i] for f in y.fields() for j in (1, 2, 3) for i in range(2)])
    coef, *_ = np.linalg.lstsq(design, y.w[:, 0, 0], rcond=None)
    assert np.var(y.w[:, 0, 0] - design @ coef) > 1e-3


@pytest.mark.acceptance(9, "strong-order harness: GBM 0.5, OU 1.0")
def test_soc_sanity(measured):
    start = time.perf_counter()
    gbm = soc_experiment("gbm", n_seeds=200)
    ou = soc_experiment("ou", n_seeds=200)
    elapsed = time.perf_counter() - start
    measured["gbm"] = f"{gbm.slope:.3f}"
    measured["ou"] = f"{ou.slope:.3f}"
    measured["seconds"] = f"{elapsed:.0f}"
    assert len(gbm.records) == len(ou.records) == 5
    assert gbm.slope == pytest.approx(0.5, abs=0.1)
    assert ou.slope == pytest.approx(1.0, abs=0.15)
    assert elapsed < 300


@pytest.mark.acceptance(10, "CIR adaptive beats constant; slope ratio >= 1.5 at sigma=2.5")
def test_cir_adaptive_vs_constant(measured):
    start = time.perf_counter()
    mild = cir_experiment(1.5, n_seeds=200, seed=0, chunk=50)
    wild = cir_experiment(2.5, n_seeds=200, seed=0, chunk=50)
    elapsed = time.perf_counter() - start
    measured["sigma=1.5 const/adapt"] = f"{mild.constant.slope:.3f}/{mild.adaptive.slope:.3f}"
    measured["sigma=2.5 const/adapt"] = f"{wild.constant.slope:.3f}/{wild.adaptive.slope:.3f}"
    measured["ratio 2.5"] = f"{wild.ratio:.2f}"
    measured["seconds"] = f"{elapsed:.0f}"
    assert all(r.n_failed == 0 for r in mild.adaptive.records + wild.adaptive.records)
    assert mild.adaptive.slope > mild.constant.slope
    assert wild.ratio >= 1.5
    assert elapsed < 900
