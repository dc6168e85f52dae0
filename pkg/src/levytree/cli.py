"""Command-line entry points writing CSV for offline plotting.

Every command accepts the common flags and ``--config FILE``, a flat
``key = value`` file whose keys are flag names (``n-seeds`` or ``n_seeds``).
Config values override flags, flags override defaults.  Output starts with
``# key=value`` lines echoing the resolved configuration, then a CSV table
with floats printed to 17 significant digits.

Exit codes: 0 success, 1 a validation suite failed, 2 bad configuration.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import csv
import io
import math
import sys
import warnings

import numpy as np

from . import validation
from .bridges import FAULTS, inject_fault
from .experiments import cir_experiment, soc_experiment
from .levy import LevyMode
from .prng import parse_seed, seed_batch
from .vbt import TreeConfig, dyadic_grid, eval_point

__all__ = ["main", "build_parser", "ConfigError"]

MIN_VALIDATION_SEEDS = 10_000
_NOT_ECHOED = {"config", "out", "command", "func"}


class ConfigError(ValueError):
    """Invalid flags or config file contents."""


def _float_list(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).replace(" ", "").split(",") if v]


def _mode(text):
    return LevyMode.parse(text)




def _common(parser, n_seeds):
    parser.add_argument("--config", help="flat key = value file; its values override flags")
    parser.add_argument("--seed", type=parse_seed, default=0, help="64-bit root seed (decimal or 0x hex)")
    parser.add_argument("--t0", type=float, default=0.0)
    parser.add_argument("--t1", type=float, default=1.0)
    parser.add_argument("--eps", type=float, default=2.0**-10, help="tree tolerance; leaves are at most this wide")
    parser.add_argument("--dim", type=int, default=1, help="Brownian dimension")
    parser.add_argument("--mode", type=_mode, default=LevyMode.SPACE_TIME_TIME, help="none, st or stt")
    parser.add_argument("--n-seeds", type=int, default=n_seeds, help="number of paths")
    parser.add_argument("--out", help="output file (default: standard output)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads over chunks of paths")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="levytree", description="Brownian paths with Lévy areas from a single seed.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="W, H, K over [t0, r] at query times")
    _common(p, 1)
    p.add_argument("--times", type=_float_list, help="comma-separated query times (default: the tree's vertices)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("validate", help="run the statistical suites; exit 1 on failure")
    _common(p, 100_000)
    p.add_argument("--cond-seeds", type=int, default=100_000, help="seeds for the conditional-law suite")
    p.add_argument("--cond-dim", type=int, default=200, help="independent coordinates per seed in that suite")
    p.add_argument("--inject-fault", choices=FAULTS, help="corrupt a bridge coefficient to check the suites catch it")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("cir", help="constant against adaptive drift-implicit Euler on CIR")
    _common(p, 200)
    p.add_argument("--a", type=float, default=1.0)
    p.add_argument("--b", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=1.5)
    p.add_argument("--x0", type=float, default=1.0)
    p.add_argument("--steps", type=_float_list, default=[2.0**-k for k in range(3, 8)])
    p.add_argument("--tols", type=_float_list, default=[3e-2, 1e-2, 3e-3, 1e-3, 3e-4])
    p.add_argument("--h-min", type=float, default=2.0**-14)
    p.add_argument("--h-max", type=float, default=None)
    p.add_argument("--constant", type=float, default=1.0, help="C in the local error bound")
    p.set_defaults(func=cmd_cir)

    p = sub.add_parser("soc", help="constant-step strong order on a test model")
    _common(p, 200)
    p.add_argument("--model", choices=["gbm", "ou", "integrated-bm"], default="gbm")
    p.add_argument("--steps", type=_float_list, default=[2.0**-k for k in range(3, 8)])
    p.add_argument("--mu", type=float, default=0.5, help="gbm drift")
    p.add_argument("--sigma", type=float, default=1.0, help="gbm or ou volatility")
    p.add_argument("--theta", type=float, default=1.0, help="ou mean reversion")
    p.add_argument("--x0", type=float, default=1.0)
    p.set_defaults(func=cmd_soc)
    return parser


def _read_config(path):
    text = open(path, encoding="utf-8").read()
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    cp.optionxform = str
    cp.read_string("[config]\n" + text)
    return dict(cp["config"])


def _apply_config(parser, args):
    if not args.config:
        return args
    try:
        values = _read_config(args.config)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    for key, raw in values.items():
        dest = key.strip().lstrip("-").replace("-", "_")
        if dest not in actions or dest in ("config", "help"):
            raise ConfigError(f"unknown config key {key!r} for {args.command}")
        action = actions[dest]
        try:
            value = action.type(raw) if action.type else raw
        except (ValueError, TypeError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"{key} must be one of {', '.join(map(str, action.choices))}")
        setattr(args, dest, value)
    return args


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, LevyMode):
        return value.short
    if isinstance(value, float):
        return f"{value:.17g}"
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def _header(args):
    lines = [f"# command={args.command}"]
    for key in sorted(vars(args)):
        if key in _NOT_ECHOED:
            continue
        lines.append(f"# {key.replace('_', '-')}={_fmt(getattr(args, key))}")
    return "\n".join(lines) + "\n"


def _tree(args, seed) -> TreeConfig:
    try:
        return TreeConfig(args.t0, args.t1, args.eps, dim=args.dim, mode=args.mode, seed=seed)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def _check_common(args):
    if args.n_seeds < 1:
        raise ConfigError("n-seeds must be positive")
    if args.threads < 1:
        raise ConfigError("threads must be positive")


def _table(header, rows):
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(header)
    for row in rows:
        out.writerow([_fmt(v) for v in row])
    return buf.getvalue()


# ----------------------------------------------------------------- commands


def cmd_sample(args) -> tuple[str, int]:
    _check_common(args)
    seeds = np.atleast_1d(np.asarray(args.seed, dtype=np.uint64)) if args.n_seeds == 1 else seed_batch(args.seed, args.n_seeds)
    cfg = _tree(args, seeds[:, None])
    times = np.asarray(args.times if args.times is not None else dyadic_grid(cfg), dtype=np.float64)
    if times.ndim != 1 or times.size == 0:
        raise ConfigError("need at least one query time")
    if np.any(times < cfg.t0) or np.any(times > cfg.t1) or not np.all(np.isfinite(times)):
        raise ConfigError(f"query times must lie in [{cfg.t0}, {cfg.t1}]")
    y = eval_point(cfg, times)
    header = ["path", "time"]
    cols = []
    for label, value in (("W", y.w), ("H", y.h), ("K", y.k)):
        if value is None:
            continue
        header += [f"{label}{i}" for i in range(args.dim)]
        cols.append(value)
    data = np.concatenate(cols, axis=-1)
    rows = []
    for p in range(seeds.size):
        for j, t in enumerate(times):
            rows.append([p, float(t), *map(float, data[p, j])])
    return _table(header, rows), 0


def cmd_validate(args) -> tuple[str, int]:
    _check_common(args)
    if args.n_seeds < MIN_VALIDATION_SEEDS:
        raise ConfigError(f"validation needs n-seeds >= {MIN_VALIDATION_SEEDS}")
    if args.cond_seeds < MIN_VALIDATION_SEEDS or args.cond_dim < 1:
        raise ConfigError(f"cond-seeds must be >= {MIN_VALIDATION_SEEDS} and cond-dim positive")
    cfg = _tree(args, args.seed)
    length = cfg.length
    fault = inject_fault(args.inject_fault) if args.inject_fault else contextlib.nullcontext()
    reports = []
    with fault:
        reports.append(validation.moment_suite(cfg, args.n_seeds, cfg.t0 + length * np.array([0.25, 0.61, 1.0])))
        if cfg.mode == LevyMode.SPACE_TIME_TIME:
            for frac in (0.3, 0.5):
                reports.append(
                    validation.conditional_suite(
                        args.cond_seeds, 0.0, frac, 1.0, seed=args.seed, dim=args.cond_dim, chunk=max(1, 1_000_000 // args.cond_dim)
                    )
                )
        spaced = cfg.t0 + length * np.array([0.3, 0.8])
        if validation.spacing_ok(cfg, spaced):
            reports.append(validation.nondyadic_joint_suite(cfg, args.n_seeds, spaced))
        refine = validation.refinement_invariance_suite(args.seed, 3, 10, t0=cfg.t0, t1=cfg.t1, dim=cfg.dim, mode=cfg.mode)
        ref_report = validation.MomentReport("refinement")
        ref_report.stats.append(
            validation.MomentStat("vertex values equal across depths 3 and 10", float(refine.max_rel_diff), 0.0, 0.0, 0.0, refine.passed, "exact")
        )
        reports.append(ref_report)
    body = "".join(r.to_csv() if i == 0 else r.to_csv().split("\n", 1)[1] for i, r in enumerate(reports))
    failed = [r for r in reports if not r.passed]
    for r in reports:
        print(r.table() if not r.passed else r.table().split("\n")[0], file=sys.stderr)
    if failed:
        print("FAILED suites: " + "; ".join(r.suite for r in failed), file=sys.stderr)
        for r in failed:
            for s in r.failures:
                print(f"  {r.suite}: {s.name} empirical={s.empirical:.6g} target={s.target:.6g} z={s.z:.2f}", file=sys.stderr)
    return body, 1 if failed else 0


def _records_table(estimates):
    header = ["solver", "stepping", "parameter", "mean_h", "strong_error", "sup_error", "n_paths", "n_failed"]
    rows = []
    for est in estimates:
        for r in est.records:
            rows.append([r.label, r.stepping, r.parameter, r.mean_step, r.error, r.sup_error, r.n_paths, r.n_failed])
    body = _table(header, rows)
    for est in estimates:
        if est.exact:
            body += f"# slope {est.label}=exact\n"
        else:
            body += f"# slope {est.label}={est.slope:.17g} residual={est.residual:.17g}\n"
    return body


def cmd_cir(args) -> tuple[str, int]:
    _check_common(args)
    if args.t0 != 0.0:
        raise ConfigError("cir runs on [0, t1]; set t0 = 0")
    try:
        result = cir_experiment(
            args.sigma,
            a=args.a,
            b=args.b,
            x0=args.x0,
            horizon=args.t1,
            n_seeds=args.n_seeds,
            steps=args.steps,
            tolerances=args.tols,
            h_min=args.h_min,
            h_max=args.h_max,
            constant=args.constant,
            seed=args.seed,
            threads=args.threads,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    body = _records_table([result.constant, result.adaptive])
    body += f"# slope-ratio={result.ratio:.17g}\n"
    return body, 0


def cmd_soc(args) -> tuple[str, int]:
    _check_common(args)
    if args.t0 != 0.0:
        raise ConfigError("soc runs on [0, t1]; set t0 = 0")
    params = {"horizon": args.t1}
    if args.model == "gbm":
        params.update(mu=args.mu, sigma=args.sigma, x0=args.x0)
    elif args.model == "ou":
        params.update(theta=args.theta, sigma=args.sigma, x0=args.x0)
    try:
        est = soc_experiment(args.model, n_seeds=args.n_seeds, steps=args.steps, seed=args.seed, threads=args.threads, **params)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return _records_table([est]), 0


# --------------------------------------------------------------------- main


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config(parser, args)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            body, code = args.func(args)
    except ConfigError as exc:
        print(f"levytree {args.command}: {exc}", file=sys.stderr)
        return 2
    text = _header(args) + body
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return code


if __name__ == "__main__":
    sys.exit(main())
