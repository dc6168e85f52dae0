"""Virtual Brownian tree with space-time and space-time-time Lévy areas.

A whole Brownian path on ``[t0, t1]``, together with its Lévy areas, is a
deterministic function of one 64-bit seed and can be queried at any times in
any order.  The solver harness drives SDE integrators from such paths.
"""

from .levy import LevyMode, LevyTriple, RescaledTriple, TimeInterval, chen_combine, rescale, unrescale
from .prng import normal, parse_seed, seed_batch, split_seed
from .solvers import (
    CirControl,
    PIControl,
    SdeProblem,
    Solution,
    StepSizeUnderflowError,
    VertexGrid,
    adaptive_solve,
    fixed_step_solve,
)
from .vbt import SameLeafWarning, TreeConfig, dyadic_grid, eval_grid, eval_interval, eval_point

__version__ = "0.1.0"

__all__ = [
    "LevyMode",
    "LevyTriple",
    "RescaledTriple",
    "TimeInterval",
    "chen_combine",
    "rescale",
    "unrescale",
    "normal",
    "parse_seed",
    "seed_batch",
    "split_seed",
    "TreeConfig",
    "SameLeafWarning",
    "eval_point",
    "eval_interval",
    "eval_grid",
    "dyadic_grid",
    "SdeProblem",
    "Solution",
    "PIControl",
    "CirControl",
    "StepSizeUnderflowError",
    "VertexGrid",
    "adaptive_solve",
    "fixed_step_solve",
]
