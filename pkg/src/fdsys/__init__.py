"""Solvers for coupled forward-backward functional differential systems on scenario trees."""

__version__ = "0.1.0"

from . import errors
from .exprdsl import CoefficientFn, evaluate, finite_diff, parse, to_source
from .globalsolve import GlobalConfig, build_partition, solve_global, zhang_y0_lipschitz
from .operators import (OperatorKind, OperatorTuple, TerminalSpec, apply_L, apply_M, apply_Y,
                        check_L1)
from .picard import PicardConfig, Problem, estimate_contraction, lift_map, solve_local
from .problemfile import build, load, save
from .space import (AdaptedProcess, MartingaleProcess, ScenarioTree, TimeGrid, build_tree,
                    conditional_expectation, h2_norm, martingale_from_terminal, s2_norm)
from .verify import (backward_residual, check_A1, check_A2, check_ym_lipschitz,
                     forward_residual, to_fbsde_triple)

__all__ = [
    "AdaptedProcess", "CoefficientFn", "GlobalConfig", "MartingaleProcess", "OperatorKind",
    "OperatorTuple", "PicardConfig", "Problem", "ScenarioTree", "TerminalSpec", "TimeGrid",
    "apply_L", "apply_M", "apply_Y", "backward_residual", "build", "build_partition",
    "build_tree", "check_A1", "check_A2", "check_L1", "check_ym_lipschitz",
    "conditional_expectation", "errors", "estimate_contraction", "evaluate", "finite_diff",
    "forward_residual", "h2_norm", "lift_map", "load", "martingale_from_terminal", "parse",
    "s2_norm", "save", "solve_global", "solve_local", "to_fbsde_triple", "to_source",
    "zhang_y0_lipschitz",
]
