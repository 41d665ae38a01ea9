"""Numerical solution of BSDEs whose generator reads the whole future of the solution."""

__version__ = "0.1.0"

from .core import (
    ProcessPaths,
    SolutionPair,
    TerminalData,
    TimeGrid,
    discrete_sup_norm,
    make_grid,
    weighted_l2,
)
from .generators import (
    GeneratorSpec,
    LinearModel,
    check_h1_empirically,
    eval_generator,
    linear_generator,
    tail_mass_bound,
)
from .solver import CondExpConfig, PicardConfig, condexp, picard_solve, residuals
from .stochastic import BrownianBundle, simulate_brownian, simulate_controlled_sdde, simulate_isdde

__all__ = [
    "BrownianBundle", "CondExpConfig", "GeneratorSpec", "LinearModel", "PicardConfig", "ProcessPaths",
    "SolutionPair", "TerminalData", "TimeGrid", "check_h1_empirically", "condexp", "discrete_sup_norm",
    "eval_generator", "linear_generator", "make_grid", "picard_solve", "residuals", "simulate_brownian",
    "simulate_controlled_sdde", "simulate_isdde", "tail_mass_bound", "weighted_l2",
]
