"""Built-in test instances shared by the tests and the command line."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .control import ControlProblem
from .core import TerminalData, TimeGrid, make_grid
from .duality import LinearInstance
from .generators import LinearModel, constant_kernel, exponential_kernel, linear_generator


def _const(c):
    return lambda t: np.full(np.shape(t), float(c))


def d1_instance(scale: float = 1.0) -> LinearInstance:
    """``f = int_s e^{-r} Y_r dr``, ``xi = 1``; deterministic, ``Z = 0``."""
    model = LinearModel(exponential_kernel(), constant_kernel(0.0), 1.0, 0.0)
    inst = LinearInstance(model, _const(1.0), None, None, name="D1")
    return inst if scale == 1.0 else inst.scaled(scale)


def d2_pair():
    """Ordered pair ``f_j = a_j int_s e^{-r} Y_r dr`` with ``a = (1, 0.5)``, ``xi = (1, 0.5)``."""
    out = []
    for a, xi in ((1.0, 1.0), (0.5, 0.5)):
        model = LinearModel(exponential_kernel(1.0, a), constant_kernel(0.0), a, 0.0)
        out.append(LinearInstance(model, _const(xi), None, None, name=f"D2_{len(out) + 1}"))
    return tuple(out)


def s1_instance() -> LinearInstance:
    """``mu = nu = e^{-2r}``, ``l = 0.1``, ``Q = 1``, ``P = 0``, one Brownian motion.

    The declared bounds sit above the exact masses 1/2 and 1/4 so that
    trapezoid overestimates on coarse tails still pass the audit.
    """
    model = LinearModel(exponential_kernel(2.0), exponential_kernel(2.0), 0.51, 0.26)
    return LinearInstance(model, _const(1.0), None, _const(0.1), name="S1")


def _control(U, l, name):
    return ControlProblem(
        mu=lambda s, u: (0.2 + 0.3 * u) * np.exp(-np.asarray(s, dtype=float)),
        sigma=lambda s, u: np.full(np.shape(s), 0.1),
        l=l, Q=_const(1.0), U_grid=U, C=1.0,
        h=lambda s: 0.5 * np.exp(-np.asarray(s, dtype=float)), name=name)


def c1_problem() -> ControlProblem:
    """Dominant control: the reward increases in ``u`` and nothing else depends on it."""
    return _control([0.0, 1.0], lambda s, u: np.zeros(np.shape(s)), "C1")


def c2_problem() -> ControlProblem:
    """Trade-off: ``l = 0.3 (1 - u)`` pulls against the ``u``-increasing kernel."""
    return _control([0.0, 0.5, 1.0], lambda s, u: np.full(np.shape(s), 0.3 * (1.0 - u)), "C2")


@dataclass(frozen=True)
class InstanceInfo:
    name: str
    kind: str
    summary: str
    parameters: dict
    provenance: str
    build: object = field(repr=False, compare=False)
    grid: tuple = (1.0, 5.0)


REGISTRY = {
    "D1": InstanceInfo(
        "D1", "linear",
        "deterministic linear equation with kernel e^{-r}",
        {"mu": "e^{-r}", "nu": "0", "l": "0", "xi": "1", "eta": "0", "C_mu": 1.0, "C_nu": 0.0,
         "T": 1.0, "T_tail": 5.0, "d": 1, "m": 1},
        "oracle: fine-grid fixed point and ODE Y'' = e^{-t} Y", d1_instance),
    "D2": InstanceInfo(
        "D2", "linear-pair",
        "ordered deterministic pair f_j = a_j int e^{-r} Y_r dr",
        {"a": (1.0, 0.5), "xi": (1.0, 0.5), "T": 1.0, "T_tail": 5.0},
        "comparison: Y^1 >= Y^2 at every node", d2_pair),
    "S1": InstanceInfo(
        "S1", "linear",
        "stochastic adjoint with mu = nu = e^{-2r}",
        {"mu": "e^{-2r}", "nu": "e^{-2r}", "l": 0.1, "Q": 1.0, "P": 0.0, "C_mu": 0.51, "C_nu": 0.26,
         "T": 1.0, "T_tail": 5.0, "m": 1},
        "closed formula by Monte Carlo vs regression Picard", s1_instance),
    "C1": InstanceInfo(
        "C1", "control",
        "dominant control, mu = (0.2 + 0.3u) e^{-s}",
        {"U_grid": (0.0, 1.0), "mu": "(0.2+0.3u)e^{-s}", "sigma": 0.1, "l": 0.0, "Q": 1.0, "C": 1.0,
         "h": "0.5 e^{-s}", "T": 1.0, "T_tail": 5.0},
        "value equals the u = 1 solve", c1_problem),
    "C2": InstanceInfo(
        "C2", "control",
        "trade-off control with running reward 0.3(1-u)",
        {"U_grid": (0.0, 0.5, 1.0), "mu": "(0.2+0.3u)e^{-s}", "sigma": 0.1, "l": "0.3(1-u)", "Q": 1.0,
         "C": 1.0, "h": "0.5 e^{-s}", "T": 1.0, "T_tail": 5.0},
        "value dominates every constant control", c2_problem),
}


def list_instances() -> str:
    """Stable text listing of the registry."""
    lines = []
    for name in sorted(REGISTRY):
        info = REGISTRY[name]
        params = ", ".join(f"{k}={v}" for k, v in info.parameters.items())
        lines.append(f"{name} [{info.kind}] {info.summary}")
        lines.append(f"    parameters: {params}")
        lines.append(f"    provenance: {info.provenance}")
    return "\n".join(lines) + "\n"
