"""Closed-form values of linear anticipated BSDEs through the adjoint delay SDE.

For the linear generator ``int_s mu_r Y_r dr + int_s nu_r Z_r dr + l_s`` with
tail data ``(Q, P)`` the solution at ``t`` is

    Y_t = E_t[ X_T Q_T + int_t^T X_s l_s ds
               + (int_T^inf mu Q + int_T^inf nu.P) * int_t^T X_s ds ]

where ``X`` solves the infinite-delay SDE of :func:`simulate_isdde` from ``X_t = 1``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import ProcessPaths, TerminalData, TimeGrid, trapezoid_weights
from .errors import StochasticDataRejected
from .generators import GeneratorSpec, LinearModel, linear_generator, tail_mass_bound
from .solver import CondExpConfig, PicardConfig, picard_solve
from .stochastic import BrownianBundle, eval_kernel, simulate_isdde


@dataclass(frozen=True, eq=False)
class LinearInstance:
    """Linear equation data: kernels, tail data ``Q`` (scalar) and ``P`` (``1 x m``), driver ``l``.

    ``Q``, ``P`` and ``l`` are vectorised functions of time, or (for ``Q``/``P``)
    :class:`ProcessPaths` already covering the tail.  ``model.l`` is ignored;
    the driver is ``l``.
    """

    model: LinearModel
    Q: object
    P: object = None
    l: Optional[Callable] = None
    name: str = "linear"

    @property
    def m(self) -> int:
        return self.model.m

    def generator(self, grid: TimeGrid, beta=None) -> GeneratorSpec:
        return linear_generator(dataclasses.replace(self.model, l=self.l), grid, beta=beta)

    def terminal(self, grid: TimeGrid, n_paths: int = 1) -> TerminalData:
        xi = _tail_paths(self.Q, grid, 1, n_paths)
        eta = _tail_paths(self.P, grid, self.m, n_paths)
        return TerminalData(xi, eta)

    def deterministic_data(self) -> bool:
        return all(not isinstance(v, ProcessPaths) or v.deterministic_flag for v in (self.Q, self.P))

    def scaled(self, factor: float) -> "LinearInstance":
        def sc(v):
            if v is None:
                return None
            if isinstance(v, ProcessPaths):
                return ProcessPaths(v.grid, v.values * factor, v.start, v.n_paths)
            return lambda t, v=v: factor * np.asarray(v(t), dtype=float)
        return LinearInstance(self.model, sc(self.Q), sc(self.P), sc(self.l), self.name)


def _tail_paths(v, grid: TimeGrid, dim: int, n_paths: int) -> ProcessPaths:
    n = grid.n_steps
    if v is None:
        return ProcessPaths.constant(grid, 0.0, start=n, n_paths=n_paths, dim=dim)
    if isinstance(v, ProcessPaths):
        return v
    return ProcessPaths.deterministic(grid, v, start=n, n_paths=n_paths, dim=dim)


def _functional(inst: LinearInstance, grid: TimeGrid, X: np.ndarray, start: int) -> np.ndarray:
    """Per-path bracket of the closed formula for ``X`` of shape ``(rows, nodes)`` on ``[t, T]``."""
    n = grid.n_steps
    t_int = grid.interior_times[start:]
    w_int = trapezoid_weights(t_int)
    w_tail = trapezoid_weights(grid.tail_times)
    Q = _tail_paths(inst.Q, grid, 1, 1).values[:, :, 0]           # (rows_Q, tail)
    P = _tail_paths(inst.P, grid, inst.m, 1).values               # (rows_P, tail, m)
    mu_tail = eval_kernel(inst.model.mu_kernel, grid.tail_times)
    nu_tail = eval_kernel(inst.model.nu_kernel, grid.tail_times, (inst.m,))
    coupling = (mu_tail * Q) @ w_tail + np.einsum("rkm,km,k->r", P, nu_tail, w_tail)
    int_X = X @ w_int
    out = X[:, -1] * Q[:, 0] + coupling * int_X
    if inst.l is not None:
        l_int = eval_kernel(inst.l, t_int)
        out = out + (X * l_int) @ w_int
    return out


def closed_form_y0_on_bundle(inst: LinearInstance, grid: TimeGrid, bundle: Optional[BrownianBundle]):
    """``(estimate, stderr)`` of ``Y_0`` using the given Brownian paths."""
    X = simulate_isdde(inst.model.mu_kernel, inst.model.nu_kernel, grid, 0, bundle, m=inst.m)
    vals = _functional(inst, grid, X.values[:, :, 0], 0)
    if vals.shape[0] == 1:
        return float(vals[0]), 0.0
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.shape[0]))


def closed_form_y0(inst: LinearInstance, grid: TimeGrid, n_paths: int, seed: int):
    """Monte Carlo ``(estimate, stderr)`` of ``Y_0``; exact (stderr 0) when ``nu == 0``."""
    nu = eval_kernel(inst.model.nu_kernel, grid.interior_times, (inst.m,))
    bundle = None
    if np.any(nu[:-1] != 0) or not inst.deterministic_data():
        bundle = BrownianBundle(grid, n_paths, inst.m, seed)
    return closed_form_y0_on_bundle(inst, grid, bundle)


def closed_form_yt_deterministic(inst: LinearInstance, grid: TimeGrid, t_node: int) -> float:
    """Closed formula at an interior node when ``nu == 0`` and all data are deterministic."""
    nu = eval_kernel(inst.model.nu_kernel, grid.times, (inst.m,))
    if np.any(nu != 0) or not inst.deterministic_data():
        raise StochasticDataRejected("conditional evaluation needs nu == 0 and deterministic data")
    X = simulate_isdde(inst.model.mu_kernel, inst.model.nu_kernel, grid, t_node, None, m=inst.m)
    return float(_functional(inst, grid, X.values[:, :, 0], t_node)[0])


@dataclass
class DualityReport:
    instance_id: str
    picard_y0: float
    closed_y0: float
    gap: float
    picard_stderr: float
    closed_stderr: float
    budget: float
    tail_mass: float
    verdict: str

    @property
    def combined_stderr(self) -> float:
        return float(np.hypot(self.picard_stderr, self.closed_stderr))

    @property
    def threshold(self) -> float:
        return 3.0 * self.combined_stderr + self.budget

    CSV_COLUMNS = ("instance_id", "picard_y0", "closed_y0", "gap", "budget", "verdict")

    def row(self):
        return (self.instance_id, self.picard_y0, self.closed_y0, self.gap, self.budget, self.verdict)


def duality_gap(inst: LinearInstance, grid: TimeGrid, bundle: Optional[BrownianBundle],
                ce: Optional[CondExpConfig] = None, cfg: Optional[PicardConfig] = None,
                budget: Optional[float] = None, rel_tol: float = 1e-3) -> DualityReport:
    """Picard ``Y_0`` against the closed formula on common Brownian paths.

    Pass when ``gap <= 3 * combined_stderr + budget``; ``budget`` defaults to
    ``rel_tol * |closed_y0|``.
    """
    spec = inst.generator(grid)
    n_paths = 1 if bundle is None else bundle.n_paths
    sol = picard_solve(spec, inst.terminal(grid, n_paths), grid, bundle, cfg, ce)
    closed, closed_se = closed_form_y0_on_bundle(inst, grid, bundle)
    gap = abs(sol.y0 - closed)
    if budget is None:
        budget = rel_tol * abs(closed)
    report = DualityReport(inst.name, sol.y0, closed, gap, sol.y0_stderr, closed_se, float(budget),
                           tail_mass_bound(spec, grid), "")
    report.verdict = "pass" if gap <= report.threshold else "fail"
    return report


def _deterministic_skeleton(inst: LinearInstance) -> LinearInstance:
    # the Euler mean of X does not see nu, and the functional is linear in X
    zero = lambda t: np.zeros((len(t), inst.m))
    model = dataclasses.replace(inst.model, nu_kernel=zero, C_nu=0.0)
    return LinearInstance(model, inst.Q, inst.P, inst.l, inst.name)


def refinement_budget(inst: LinearInstance, grid: TimeGrid, cfg: Optional[PicardConfig] = None,
                      factor: float = 2.0) -> float:
    """``factor`` times the summed change of both sides when ``dt`` is halved.

    Only valid for deterministic data: the Picard side is then deterministic and
    the closed side's mean equals its noise-free skeleton at every ``dt``.
    """
    if not inst.deterministic_data():
        raise StochasticDataRejected("refinement budget needs deterministic data")
    fine = grid.refined(2)
    change = 0.0
    skel = _deterministic_skeleton(inst)
    vals = []
    for g in (grid, fine):
        sol = picard_solve(inst.generator(g), inst.terminal(g), g, None, cfg)
        vals.append((sol.y0, closed_form_y0_on_bundle(skel, g, None)[0]))
    change = abs(vals[0][0] - vals[1][0]) + abs(vals[0][1] - vals[1][1])
    return factor * change
