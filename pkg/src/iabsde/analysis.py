"""Verification harnesses: ordering of solutions, the a-priori estimate and residual decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from math import lgamma
from typing import Optional

import numpy as np

from .core import SolutionPair, TerminalData, TimeGrid, _exp_weighted, _norm_sq, trapezoid_weights
from .errors import BundleMismatch, GridMismatch, TooFewIterations, ZeroRhsWithNonzeroLhs
from .generators import Future, GeneratorSpec
from .solver import CondExpConfig, PicardConfig, picard_solve


@dataclass
class ComparisonReport:
    n_nodes_checked: int
    max_violation_mean: float
    max_violation_path: float
    tolerance: float
    variant: str
    verdict: str

    @property
    def max_violation(self) -> float:
        return self.max_violation_path if self.variant == "pathwise" else self.max_violation_mean

    CSV_COLUMNS = ("n_nodes_checked", "max_violation_mean", "max_violation_path", "tolerance", "verdict")

    def row(self):
        return (self.n_nodes_checked, self.max_violation_mean, self.max_violation_path, self.tolerance, self.verdict)


def check_comparison(sol1: SolutionPair, sol2: SolutionPair, tol: float = 0.0,
                     variant: str = "pathwise") -> ComparisonReport:
    """Check ``Y^1 >= Y^2`` at every node of ``[0, T_tail]``.

    ``variant="pathwise"`` judges the largest ``(Y^2 - Y^1)+`` over (path, node);
    ``"mean"`` judges the path-averaged gap per node.
    """
    if sol1.grid != sol2.grid:
        raise GridMismatch("solutions live on different grids")
    if sol1.bundle_key != sol2.bundle_key:
        raise BundleMismatch("solutions were computed on different Brownian bundles")
    if variant not in ("pathwise", "mean"):
        raise ValueError("variant must be 'pathwise' or 'mean'")
    diff = sol2.Y.values[:, :, 0] - sol1.Y.values[:, :, 0]
    path = float(max(0.0, diff.max()))
    mean = float(max(0.0, diff.mean(axis=0).max()))
    worst = path if variant == "pathwise" else mean
    return ComparisonReport(diff.shape[1], mean, path, float(tol), variant,
                            "pass" if worst <= tol else "fail")


@dataclass
class StrictComparisonReport:
    expect: str
    y0_1: float
    y0_2: float
    gap: float
    expected_gap: Optional[float]
    tolerance: float
    verdict: str


def check_strict_comparison(spec1: GeneratorSpec, term1: TerminalData, spec2: GeneratorSpec,
                            term2: TerminalData, grid: TimeGrid, bundle=None,
                            cfg: Optional[PicardConfig] = None, ce: Optional[CondExpConfig] = None,
                            expect: str = "strict", expected_gap: Optional[float] = None,
                            tol: float = 0.0) -> StrictComparisonReport:
    """Solve both equations on common noise and judge ``gap = Y_0^1 - Y_0^2``.

    ``expect="equal"``: pass iff ``|gap| <= tol``.
    ``expect="strict"``: pass iff ``gap > 0`` and, when ``expected_gap`` is given,
    ``gap >= expected_gap - tol``.
    ``expect="exact"``: pass iff ``|gap - expected_gap| <= tol``.
    """
    s1 = picard_solve(spec1, term1, grid, bundle, cfg, ce)
    s2 = picard_solve(spec2, term2, grid, bundle, cfg, ce)
    gap = s1.y0 - s2.y0
    if expect == "equal":
        ok = abs(gap) <= tol
    elif expect == "strict":
        ok = gap > 0 and (expected_gap is None or gap >= expected_gap - tol)
    elif expect == "exact":
        ok = abs(gap - expected_gap) <= tol
    else:
        raise ValueError("expect must be 'equal', 'strict' or 'exact'")
    return StrictComparisonReport(expect, s1.y0, s2.y0, gap, expected_gap, tol, "pass" if ok else "fail")


@dataclass
class AprioriReport:
    lhs: float
    sup_y: float
    weighted_z: float
    rhs_xi: float
    rhs_eta: float
    rhs_driver: float

    @property
    def rhs(self) -> float:
        return self.rhs_xi + self.rhs_eta + self.rhs_driver

    @property
    def ratio(self) -> Optional[float]:
        return None if self.rhs == 0 else self.lhs / self.rhs

    CSV_COLUMNS = ("lhs", "rhs_xi", "rhs_eta", "rhs_driver", "ratio")

    def row(self):
        return (self.lhs, self.rhs_xi, self.rhs_eta, self.rhs_driver, self.ratio)


def apriori_diagnostic(sol: SolutionPair, terminal: TerminalData, spec: GeneratorSpec,
                       grid: TimeGrid) -> AprioriReport:
    """Both sides of the a-priori estimate, with the generator's weight ``beta``.

    ``lhs = E[sup |Y|^2 + int_0^{T_tail} e^{beta s}|Z_s|^2 ds]``; the right side
    lists ``E[sup_{s>=T} |xi_s|^2]``, ``E[int_T^{T_tail} e^{beta s}|eta_s|^2 ds]``
    and ``E[int_0^T |f(s,0,0)|^2 ds]`` (the generator at zero input, zero tail).
    """
    beta = spec.beta
    n = grid.n_steps
    t_all = grid.times
    Y, Z = sol.Y.values, sol.Z.values
    sup_y = float(np.mean(_norm_sq(Y).max(axis=1)))
    wz = float(np.mean(_exp_weighted(_norm_sq(Z), beta, t_all) @ grid.weights))
    rhs_xi = float(np.mean(_norm_sq(terminal.xi.values).max(axis=1)))
    rhs_eta = float(np.mean(_exp_weighted(_norm_sq(terminal.eta.values), beta, grid.tail_times)
                            @ trapezoid_weights(grid.tail_times)))
    d, m = terminal.d, terminal.m
    fut = Future(grid, 0, np.zeros((1, n + 1, d)), np.zeros((1, n + 1, d * m)),
                 np.zeros((1, grid.n_tail_steps + 1, d)), np.zeros((1, grid.n_tail_steps + 1, d * m)))
    f0 = spec.evaluate(fut)
    rhs_f = float(np.mean(_norm_sq(f0) @ trapezoid_weights(grid.interior_times)))
    rep = AprioriReport(sup_y + wz, sup_y, wz, rhs_xi, rhs_eta, rhs_f)
    if rep.rhs == 0 and rep.lhs > 0:
        raise ZeroRhsWithNonzeroLhs(f"zero data produced a nonzero solution (lhs={rep.lhs:.3g})")
    return rep


@dataclass
class ConvergenceReport:
    residuals: list
    ratios: list
    fitted_K: float
    bound_K: float
    eventually_decreasing: bool
    geometric: bool
    factorial: bool
    first_checked: int

    @property
    def label(self) -> str:
        if self.factorial:
            return "factorial"
        if self.geometric:
            return "geometric, not factorial"
        return "undetermined"

    CSV_COLUMNS = ("iteration", "residual", "ratio")

    def rows(self):
        out = []
        for i, r in enumerate(self.residuals):
            out.append((i + 1, r, self.ratios[i] if i < len(self.ratios) else float("nan")))
        return out


def convergence_report(history, grid: TimeGrid, L_mass: float, from_iteration: int = 3,
                       use: str = "y") -> ConvergenceReport:
    """Shape of the residual decay ``res_n``.

    Fits ``log res_n + log n! = a + n log K`` by least squares, and checks that
    the ratios ``res_{n+1}/res_n`` are strictly decreasing from ``from_iteration``
    on.  Geometric: all ratios within 5% of each other.  Factorial: eventually
    decreasing ratios with the last below half the first checked one.
    """
    col = 1 if use == "y" else 2
    res = [float(h[col]) for h in history]
    while res and res[-1] == 0.0:
        res.pop()
    if len(res) < 3:
        raise TooFewIterations(f"need at least 3 nonzero residuals, got {len(res)}")
    r = np.asarray(res)
    ratios = list(r[1:] / r[:-1])
    n = np.arange(1, len(r) + 1)
    lg = np.array([lgamma(k + 1) for k in n])
    slope, _ = np.polyfit(n, np.log(r) + lg, 1)
    start = max(0, from_iteration - 1)
    tail = np.asarray(ratios[start:]) if len(ratios) > start else np.asarray(ratios[-1:])
    decreasing = bool(len(tail) >= 1 and np.all(np.diff(tail) < 0))
    rr = np.asarray(ratios)
    geometric = bool(rr.max() <= 1.05 * rr.min()) if rr.min() > 0 else False
    factorial = bool(decreasing and len(tail) >= 2 and tail[-1] < 0.5 * tail[0] and not geometric)
    return ConvergenceReport(res, ratios, float(np.exp(slope)), float(grid.T * L_mass), decreasing,
                             geometric, factorial, from_iteration)
