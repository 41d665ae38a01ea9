"""Picard iteration for anticipated BSDEs with least-squares conditional expectations.

Each Picard pass freezes the previous iterate, evaluates the generator on it
pathwise and runs one backward Euler sweep

    Z_k = E_k[Y_{k+1} dW_k] / dt,    Y_k = E_k[Y_{k+1} + dt f_k],

where ``E_k`` is either exact (deterministic data) or a polynomial regression
onto the Brownian state at ``t_k``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.special import eval_hermitenorm

from .core import ProcessPaths, SolutionPair, TerminalData, TimeGrid, _exp_weighted, trapezoid_weights
from .errors import (
    BundleMismatch,
    GridMismatch,
    InsufficientPaths,
    MaxIterExceeded,
    NonFiniteValue,
    ProjectionFailure,
    RangeMismatch,
    RankDeficiency,
    ValidationError,
)
from .generators import Future, GeneratorSpec

MODES = ("deterministic_passthrough", "polynomial_regression")
FREEZE_MODES = ("freeze_both", "freeze_y_only")


@dataclass(frozen=True)
class CondExpConfig:
    mode: str = "deterministic_passthrough"
    basis_degree: int = 2
    state_map: str = "brownian"
    rcond: float = 1e-10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"condexp mode must be one of {MODES}, got {self.mode!r}")
        if int(self.basis_degree) != self.basis_degree or self.basis_degree < 0:
            raise ValidationError(f"basis_degree must be a nonnegative integer, got {self.basis_degree}")
        if self.state_map != "brownian":
            raise ValidationError(f"unknown state_map {self.state_map!r}")


@dataclass(frozen=True)
class PicardConfig:
    """Stopping rule for the Picard loop.

    ``tol_y`` bounds the path mean of ``sup_k e^{beta t_k}|dY_k|^2`` and ``tol_z``
    the path mean of ``int_0^T e^{beta s}|dZ_s|^2 ds`` between successive iterates.
    ``beta`` weights these residuals only; the generator keeps its own weight.
    """

    tol_y: float = 1e-20
    tol_z: float = 1e-20
    max_iter: int = 50
    freeze_mode: str = "freeze_both"
    beta: float = 0.0

    def __post_init__(self):
        if not (self.tol_y > 0 and self.tol_z > 0):
            raise ValidationError("tolerances must be positive")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ValidationError(f"max_iter must be a positive integer, got {self.max_iter}")
        if self.freeze_mode not in FREEZE_MODES:
            raise ValidationError(f"freeze_mode must be one of {FREEZE_MODES}")
        if self.beta < 0:
            raise ValidationError("beta must be nonnegative")


# ---------------------------------------------------------------- regression

def _multi_indices(m: int, degree: int):
    out = [()]
    for deg in range(1, degree + 1):
        out.extend(combinations_with_replacement(range(m), deg))
    return out


def hermite_design(state: np.ndarray, degree: int) -> np.ndarray:
    """Products of probabilists' Hermite polynomials of total degree ``<= degree``.

    ``state`` is ``(paths, m)``; returns ``(paths, n_basis)`` with the constant first.
    """
    P, m = state.shape
    he = [[eval_hermitenorm(p, state[:, j]) for p in range(degree + 1)] for j in range(m)]
    cols = []
    for idx in _multi_indices(m, degree):
        col = np.ones(P)
        for j in range(m):
            p = idx.count(j)
            if p:
                col = col * he[j][p]
        cols.append(col)
    return np.stack(cols, axis=1)


class Projector:
    """Conditional expectations ``E[. | F_{t_k}]`` on a fixed Brownian bundle.

    In regression mode the time-``k`` state is ``W_{t_k} / sqrt(t_k)`` and the
    factorised normal equations are cached per node.  Deterministic inputs
    (a single stored row) are returned unchanged, and ``E_k[c dW_k] = 0`` is
    used exactly when ``c`` is deterministic.
    """

    def __init__(self, grid: TimeGrid, bundle, ce: CondExpConfig):
        self.grid, self.bundle, self.ce = grid, bundle, ce
        self._factors = {}
        self.reductions = {}  # node -> degree actually used, when reduced

    @property
    def n_paths(self) -> int:
        return 1 if self.bundle is None else self.bundle.n_paths

    def state(self, node: int) -> np.ndarray:
        t = self.grid.interior_times[node]
        return self.bundle.W[:, node] / np.sqrt(t)

    def degree_at(self, node: int) -> int:
        return 0 if node == 0 else self.ce.basis_degree

    def _factor(self, node: int):
        f = self._factors.get(node)
        if f is not None:
            return f
        P = self.n_paths
        degree = self.degree_at(node)
        m = 1 if self.bundle is None else self.bundle.m
        if P <= len(_multi_indices(m, degree)):
            raise InsufficientPaths(f"{P} paths cannot fit {len(_multi_indices(m, degree))} basis functions")
        while True:
            X = hermite_design(self.state(node), degree) if degree > 0 else np.ones((P, 1))
            G = X.T @ X / P
            ev = np.linalg.eigvalsh(G)
            if ev[0] > self.ce.rcond * ev[-1]:
                try:
                    f = (degree, cho_factor(G, lower=True))
                    break
                except LinAlgError:
                    pass
            if degree == 0:
                raise RankDeficiency(f"constant basis is singular at node {node}")
            degree -= 1
            self.reductions[node] = degree
        self._factors[node] = f
        return f

    def design(self, node: int, degree: int) -> np.ndarray:
        if degree == 0:
            return np.ones((self.n_paths, 1))
        return hermite_design(self.state(node), degree)

    def fit(self, values: np.ndarray, node: int):
        """Least-squares coefficients and fitted values for ``(paths, cols)`` targets."""
        degree, cf = self._factor(node)
        X = self.design(node, degree)
        coef = cho_solve(cf, X.T @ values / values.shape[0])
        return coef, X @ coef

    def expect(self, values: np.ndarray, node: int):
        """Project ``(rows, cols)`` values; returns ``(projected, coefficients or None)``."""
        if values.shape[0] == 1:
            return values, None
        if self.ce.mode == "deterministic_passthrough":
            if node == 0:
                return values.mean(axis=0, keepdims=True), None
            if np.all(values == values[:1]):
                return values[:1], None
            raise ProjectionFailure(
                f"passthrough projection received path-dependent values at node {node}")
        coef, fitted = self.fit(values, node)
        return fitted, coef

    def replay(self, coef, node: int) -> np.ndarray:
        # the basis size stored in coef fixes the degree used by the original fit
        m = self.bundle.m
        degree = next(p for p in range(self.ce.basis_degree + 1)
                      if len(_multi_indices(m, p)) == coef.shape[0])
        return self.design(node, degree) @ coef


def condexp(values, node: int, bundle, ce: CondExpConfig) -> np.ndarray:
    """``E[values | F_{t_node}]`` per path; ``values`` is ``(paths,)`` or ``(paths, cols)``."""
    v = np.asarray(values, dtype=float)
    flat = v.ndim == 1
    v2 = v[:, None] if flat else v
    if not np.all(np.isfinite(v2)):
        raise NonFiniteValue("non-finite values passed to condexp", node)
    proj = Projector(bundle.grid, bundle, ce) if bundle is not None else None
    if proj is None:
        if v2.shape[0] > 1 and not np.all(v2 == v2[:1]):
            raise ProjectionFailure("no bundle given for path-dependent values")
        out = v2
    else:
        out, _ = proj.expect(v2, node)
        out = np.broadcast_to(out, (max(v2.shape[0], out.shape[0]), v2.shape[1]))
    out = np.array(out)
    return out[:, 0] if flat else out


# ---------------------------------------------------------------- residuals

def residuals(prev: SolutionPair, nxt: SolutionPair, beta: float = 0.0):
    """Path means of ``sup_k e^{beta t}|dY|^2`` and ``int_0^T e^{beta s}|dZ|^2`` on ``[0, T]``."""
    if prev.grid != nxt.grid:
        raise GridMismatch("iterates live on different grids")
    return _residuals_arrays(prev.y.values, nxt.y.values, prev.z.values, nxt.z.values, prev.grid, beta)


def _residuals_arrays(y0, y1, z0, z1, grid: TimeGrid, beta: float):
    t = grid.interior_times
    dy = np.sum((y1 - y0) ** 2, axis=2)
    dz = np.sum((z1 - z0) ** 2, axis=2)
    y_res = float(np.mean(_exp_weighted(dy, beta, t).max(axis=1)))
    z_res = float(np.mean(_exp_weighted(dz, beta, t) @ trapezoid_weights(t)))
    return y_res, z_res


# ---------------------------------------------------------------- Picard

def _check_inputs(spec, terminal, grid, bundle, cfg):
    if terminal.grid != grid:
        raise GridMismatch("terminal data lives on a different grid")
    if bundle is not None:
        if bundle.grid != grid:
            raise GridMismatch("Brownian bundle lives on a different grid")
        if bundle.m != terminal.m:
            raise RangeMismatch(f"bundle has m={bundle.m}, terminal eta implies m={terminal.m}")
        if terminal.n_paths != bundle.n_paths and not terminal.compact:
            raise BundleMismatch(f"terminal data has {terminal.n_paths} paths, bundle {bundle.n_paths}")
    if spec.d != terminal.d:
        raise RangeMismatch(f"generator dimension {spec.d} differs from terminal dimension {terminal.d}")
    if cfg.freeze_mode == "freeze_y_only":
        if spec.z_dependence == "future_path" or (spec.z_dependence == "current" and not spec.has_instant()):
            raise ValidationError("freeze_y_only needs a generator whose Z dependence is none or current")


def _sweep(spec, terminal, grid, bundle, cfg, proj, y_prev, z_prev, coefs=None):
    """One backward Euler pass on a frozen iterate; returns ``(y, z, coefficients, y0_stderr)``.

    With ``coefs`` given, the stored regression coefficients replace the fits.
    """
    n, dt = grid.n_steps, grid.dt
    d, m = terminal.d, terminal.m
    xi, eta = terminal.xi.values, terminal.eta.values
    fut = Future(grid, 0, y_prev, z_prev, xi, eta)
    if cfg.freeze_mode == "freeze_both":
        F = spec.evaluate(fut)
        use_instant = False
    else:
        F = spec.anticipation(fut)
        use_instant = spec.has_instant()
    if not np.all(np.isfinite(F)):
        bad = int(np.argwhere(~np.isfinite(F))[0][1])
        raise NonFiniteValue(f"generator produced non-finite values at node {bad}", bad)

    ys = [None] * (n + 1)
    zs = [None] * (n + 1)
    ys[n] = xi[:, 0]
    zs[n] = eta[:, 0]
    new_coefs = []
    # every projection keeps the constant, so Y_0 is the path mean of xi + sum dt f_k
    pathsum = xi[:, 0, 0]
    for k in range(n - 1, -1, -1):
        y_next = ys[k + 1]
        if y_next.shape[0] == 1:
            z_k = np.zeros((1, d * m))
            z_coef = None
        else:
            dW = bundle.increments[:, k]
            prod = (y_next[:, :, None] * dW[:, None, :]).reshape(y_next.shape[0], d * m) / dt
            if coefs is None:
                z_k, z_coef = proj.expect(prod, k)
            else:
                z_coef = coefs[k][1]
                z_k = proj.replay(z_coef, k) if z_coef is not None else proj.expect(prod, k)[0]
        f_k = F[:, k]
        if use_instant:
            f_k = f_k + spec.instant(z_k, k)
        target = y_next + dt * f_k
        pathsum = pathsum + dt * f_k[:, 0]
        if coefs is None:
            y_k, y_coef = proj.expect(target, k)
        else:
            y_coef = coefs[k][0]
            y_k = proj.replay(y_coef, k) if y_coef is not None else proj.expect(target, k)[0]
        if not (np.all(np.isfinite(y_k)) and np.all(np.isfinite(z_k))):
            raise NonFiniteValue(f"non-finite solution at node {k}", k)
        ys[k], zs[k] = y_k, z_k
        new_coefs.append((y_coef, z_coef))
    new_coefs.reverse()
    se0 = float(pathsum.std(ddof=1) / np.sqrt(pathsum.size)) if pathsum.size > 1 else 0.0
    rows = max(v.shape[0] for v in ys)
    Y = np.empty((rows, n + 1, d))
    Zv = np.empty((rows, n + 1, d * m))
    for k in range(n + 1):
        Y[:, k] = ys[k]
        Zv[:, k] = zs[k]
    return Y, Zv, new_coefs, se0


def picard_solve(spec: GeneratorSpec, terminal: TerminalData, grid: TimeGrid, bundle=None,
                 cfg: Optional[PicardConfig] = None, ce: Optional[CondExpConfig] = None) -> SolutionPair:
    """Solve the anticipated BSDE by Picard iteration from the zero iterate.

    ``bundle`` may be omitted when every input is deterministic.  The returned
    pair carries the residual history ``[(iteration, y_res, z_res), ...]`` and,
    in regression mode, the per-iteration regression coefficients used by
    :func:`replay_frozen`.
    """
    cfg = cfg or PicardConfig()
    ce = ce or CondExpConfig()
    _check_inputs(spec, terminal, grid, bundle, cfg)
    n = grid.n_steps
    d, m = terminal.d, terminal.m
    n_paths = bundle.n_paths if bundle is not None else terminal.n_paths
    proj = Projector(grid, bundle, ce)
    # iterate 0: zero on [0, T), terminal value at T
    y = np.zeros((1, n + 1, d))
    z = np.zeros((1, n + 1, d * m))
    y = np.broadcast_to(y, (terminal.xi.values.shape[0],) + y.shape[1:]).copy()
    z = np.broadcast_to(z, (terminal.eta.values.shape[0],) + z.shape[1:]).copy()
    y[:, n] = terminal.xi.values[:, 0]
    z[:, n] = terminal.eta.values[:, 0]
    history, timings, all_coefs = [], [], []
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        t0 = time.perf_counter()
        y_new, z_new, coefs, stderr = _sweep(spec, terminal, grid, bundle, cfg, proj, y, z)
        y_res, z_res = _residuals_arrays(y, y_new, z, z_new, grid, cfg.beta)
        timings.append((time.perf_counter() - t0) * 1e3)
        history.append((it, y_res, z_res))
        all_coefs.append(coefs)
        y, z = y_new, z_new
        if (y_res <= cfg.tol_y and z_res <= cfg.tol_z) or not spec.reads_solution:
            converged = True
            break
    notes = []
    if cfg.freeze_mode == "freeze_both" and spec.z_dependence == "future_path":
        notes.append("freeze_both: future Z frozen at the previous iterate")
    if proj.reductions:
        notes.append(f"regression degree reduced at {len(proj.reductions)} nodes")
    if spec.family == "ControlEsssup":
        notes.append("esssup realised as pointwise maximisation over the control grid")
    sol = SolutionPair(
        y=ProcessPaths(grid, y, 0, n_paths, copy=False),
        z=ProcessPaths(grid, z, 0, n_paths, copy=False),
        terminal=terminal, beta=cfg.beta, iterations=it, residual_history=history,
        converged=converged, y0_stderr=stderr,
        bundle_key=None if bundle is None else bundle.key,
        notes=notes, timings_ms=timings,
        y_coefficients=all_coefs if ce.mode == "polynomial_regression" else None)
    if not converged:
        raise MaxIterExceeded(
            f"no convergence in {cfg.max_iter} iterations (last residuals {history[-1][1]:.3g}, {history[-1][2]:.3g})",
            sol)
    return sol


def replay_frozen(spec: GeneratorSpec, terminal: TerminalData, grid: TimeGrid, bundle,
                  sol: SolutionPair, cfg: Optional[PicardConfig] = None,
                  ce: Optional[CondExpConfig] = None) -> SolutionPair:
    """Rerun the Picard passes of ``sol`` on ``bundle`` with its regression coefficients frozen."""
    cfg = cfg or PicardConfig()
    ce = ce or CondExpConfig("polynomial_regression")
    if sol.y_coefficients is None:
        raise ValidationError("solution carries no regression coefficients")
    _check_inputs(spec, terminal, grid, bundle, cfg)
    n, d, m = grid.n_steps, terminal.d, terminal.m
    proj = Projector(grid, bundle, ce)
    y = np.zeros((terminal.xi.values.shape[0], n + 1, d))
    z = np.zeros((terminal.eta.values.shape[0], n + 1, d * m))
    y[:, n] = terminal.xi.values[:, 0]
    z[:, n] = terminal.eta.values[:, 0]
    history = []
    for it, coefs in enumerate(sol.y_coefficients, start=1):
        y_new, z_new, _, _ = _sweep(spec, terminal, grid, bundle, cfg, proj, y, z, coefs=coefs)
        history.append((it,) + _residuals_arrays(y, y_new, z, z_new, grid, cfg.beta))
        y, z = y_new, z_new
    return SolutionPair(ProcessPaths(grid, y, 0, bundle.n_paths, copy=False),
                        ProcessPaths(grid, z, 0, bundle.n_paths, copy=False),
                        terminal, cfg.beta, len(history), history,
                        bundle_key=bundle.key)
