"""Time grids, path containers and the norms used throughout the package.

A :class:`TimeGrid` covers ``[0, T]`` with ``n_steps`` uniform steps and the
truncated tail ``[T, T_tail]`` with ``n_tail_steps`` uniform steps.  Global node
indices run over both pieces; node ``n_steps`` is the horizon ``T``.

Path arrays are always shaped ``(paths, nodes, dim)``.  A deterministic process
may be stored compactly with a single row which broadcasts against any number
of paths; :class:`ProcessPaths` hides the difference.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from .errors import (
    DegenerateShape,
    DiscontinuousTerminal,
    NodeOutOfRange,
    NonPositiveHorizon,
    TailBeforeHorizon,
    ZeroSteps,
)


@dataclass(frozen=True)
class TimeGrid:
    T: float
    T_tail: float
    n_steps: int
    n_tail_steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise NonPositiveHorizon(f"horizon T must be positive, got {self.T}")
        if not self.T_tail > self.T:
            raise TailBeforeHorizon(f"T_tail={self.T_tail} must exceed T={self.T}")
        for name in ("n_steps", "n_tail_steps"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ZeroSteps(f"{name} must be a positive integer, got {v}")
            object.__setattr__(self, name, int(v))
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "T_tail", float(self.T_tail))

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def dt_tail(self) -> float:
        return (self.T_tail - self.T) / self.n_tail_steps

    @property
    def horizon_node(self) -> int:
        return self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + self.n_tail_steps + 1

    @cached_property
    def interior_times(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        # k*dt can miss T by an ulp for some n_steps; T itself must be a node
        t[-1] = self.T
        t.flags.writeable = False
        return t

    @cached_property
    def tail_times(self) -> np.ndarray:
        t = self.T + np.arange(self.n_tail_steps + 1) * self.dt_tail
        t[0] = self.T
        t[-1] = self.T_tail
        t.flags.writeable = False
        return t

    @cached_property
    def times(self) -> np.ndarray:
        t = np.concatenate([self.interior_times, self.tail_times[1:]])
        t.flags.writeable = False
        return t

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoid weights over all nodes of ``[0, T_tail]``."""
        return trapezoid_weights(self.times)

    def step_size(self, step: int) -> float:
        """Length of step ``step`` (between nodes ``step`` and ``step + 1``)."""
        return self.dt if step < self.n_steps else self.dt_tail

    def node_of(self, t: float, atol: float = 1e-12) -> int:
        """Index of the node at time ``t``; raises if ``t`` is not a node."""
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > atol * max(1.0, abs(t)):
            raise NodeOutOfRange(f"t={t} is not a grid node")
        return k

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.T_tail, self.n_steps * factor, self.n_tail_steps * factor)


def make_grid(T: float, T_tail: float, n_steps: int, n_tail_steps: int) -> TimeGrid:
    return TimeGrid(T, T_tail, n_steps, n_tail_steps)


def trapezoid_weights(times: np.ndarray) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    w = np.zeros_like(times)
    if times.size < 2:
        return w
    h = np.diff(times)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def reverse_cumulative_trapezoid(values: np.ndarray, times: np.ndarray) -> np.ndarray:
    """``out[:, k] = trapezoid of values over times[k:]`` along axis 1."""
    h = np.diff(times)
    shape = (1, -1) + (1,) * (values.ndim - 2)
    seg = 0.5 * h.reshape(shape) * (values[:, :-1] + values[:, 1:])
    out = np.zeros_like(values, dtype=float)
    out[:, :-1] = np.cumsum(seg[:, ::-1], axis=1)[:, ::-1]
    return out


def _norm_sq(values: np.ndarray) -> np.ndarray:
    return np.sum(values * values, axis=-1)


class ProcessPaths:
    """Samples of an adapted process on a contiguous range of grid nodes.

    ``values`` has shape ``(rows, nodes, dim)`` where ``rows`` is either
    ``n_paths`` or 1 (a deterministic process shared by every path).
    Instances are read-only.
    """

    def __init__(self, grid: TimeGrid, values, start: int = 0, n_paths: Optional[int] = None,
                 copy: bool = True):
        # copy=False takes ownership of the caller's array (it becomes read-only)
        values = np.array(values, dtype=float) if copy else np.asarray(values, dtype=float)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3:
            raise DegenerateShape(f"values must be (paths, nodes, dim), got shape {values.shape}")
        rows, nodes, dim = values.shape
        if rows == 0 or nodes == 0 or dim == 0:
            raise DegenerateShape(f"empty process, shape {values.shape}")
        if n_paths is None:
            n_paths = rows
        if rows not in (1, n_paths):
            raise DegenerateShape(f"{rows} stored rows cannot represent {n_paths} paths")
        if start < 0 or start + nodes > grid.n_nodes:
            raise NodeOutOfRange(f"nodes [{start}, {start + nodes}) exceed grid of {grid.n_nodes} nodes")
        values.flags.writeable = False
        self.grid = grid
        self.values = values
        self.start = int(start)
        self.n_paths = int(n_paths)

    @classmethod
    def deterministic(cls, grid: TimeGrid, fn, start: int = 0, stop: Optional[int] = None,
                      n_paths: int = 1, dim: int = 1) -> "ProcessPaths":
        """Evaluate a vectorised function of time on nodes ``[start, stop]``."""
        stop = grid.n_nodes - 1 if stop is None else stop
        t = grid.times[start:stop + 1]
        v = np.asarray(fn(t), dtype=float)
        v = np.broadcast_to(v.reshape(len(t), -1) if v.ndim else v, (len(t), dim))
        return cls(grid, v[None].copy(), start=start, n_paths=n_paths)

    @classmethod
    def constant(cls, grid, c, start=0, stop=None, n_paths=1, dim=1):
        return cls.deterministic(grid, lambda t: np.full((len(t), dim), c, dtype=float),
                                 start, stop, n_paths, dim)

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def stop(self) -> int:
        """Last covered node (inclusive)."""
        return self.start + self.n_nodes - 1

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times[self.start:self.stop + 1]

    @property
    def compact(self) -> bool:
        return self.values.shape[0] == 1

    @cached_property
    def deterministic_flag(self) -> bool:
        if self.compact:
            return True
        return bool(np.all(self.values == self.values[:1]))

    @property
    def full(self) -> np.ndarray:
        """Read-only ``(n_paths, nodes, dim)`` view."""
        return np.broadcast_to(self.values, (self.n_paths,) + self.values.shape[1:])

    def local(self, node: int) -> int:
        if not self.start <= node <= self.stop:
            raise NodeOutOfRange(f"node {node} outside [{self.start}, {self.stop}]")
        return node - self.start

    def at(self, node: int) -> np.ndarray:
        return self.values[:, self.local(node)]

    def segment(self, first: int, last: int) -> "ProcessPaths":
        a, b = self.local(first), self.local(last)
        return ProcessPaths(self.grid, self.values[:, a:b + 1], start=first, n_paths=self.n_paths)

    def __repr__(self):
        kind = "deterministic" if self.compact else f"{self.n_paths} paths"
        return f"ProcessPaths({kind}, nodes {self.start}..{self.stop}, dim {self.dim})"


def discrete_sup_norm(p: ProcessPaths, from_node: int, tail_sup=0.0) -> np.ndarray:
    """Per-path ``max(max_{from_node <= k <= T} |p_k|, tail_sup)``."""
    n = p.grid.n_steps
    if from_node > n:
        raise NodeOutOfRange(f"from_node {from_node} lies beyond the horizon node {n}")
    if p.stop < n:
        raise NodeOutOfRange(f"process stops at node {p.stop}, before the horizon node {n}")
    a, b = p.local(from_node), p.local(n)
    mags = np.sqrt(_norm_sq(p.values[:, a:b + 1])).max(axis=1)
    out = np.maximum(mags, np.asarray(tail_sup, dtype=float))
    return np.broadcast_to(out, (p.n_paths,)).copy()


def weighted_l2(p: ProcessPaths, beta: float, from_node: int, to_node: int) -> np.ndarray:
    """Per-path trapezoid quadrature of ``int e^{beta s} |p_s|^2 ds`` over the node range."""
    if from_node > to_node:
        raise NodeOutOfRange(f"from_node {from_node} > to_node {to_node}")
    a, b = p.local(from_node), p.local(to_node)
    t = p.grid.times[from_node:to_node + 1]
    sq = _norm_sq(p.values[:, a:b + 1])
    integrand = _exp_weighted(sq, beta, t)
    w = trapezoid_weights(t)
    out = integrand @ w
    return np.broadcast_to(out, (p.n_paths,)).copy()


def _exp_weighted(sq: np.ndarray, beta: float, t: np.ndarray) -> np.ndarray:
    # avoid inf * 0 for large beta * t
    if beta == 0:
        return sq
    e = np.exp(beta * t)
    return np.where(sq == 0.0, 0.0, sq * e)


@dataclass(frozen=True)
class TerminalData:
    """Prescribed ``(xi, eta)`` on ``[T, T_tail]``.

    ``xi`` has dimension ``d``; ``eta`` has dimension ``d * m`` (row-major
    ``d x m``).  ``continuity_budget`` bounds the jump between adjacent tail
    nodes of ``xi``; ``None`` selects ``10 * dt_tail * (1 + max|xi|)`` and a
    negative value disables the check.
    """

    xi: ProcessPaths
    eta: ProcessPaths
    beta: float = 0.0
    continuity_budget: Optional[float] = None
    tail_sup_xi: np.ndarray = field(init=False, repr=False)
    tail_weighted_eta: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        grid = self.xi.grid
        n, last = grid.n_steps, grid.n_nodes - 1
        for name, p in (("xi", self.xi), ("eta", self.eta)):
            if p.grid != grid:
                raise NodeOutOfRange(f"{name} lives on a different grid")
            if p.start != n or p.stop != last:
                raise NodeOutOfRange(f"{name} must cover tail nodes [{n}, {last}], got [{p.start}, {p.stop}]")
        if self.xi.n_paths != self.eta.n_paths:
            raise DegenerateShape("xi and eta disagree on n_paths")
        if self.eta.dim % self.xi.dim:
            raise DegenerateShape(f"eta dim {self.eta.dim} is not a multiple of xi dim {self.xi.dim}")
        mags = np.sqrt(_norm_sq(self.xi.values))
        budget = self.continuity_budget
        if budget is None:
            budget = 10.0 * grid.dt_tail * (1.0 + float(mags.max()))
        if budget >= 0 and self.xi.n_nodes > 1:
            jumps = np.sqrt(_norm_sq(np.diff(self.xi.values, axis=1)))
            worst = float(jumps.max())
            if worst > budget:
                raise DiscontinuousTerminal(f"xi jumps by {worst:.3g} between tail nodes (budget {budget:.3g})")
        object.__setattr__(self, "tail_sup_xi", mags.max(axis=1))
        object.__setattr__(self, "tail_weighted_eta",
                           weighted_l2(self.eta, self.beta, n, last)[: self.eta.values.shape[0]])

    @classmethod
    def deterministic(cls, grid: TimeGrid, xi_fn, eta_fn=None, d: int = 1, m: int = 1,
                      n_paths: int = 1, beta: float = 0.0, continuity_budget=None) -> "TerminalData":
        n = grid.n_steps
        xi = ProcessPaths.deterministic(grid, xi_fn, start=n, n_paths=n_paths, dim=d)
        if eta_fn is None:
            eta = ProcessPaths.constant(grid, 0.0, start=n, n_paths=n_paths, dim=d * m)
        else:
            eta = ProcessPaths.deterministic(grid, eta_fn, start=n, n_paths=n_paths, dim=d * m)
        return cls(xi, eta, beta=beta, continuity_budget=continuity_budget)

    @property
    def grid(self) -> TimeGrid:
        return self.xi.grid

    @property
    def d(self) -> int:
        return self.xi.dim

    @property
    def m(self) -> int:
        return self.eta.dim // self.xi.dim

    @property
    def n_paths(self) -> int:
        return self.xi.n_paths

    @property
    def compact(self) -> bool:
        return self.xi.compact and self.eta.compact

    def scaled(self, factor: float) -> "TerminalData":
        g = self.grid
        xi = ProcessPaths(g, self.xi.values * factor, self.xi.start, self.xi.n_paths)
        eta = ProcessPaths(g, self.eta.values * factor, self.eta.start, self.eta.n_paths)
        return TerminalData(xi, eta, beta=self.beta, continuity_budget=-1.0)


@dataclass
class SolutionPair:
    """Converged (or partial) solution of the anticipated equation.

    ``y`` and ``z`` hold the solution on ``[0, T]`` (nodes ``0..n_steps``); on the
    tail the solution is the terminal data itself, so ``Y``/``Z`` assemble the
    full ``[0, T_tail]`` processes on demand.
    """

    y: ProcessPaths
    z: ProcessPaths
    terminal: TerminalData
    beta: float
    iterations: int
    residual_history: list
    converged: bool = True
    y0_stderr: float = 0.0
    bundle_key: Optional[tuple] = None
    notes: list = field(default_factory=list)
    timings_ms: list = field(default_factory=list)
    y_coefficients: Optional[list] = None

    @property
    def grid(self) -> TimeGrid:
        return self.y.grid

    @property
    def y0(self) -> float:
        return float(np.mean(self.y.full[:, 0, 0]))

    def _join(self, interior: ProcessPaths, tail: ProcessPaths) -> ProcessPaths:
        rows = max(interior.values.shape[0], tail.values.shape[0])
        a = np.broadcast_to(interior.values[:, :-1], (rows,) + interior.values[:, :-1].shape[1:])
        b = np.broadcast_to(tail.values, (rows,) + tail.values.shape[1:])
        return ProcessPaths(self.grid, np.concatenate([a, b], axis=1), 0, interior.n_paths)

    @property
    def Y(self) -> ProcessPaths:
        return self._join(self.y, self.terminal.xi)

    @property
    def Z(self) -> ProcessPaths:
        return self._join(self.z, self.terminal.eta)
