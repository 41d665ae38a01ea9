"""Optimal control of an infinite-delay SDE through anticipated BSDEs.

The controlled state is ``dX = mu(s,u) I_s ds + sigma(s,u) X_s dW`` with
``I_s = int_0^s X`` and the reward

    J(u) = E[X_T Q_T + int_0^T X_s l(s,u_s) ds + (int_T^inf mu(s,u_s) Q_s ds) int_0^T X_s ds].

For a fixed control ``J(u)`` is ``Y_0`` of a linear anticipated BSDE; the value
function solves the same equation with the generator maximised over ``U``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import SolutionPair, TerminalData, TimeGrid, trapezoid_weights
from .errors import ControlOutOfSet, ControlProblemInvalid, EmptyControlGrid, MissingModulus, RangeMismatch
from .generators import ControlFixedModel, ControlTables, GeneratorSpec
from .solver import CondExpConfig, PicardConfig, picard_solve
from .stochastic import BrownianBundle, eval_kernel, simulate_controlled_sdde

AUDIT_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """Coefficients ``mu(s,u) >= 0``, ``sigma(s,u)`` (``1 x m``), ``l(s,u)``, tail reward ``Q``.

    Coefficient functions take a time array and a scalar control value.  ``C``
    bounds ``|sigma|``, ``|l|``, ``int |mu|`` and ``int mu^2``; ``h`` is an
    envelope of ``|mu|`` with ``int h <= C``.  ``U_interval`` declares the full
    control set when ``U_grid`` only samples it; ``modulus(delta)`` then bounds
    the change of ``(mu, sigma, l)`` over a control distance ``delta``.
    """

    mu: Callable
    sigma: Callable
    l: Callable
    Q: Callable
    U_grid: Sequence[float]
    C: float
    h: Callable
    U_interval: Optional[tuple] = None
    modulus: Optional[Callable] = None
    m: int = 1
    name: str = "control"

    def __post_init__(self):
        U = np.asarray(self.U_grid, dtype=float).ravel()
        if U.size == 0:
            raise EmptyControlGrid("the control grid is empty")
        object.__setattr__(self, "U_grid", U)
        object.__setattr__(self, "_tables", {})
        if not self.C > 0:
            raise ControlProblemInvalid(f"C must be positive, got {self.C}")

    def tables(self, grid: TimeGrid) -> ControlTables:
        """Coefficients on every node of ``grid``; audits the bounds on first use."""
        tab = self._tables.get(grid)
        if tab is not None:
            return tab
        t = grid.times
        mu = np.stack([eval_kernel(lambda s, u=u: self.mu(s, u), t) for u in self.U_grid])
        sigma = np.stack([eval_kernel(lambda s, u=u: self.sigma(s, u), t, (self.m,)) for u in self.U_grid])
        l = np.stack([eval_kernel(lambda s, u=u: self.l(s, u), t) for u in self.U_grid])
        h = eval_kernel(self.h, t)
        tab = ControlTables(grid, self.U_grid, mu, sigma, l, h, float(self.C))
        self._audit(tab, grid)
        self._tables[grid] = tab
        return tab

    def _audit(self, tab: ControlTables, grid: TimeGrid):
        C, w = self.C, grid.weights
        lim = C * (1 + AUDIT_RTOL)
        checks = [
            ("mu >= 0", tab.mu.min() >= 0),
            ("|mu| <= h", np.all(np.abs(tab.mu) <= tab.h * (1 + AUDIT_RTOL))),
            ("int h <= C", tab.h @ w <= lim),
            ("int |mu| <= C", np.all(np.abs(tab.mu) @ w <= lim)),
            ("int mu^2 <= C", np.all((tab.mu ** 2) @ w <= lim)),
            ("|sigma| <= C", np.all(np.sqrt(np.sum(tab.sigma ** 2, axis=2)) <= lim)),
            ("|l| <= C", np.all(np.abs(tab.l) <= lim)),
        ]
        failed = [name for name, ok in checks if not ok]
        if failed:
            raise ControlProblemInvalid(f"control problem violates: {', '.join(failed)}")

    def terminal(self, grid: TimeGrid, n_paths: int = 1) -> TerminalData:
        return TerminalData.deterministic(grid, self.Q, None, d=1, m=self.m, n_paths=n_paths)

    def index_of(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        dist = np.abs(v[..., None] - self.U_grid)
        idx = dist.argmin(axis=-1)
        if np.any(dist.min(axis=-1) > 1e-12 * (1 + np.abs(v))):
            bad = v[dist.min(axis=-1) > 1e-12 * (1 + np.abs(v))].ravel()[0]
            raise ControlOutOfSet(f"control value {bad} is not in the control grid")
        return idx


@dataclass(frozen=True, eq=False)
class ControlPaths:
    """Control indices into ``U_grid`` for every (path, node) of a grid; one row if deterministic."""

    grid: TimeGrid
    U_grid: np.ndarray
    index: np.ndarray
    n_paths: int = 1

    def __post_init__(self):
        idx = np.asarray(self.index)
        if idx.ndim != 2 or idx.shape[1] != self.grid.n_nodes:
            raise RangeMismatch(f"control index must be (rows, {self.grid.n_nodes}), got {idx.shape}")
        if idx.min() < 0 or idx.max() >= len(self.U_grid):
            raise ControlOutOfSet("control index outside the control grid")
        object.__setattr__(self, "index", idx)

    @property
    def values(self) -> np.ndarray:
        return self.U_grid[self.index]

    @property
    def compact(self) -> bool:
        return self.index.shape[0] == 1

    @classmethod
    def constant(cls, problem: ControlProblem, u: float, grid: TimeGrid, n_paths: int = 1):
        k = int(problem.index_of(u))
        return cls(grid, problem.U_grid, np.full((1, grid.n_nodes), k, dtype=np.int64), n_paths)

    @classmethod
    def from_values(cls, problem: ControlProblem, values, grid: TimeGrid):
        v = np.atleast_2d(np.asarray(values, dtype=float))
        return cls(grid, problem.U_grid, problem.index_of(v), v.shape[0])


def _as_paths(problem, u, grid) -> ControlPaths:
    if isinstance(u, ControlPaths):
        if not np.array_equal(u.U_grid, problem.U_grid):
            raise ControlOutOfSet("control paths were built on a different control grid")
        return u
    return ControlPaths.constant(problem, float(u), grid)


def fixed_control_generator(problem: ControlProblem, u, grid: TimeGrid) -> GeneratorSpec:
    """``f^u(t, Y, z) = E_t[int_t mu(r,u_r) Y_r dr] + sigma(t,u_t) z + l(t,u_t)``."""
    tab = problem.tables(grid)
    paths = _as_paths(problem, u, grid)
    used = tab.mu[np.unique(paths.index)]
    reads = bool(np.any(used != 0) or np.any(tab.sigma[np.unique(paths.index)] != 0))
    C = problem.C
    return GeneratorSpec("ControlFixed", ControlFixedModel(tab, paths.index), C,
                         z_dependence="current", lipschitz_y=C, lipschitz_z=C, reads_solution=reads)


def esssup_generator(problem: ControlProblem, grid: TimeGrid) -> GeneratorSpec:
    """Generator maximised pointwise over the control grid.

    The anticipation integrand is maximised per (node, path) through
    ``max_u mu(r,u) y = mu_max y+ - mu_min y-``; the current part maximises
    ``sigma(t,u) z + l(t,u)``.
    """
    tab = problem.tables(grid)
    reads = bool(np.any(tab.mu != 0) or np.any(tab.sigma != 0))
    C = problem.C
    return GeneratorSpec("ControlEsssup", tab, C, z_dependence="current", lipschitz_y=C, lipschitz_z=C,
                         reads_solution=reads)


def solve_value_function(problem: ControlProblem, grid: TimeGrid, bundle=None,
                         cfg: Optional[PicardConfig] = None, ce: Optional[CondExpConfig] = None) -> SolutionPair:
    """Value function: Picard solve of the maximised generator with ``xi = Q``, ``eta = 0``."""
    n_paths = 1 if bundle is None else bundle.n_paths
    sol = picard_solve(esssup_generator(problem, grid), problem.terminal(grid, n_paths), grid, bundle, cfg, ce)
    sol.notes.append("tail Z set to zero")
    return sol


def solve_fixed_control(problem: ControlProblem, u, grid: TimeGrid, bundle=None,
                        cfg: Optional[PicardConfig] = None, ce: Optional[CondExpConfig] = None) -> SolutionPair:
    """Backward solve for a fixed control, giving ``Y_0^u = J(u)``."""
    n_paths = 1 if bundle is None else bundle.n_paths
    return picard_solve(fixed_control_generator(problem, u, grid), problem.terminal(grid, n_paths),
                        grid, bundle, cfg, ce)


@dataclass
class ExtractedControl:
    u: ControlPaths
    rho: float
    eps_grid: float
    epsilon: float

    @property
    def bound(self) -> float:
        """Guaranteed ``|Y_0 - Y_0^{u*}|`` bound ``rho * (eps_grid + epsilon)``."""
        return self.rho * (self.eps_grid + self.epsilon)


def gronwall_rho(T: float, C: float) -> float:
    return float(np.sqrt(T * np.exp(C * T + C * C + 2.0)))


def grid_slack(problem: ControlProblem) -> float:
    """Modulus of continuity evaluated at the largest distance from ``U`` to the grid."""
    if problem.U_interval is None:
        return 0.0
    if problem.modulus is None:
        raise MissingModulus("U_grid samples a continuum U_interval but no modulus of continuity was given")
    a, b = problem.U_interval
    pts = np.sort(problem.U_grid)
    gaps = [pts[0] - a, b - pts[-1]] + list(np.diff(pts) / 2.0)
    return float(problem.modulus(max(0.0, max(gaps))))


def extract_control(problem: ControlProblem, sol: SolutionPair, epsilon: float) -> ExtractedControl:
    """Per (node, path) maximiser over the control grid given the solved ``(Y, Z)``.

    At node ``r`` the control enters the reward through ``mu(r,u) Y_r`` weighted by
    ``min(r, T)`` (the length of ``[0, T]`` times seeing ``r`` in their
    anticipation window) and, before ``T``, through ``sigma(r,u) Z_r + l(r,u)``.
    Ties go to the larger ``mu(r,u) Y_r``, then to the first grid value.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    grid = sol.grid
    tab = problem.tables(grid)
    n, N = grid.n_steps, grid.n_nodes
    Y = sol.Y.values[:, :, 0]                                  # (rows, N)
    Zi = sol.z.values                                          # (rows, n+1, m)
    weight = np.minimum(grid.times, grid.T)
    inside = np.arange(N) < n
    rows = max(Y.shape[0], Zi.shape[0])
    best = np.full((rows, N), -np.inf)
    best_tie = np.full((rows, N), -np.inf)
    idx = np.zeros((rows, N), dtype=np.int64)
    for k in range(len(problem.U_grid)):
        muY = tab.mu[k][None, :] * Y
        inst = np.zeros((Zi.shape[0], N))
        inst[:, :n] = np.einsum("rkm,km->rk", Zi[:, :n], tab.sigma[k, :n]) + tab.l[k, :n]
        score = weight * muY + inst * inside
        score, muY = np.broadcast_to(score, (rows, N)), np.broadcast_to(muY, (rows, N))
        better = (score > best) | ((score == best) & (muY > best_tie))
        best = np.where(better, score, best)
        best_tie = np.where(better, muY, best_tie)
        idx = np.where(better, k, idx)
    u = ControlPaths(grid, problem.U_grid, idx, sol.y.n_paths)
    return ExtractedControl(u, gronwall_rho(grid.T, problem.C), grid_slack(problem), float(epsilon))


def forward_cost(problem: ControlProblem, u, grid: TimeGrid, bundle: Optional[BrownianBundle] = None):
    """Monte Carlo ``(J, stderr)`` of the reward under control ``u`` (exact when noise-free)."""
    tab = problem.tables(grid)
    paths = _as_paths(problem, u, grid)
    X = simulate_controlled_sdde(problem, paths, grid, bundle).values[:, :, 0]
    n = grid.n_steps
    t_int, t_tail = grid.interior_times, grid.tail_times
    w_int, w_tail = trapezoid_weights(t_int), trapezoid_weights(t_tail)
    Q = eval_kernel(problem.Q, t_tail)
    cols = np.arange(grid.n_nodes)
    mu_u = tab.mu[paths.index, cols]                           # (rows_u, N)
    l_u = tab.l[paths.index[:, : n + 1], cols[: n + 1]]
    coupling = (mu_u[:, n:] * Q) @ w_tail
    vals = X[:, -1] * Q[0] + (X * l_u) @ w_int + coupling * (X @ w_int)
    if vals.shape[0] == 1:
        return float(vals[0]), 0.0
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.shape[0]))


def random_adapted_control(problem: ControlProblem, grid: TimeGrid, bundle: BrownianBundle,
                           seed: int) -> ControlPaths:
    """A control depending on ``(t, W_t)`` only, held at its time-``T`` value on the tail.

    ``u_k = U_grid[floor(|U| frac(a W_k + b t_k + c))]`` with ``(a, b, c)`` drawn from ``seed``.
    """
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(scale=3.0), rng.normal(scale=3.0), rng.uniform()
    n, K = grid.n_steps, len(problem.U_grid)
    W = bundle.W[:, :, 0]
    frac = np.mod(a * W + b * grid.interior_times + c, 1.0)
    idx_int = np.minimum((frac * K).astype(np.int64), K - 1)
    idx = np.empty((bundle.n_paths, grid.n_nodes), dtype=np.int64)
    idx[:, : n + 1] = idx_int
    idx[:, n + 1:] = idx_int[:, n:n + 1]
    return ControlPaths(grid, problem.U_grid, idx, bundle.n_paths)


def _on_grid(problem: ControlProblem, u, grid: TimeGrid) -> ControlPaths:
    """Re-express ``u`` on ``grid`` by holding each value until the next original node."""
    if not isinstance(u, ControlPaths):
        return ControlPaths.constant(problem, float(u), grid)
    if u.grid == grid:
        return u
    j = np.searchsorted(u.grid.times, grid.times + 1e-12 * (1 + grid.times), side="right") - 1
    return ControlPaths(grid, u.U_grid, u.index[:, np.clip(j, 0, u.grid.n_nodes - 1)], u.n_paths)


def consistency_budget(problem: ControlProblem, u, grid: TimeGrid, cfg: Optional[PicardConfig] = None,
                       factor: float = 2.0) -> float:
    """``factor`` times the summed change of backward ``Y_0^u`` and noise-free ``J(u)`` under ``dt/2``.

    The Euler mean of the controlled state does not see ``sigma``, so the
    noise-free forward value is the mean of the Monte Carlo estimate at each ``dt``.
    ``u`` must be deterministic.
    """
    if isinstance(u, ControlPaths) and not u.compact:
        raise ValueError("consistency budget needs a deterministic control")
    quiet = ControlProblem(problem.mu, lambda s, v: np.zeros(np.shape(s)),
                           problem.l, problem.Q, problem.U_grid, problem.C, problem.h, m=problem.m)
    vals = []
    for g in (grid, grid.refined(2)):
        uu = _on_grid(problem, u, g)
        back = solve_fixed_control(problem, uu, g, None, cfg).y0
        fwd = forward_cost(quiet, ControlPaths(g, quiet.U_grid, uu.index, 1), g, None)[0]
        vals.append((back, fwd))
    return factor * (abs(vals[0][0] - vals[1][0]) + abs(vals[0][1] - vals[1][1]))
