"""Brownian increments and Euler-Maruyama simulation of infinite-delay SDEs.

Increments are counter based: the normal for ``(path, step, component)`` is a
pure function of ``(seed, step, path, component)``, so any subset of paths or
steps can be regenerated on its own and bundles built with the same arguments
are bit-identical.
"""
from __future__ import annotations

from functools import cached_property

import numpy as np
from scipy.special import ndtri

from .core import ProcessPaths, TimeGrid
from .errors import ControlOutOfSet, DegenerateShape, KernelEvaluationFailure, RangeMismatch

_MASK64 = (1 << 64) - 1
_LANES = 4  # Philox4x64 emits four words per counter value


def _counter_normals(seed: int, step: int, first_path: int, stop_path: int, m: int) -> np.ndarray:
    bg = np.random.Philox(key=[seed & _MASK64, step])
    first = first_path * m
    count = (stop_path - first_path) * m
    bg.advance(first // _LANES)
    skip = first % _LANES
    raw = bg.random_raw(skip + count)[skip:]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u).reshape(stop_path - first_path, m)


class BrownianBundle:
    """Brownian increments for ``n_paths`` paths of an ``m``-dimensional motion.

    ``increments`` (steps on ``[0, T)``) is generated eagerly; tail steps on
    ``[T, T_tail)`` come from :meth:`block`, which generates any rectangle of
    the ``(path, step)`` index set with identical values.
    """

    def __init__(self, grid: TimeGrid, n_paths: int, m: int, seed: int):
        if int(n_paths) != n_paths or n_paths < 1:
            raise DegenerateShape(f"n_paths must be a positive integer, got {n_paths}")
        if int(m) != m or m < 1:
            raise DegenerateShape(f"Brownian dimension m must be a positive integer, got {m}")
        self.grid = grid
        self.n_paths = int(n_paths)
        self.m = int(m)
        self.seed = int(seed)
        inc = self.block(0, grid.n_steps)
        inc.flags.writeable = False
        self.increments = inc

    @property
    def key(self) -> tuple:
        return (self.seed, self.n_paths, self.m, self.grid)

    def block(self, first_step: int, stop_step: int, first_path: int = 0, stop_path=None) -> np.ndarray:
        """Increments for steps ``[first_step, stop_step)`` and paths ``[first_path, stop_path)``."""
        stop_path = self.n_paths if stop_path is None else stop_path
        total = self.grid.n_steps + self.grid.n_tail_steps
        if not (0 <= first_step <= stop_step <= total and 0 <= first_path <= stop_path <= self.n_paths):
            raise RangeMismatch(f"block steps [{first_step}, {stop_step}) paths [{first_path}, {stop_path}) out of range")
        out = np.empty((stop_path - first_path, stop_step - first_step, self.m))
        for j, step in enumerate(range(first_step, stop_step)):
            scale = np.sqrt(self.grid.step_size(step))
            out[:, j] = scale * _counter_normals(self.seed, step, first_path, stop_path, self.m)
        return out

    def tail_increments(self) -> np.ndarray:
        return self.block(self.grid.n_steps, self.grid.n_steps + self.grid.n_tail_steps)

    @cached_property
    def W(self) -> np.ndarray:
        """Brownian values at interior nodes, shape ``(n_paths, n_steps + 1, m)``."""
        w = np.zeros((self.n_paths, self.grid.n_steps + 1, self.m))
        np.cumsum(self.increments, axis=1, out=w[:, 1:])
        w.flags.writeable = False
        return w

    def with_fresh_steps(self, from_step: int, seed: int) -> "BrownianBundle":
        """Copy whose increments at steps ``>= from_step`` are redrawn under ``seed``."""
        other = object.__new__(BrownianBundle)
        other.grid, other.n_paths, other.m, other.seed = self.grid, self.n_paths, self.m, self.seed
        inc = self.increments.copy()
        fresh = BrownianBundle.__new__(BrownianBundle)
        fresh.grid, fresh.n_paths, fresh.m, fresh.seed = self.grid, self.n_paths, self.m, seed
        inc[:, from_step:] = fresh.block(from_step, self.grid.n_steps)
        inc.flags.writeable = False
        other.increments = inc
        return other

    def __repr__(self):
        return f"BrownianBundle(seed={self.seed}, n_paths={self.n_paths}, m={self.m})"


def simulate_brownian(grid: TimeGrid, n_paths: int, m: int, seed: int) -> BrownianBundle:
    return BrownianBundle(grid, n_paths, m, seed)


def eval_kernel(fn, t: np.ndarray, trailing=()) -> np.ndarray:
    """Evaluate a vectorised kernel on ``t`` and broadcast to ``t.shape + trailing``."""
    try:
        v = np.asarray(fn(t), dtype=float)
        if v.ndim >= 1 and v.shape[0] == len(t) and trailing:
            v = v.reshape((len(t),) + (-1,) * (v.ndim > 1))
            v = np.broadcast_to(v if v.ndim > 1 else v[:, None], (len(t),) + trailing)
        else:
            v = np.broadcast_to(v, (len(t),) + trailing)
    except Exception as exc:  # noqa: BLE001 - user kernels can fail in any way
        raise KernelEvaluationFailure(f"kernel {fn!r} failed: {exc}") from exc
    if not np.all(np.isfinite(v)):
        raise KernelEvaluationFailure(f"kernel {fn!r} returned non-finite values")
    return np.array(v)


def _check_bundle(grid, bundle):
    if bundle is not None and bundle.grid != grid:
        raise RangeMismatch("Brownian bundle was generated on a different grid")


def simulate_isdde(mu, nu, grid: TimeGrid, start: int, bundle: BrownianBundle = None,
                   m: int = 1) -> ProcessPaths:
    """Adjoint delay equation ``dX = mu_s I_s ds + nu_s I_s dW_s`` with ``I_s = int_t^s X``.

    Starts from ``X = 1`` at node ``start`` with zero history.  ``nu`` maps time
    to ``(m,)`` rows.  A zero ``nu`` yields a single deterministic path and the
    bundle may be omitted.
    """
    n = grid.n_steps
    if not 0 <= start <= n:
        raise RangeMismatch(f"start node {start} outside [0, {n}]")
    _check_bundle(grid, bundle)
    m = bundle.m if bundle is not None else m
    t = grid.interior_times[start:]
    mu_v = eval_kernel(mu, t)
    nu_v = eval_kernel(nu, t, (m,))
    noisy = bool(np.any(nu_v[:-1] != 0.0))
    if noisy and bundle is None:
        raise RangeMismatch("a non-zero diffusion kernel needs a Brownian bundle")
    rows = bundle.n_paths if noisy else 1
    n_paths = bundle.n_paths if bundle is not None else 1
    dt = grid.dt
    X = np.empty((rows, n - start + 1))
    X[:, 0] = 1.0
    memory = np.zeros(rows)
    for j, k in enumerate(range(start, n)):
        x = X[:, j]
        nxt = x + mu_v[j] * memory * dt
        if noisy:
            nxt = nxt + memory * (bundle.increments[:, k] @ nu_v[j])
        X[:, j + 1] = nxt
        memory = memory + 0.5 * dt * (x + nxt)
    return ProcessPaths(grid, X[:, :, None], start=start, n_paths=n_paths, copy=False)


def simulate_controlled_sdde(problem, u, grid: TimeGrid, bundle: BrownianBundle = None) -> ProcessPaths:
    """Controlled state ``dX = mu(s,u) I_s ds + sigma(s,u) X_s dW_s`` from ``X_0 = 1``.

    Unlike :func:`simulate_isdde` the diffusion multiplies the current state.
    ``u`` is a :class:`~iabsde.control.ControlPaths` over the problem's grid.
    """
    _check_bundle(grid, bundle)
    tables = problem.tables(grid)
    idx = np.asarray(u.index)
    if idx.min() < 0 or idx.max() >= len(problem.U_grid):
        raise ControlOutOfSet("control index outside the control grid")
    if idx.shape[1] != grid.n_nodes:
        raise RangeMismatch(f"control covers {idx.shape[1]} nodes, grid has {grid.n_nodes}")
    if bundle is not None and idx.shape[0] not in (1, bundle.n_paths):
        raise RangeMismatch("control paths do not match the bundle's path count")
    n, dt = grid.n_steps, grid.dt
    cols = np.arange(n)
    mu_u = tables.mu[idx[:, :n], cols]                 # (rows, n)
    sig_u = tables.sigma[idx[:, :n], cols]             # (rows, n, m)
    noisy = bool(np.any(sig_u != 0.0))
    if noisy and bundle is None:
        raise RangeMismatch("a non-zero diffusion needs a Brownian bundle")
    rows = bundle.n_paths if noisy else idx.shape[0]
    n_paths = bundle.n_paths if bundle is not None else idx.shape[0]
    X = np.empty((rows, n + 1))
    X[:, 0] = 1.0
    memory = np.zeros(rows)
    for k in range(n):
        x = X[:, k]
        nxt = x + mu_u[:, k] * memory * dt
        if noisy:
            nxt = nxt + x * np.einsum("pm,pm->p", bundle.increments[:, k],
                                      np.broadcast_to(sig_u[:, k], (rows, bundle.m)))
        X[:, k + 1] = nxt
        memory = memory + 0.5 * dt * (x + nxt)
    return ProcessPaths(grid, X[:, :, None], start=0, n_paths=n_paths, copy=False)
