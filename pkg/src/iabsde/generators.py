"""Anticipating generators ``f(s, {Y_r}_{r>=s}, {Z_r}_{r>=s})`` and their families.

A generator is evaluated pathwise on a frozen future (a :class:`Future`), giving
one value per (path, node) before any conditional expectation is taken.  The
solver then projects ``Y_{k+1} + dt * f_k`` onto the time-``t_k`` information.

Every family splits into

* ``anticipation(future)``: everything that reads the future path, plus the
  deterministic driver ``l(s)``;
* ``instant(z_k, node)``: the part that reads only the current ``Z`` (``None``
  for families without one).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import TimeGrid, reverse_cumulative_trapezoid, trapezoid_weights
from .errors import (
    KernelBoundViolation,
    ProjectionFailure,
    SegmentTooShort,
    UnboundedFamily,
)
from .stochastic import eval_kernel

FAMILIES = ("LinearAnticipating", "SupNorm", "ControlFixed", "ControlEsssup", "Custom")
Z_DEPENDENCE = ("none", "current", "future_path")
AUDIT_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class Future:
    """Frozen solution segment seen by the generator from node ``start`` on.

    ``y``/``z`` cover interior nodes ``start..n_steps`` and ``xi``/``eta`` the tail
    nodes ``n_steps..end``; all are ``(rows, nodes, dim)`` arrays whose row
    count is 1 or ``n_paths``.
    """

    grid: TimeGrid
    start: int
    y: np.ndarray
    z: np.ndarray
    xi: np.ndarray
    eta: np.ndarray

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.start, self.grid.n_steps + 1)

    @property
    def t_int(self) -> np.ndarray:
        return self.grid.interior_times[self.start:]

    @property
    def t_tail(self) -> np.ndarray:
        return self.grid.tail_times

    @property
    def d(self) -> int:
        return self.y.shape[2]

    @property
    def m(self) -> int:
        return self.z.shape[2] // self.y.shape[2]


def _tail_integral(weights_tail, values_tail, t_tail):
    # (rows, d) trapezoid of weights * values over the tail nodes
    w = trapezoid_weights(t_tail)
    return np.einsum("rkd,k->rd", weights_tail[..., None] * values_tail, w)


def anticipation_integral(w_int, w_tail, v_int, v_tail, t_int, t_tail) -> np.ndarray:
    """``int_{t_k}^{T_tail} w_r v_r dr`` for every interior node ``k`` of the segment.

    ``w_*`` are ``(rows, nodes)`` weights, ``v_*`` are ``(rows, nodes, d)`` values.
    """
    inner = reverse_cumulative_trapezoid(w_int[..., None] * v_int, t_int)
    return inner + _tail_integral(w_tail, v_tail, t_tail)[:, None, :]


def _contract_z(nu, z, d):
    # nu: (nodes, m); z: (rows, nodes, d*m) -> (rows, nodes, d) with sum_j nu_j z_ij
    rows, nodes, dm = z.shape
    return np.einsum("rkij,kj->rki", z.reshape(rows, nodes, d, dm // d), nu)


# ---------------------------------------------------------------- payloads

@dataclass(frozen=True, eq=False)
class LinearModel:
    """Kernels of the linear family with their declared integral bounds."""

    mu_kernel: Callable
    nu_kernel: Callable
    C_mu: float
    C_nu: float
    l: Optional[Callable] = None
    m: int = 1

    def kernel_values(self, grid: TimeGrid):
        t = grid.times
        return eval_kernel(self.mu_kernel, t), eval_kernel(self.nu_kernel, t, (self.m,))

    def kernel_masses(self, grid: TimeGrid):
        """Quadrature of ``int_0^{T_tail} |mu|`` and ``int_0^{T_tail} |nu|^2``."""
        mu, nu = self.kernel_values(grid)
        w = grid.weights
        return float(np.abs(mu) @ w), float(np.sum(nu * nu, axis=1) @ w)

    def audit(self, grid: TimeGrid):
        mass_mu, mass_nu = self.kernel_masses(grid)
        for name, mass, bound in (("mu", mass_mu, self.C_mu), ("nu", mass_nu, self.C_nu)):
            if bound < 0 or mass > bound * (1 + AUDIT_RTOL) + 1e-300:
                raise KernelBoundViolation(
                    f"integrated {name} kernel {mass:.12g} exceeds declared bound {bound:.12g}")
        return mass_mu, mass_nu


@dataclass(frozen=True, eq=False)
class SupNormModel:
    """``phi(sup_{r>=s} |Y_r|)``, or the indicator form ``scale * Y_tau * 1{s <= tau}``."""

    phi: Optional[Callable] = None
    L_phi: Optional[float] = None
    tau: Optional[float] = None
    scale: Optional[float] = None

    @property
    def indicator(self) -> bool:
        return self.tau is not None


@dataclass(frozen=True, eq=False)
class ControlTables:
    """Control coefficients tabulated on a grid.

    ``mu`` is ``(|U|, nodes)``, ``sigma`` is ``(|U|, nodes, m)``, ``l`` is
    ``(|U|, nodes)`` and ``h`` the envelope ``(nodes,)``.
    """

    grid: TimeGrid
    U_grid: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    l: np.ndarray
    h: np.ndarray
    C: float

    @property
    def m(self) -> int:
        return self.sigma.shape[2]


@dataclass(frozen=True, eq=False)
class ControlFixedModel:
    tables: ControlTables
    index: np.ndarray  # (rows, nodes) indices into U_grid


@dataclass(frozen=True, eq=False)
class CustomModel:
    """``fn(future) -> (rows, nodes, d)``; ``instant_fn(z_k, node) -> (rows, d)`` optional."""

    fn: Callable
    instant_fn: Optional[Callable] = None


# ---------------------------------------------------------------- spec

@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    """A generator family together with its Lipschitz metadata.

    ``lipschitz_y`` and ``lipschitz_z`` are the pointwise constants of the
    Y-sup part and the weighted Z part; both default to ``L``.
    ``reads_solution=False`` marks a generator that ignores ``(Y, Z)``, in which
    case one Picard pass is exact.
    """

    family: str
    payload: object
    L: float
    beta: Optional[float] = None
    z_dependence: str = "none"
    driver: Optional[Callable] = None
    lipschitz_y: Optional[float] = None
    lipschitz_z: Optional[float] = None
    reads_solution: bool = True
    d: int = 1
    notes: tuple = ()
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown generator family {self.family!r}")
        if self.z_dependence not in Z_DEPENDENCE:
            raise ValueError(f"z_dependence must be one of {Z_DEPENDENCE}")
        if not self.L > 0:
            raise ValueError(f"Lipschitz constant must be positive, got {self.L}")
        if self.beta is None:
            object.__setattr__(self, "beta", 2.0 * self.L + 74.0)
        if self.beta < 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        for name in ("lipschitz_y", "lipschitz_z"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, float(self.L))

    # tabulations are cached per grid
    def _tab(self, grid: TimeGrid):
        tab = self._cache.get(grid)
        if tab is None:
            tab = {}
            if self.driver is not None:
                tab["driver"] = eval_kernel(self.driver, grid.interior_times, (self.d,))
            if self.family == "LinearAnticipating":
                mu, nu = self.payload.kernel_values(grid)
                tab["mu"], tab["nu"] = mu[None, :], nu
                tab["has_nu"] = bool(np.any(nu != 0.0))
            elif self.family == "ControlEsssup":
                t = self.payload
                tab["mu_max"], tab["mu_min"] = t.mu.max(axis=0), t.mu.min(axis=0)
            self._cache[grid] = tab
        return tab

    def anticipation(self, fut: Future) -> np.ndarray:
        """Pathwise future-dependent part plus driver, shape ``(rows, nodes, d)``."""
        grid, s, n = fut.grid, fut.start, fut.grid.n_steps
        tab = self._tab(grid)
        fam = self.family
        if fam == "LinearAnticipating":
            mu = tab["mu"]
            out = anticipation_integral(mu[:, s:n + 1], mu[:, n:], fut.y, fut.xi, fut.t_int, fut.t_tail)
            if tab["has_nu"]:
                nu = tab["nu"]
                zi = _contract_z(nu[s:n + 1], fut.z, fut.d)
                zt = _contract_z(nu[n:], fut.eta, fut.d)
                ones = np.ones((1, grid.n_nodes))
                out = out + anticipation_integral(ones[:, s:n + 1], ones[:, n:], zi, zt, fut.t_int, fut.t_tail)
        elif fam == "SupNorm":
            out = self._supnorm(fut)
        elif fam == "ControlFixed":
            p = self.payload
            mu_u = p.tables.mu[p.index, np.arange(grid.n_nodes)]
            out = anticipation_integral(mu_u[:, s:n + 1], mu_u[:, n:], fut.y, fut.xi, fut.t_int, fut.t_tail)
        elif fam == "ControlEsssup":
            hi, lo = tab["mu_max"], tab["mu_min"]

            def best(v, a, b):
                # max_u mu(r,u) v = mu_max v+ - mu_min v-
                return hi[a:b][None, :, None] * np.maximum(v, 0.0) - lo[a:b][None, :, None] * np.maximum(-v, 0.0)

            inner = reverse_cumulative_trapezoid(best(fut.y, s, n + 1), fut.t_int)
            w = trapezoid_weights(fut.t_tail)
            tail = np.einsum("rkd,k->rd", best(fut.xi, n, grid.n_nodes), w)
            out = inner + tail[:, None, :]
        else:
            out = np.asarray(self.payload.fn(fut), dtype=float)
        if "driver" in tab:
            out = out + tab["driver"][None, s:]
        return out

    def _supnorm(self, fut: Future) -> np.ndarray:
        p: SupNormModel = self.payload
        grid = fut.grid
        if p.indicator:
            k_tau = int(round(p.tau / grid.dt))
            out = np.zeros(fut.y.shape)
            if fut.start <= k_tau:
                j = k_tau - fut.start
                out[:, : j + 1] = p.scale * fut.y[:, j][:, None, :]
            return out
        mags = np.sqrt(np.sum(fut.y * fut.y, axis=2))
        run = np.maximum.accumulate(mags[:, ::-1], axis=1)[:, ::-1]
        tail_sup = np.sqrt(np.sum(fut.xi * fut.xi, axis=2)).max(axis=1)
        sup = np.maximum(run, tail_sup[:, None])
        val = np.asarray(p.phi(sup), dtype=float)
        return np.repeat(val[..., None], fut.d, axis=2)

    def instant(self, z_k: np.ndarray, node: int) -> Optional[np.ndarray]:
        """Current-Z part at ``node`` for ``z_k`` of shape ``(rows, d*m)``; ``None`` if absent."""
        fam = self.family
        if fam == "ControlFixed":
            t = self.payload.tables
            idx = self.payload.index[:, node]
            sig = t.sigma[idx, node]                       # (rows_u, m)
            return (np.sum(sig * z_k, axis=1) + t.l[idx, node])[:, None]
        if fam == "ControlEsssup":
            t = self.payload
            best = None
            for u in range(len(t.U_grid)):
                v = z_k @ t.sigma[u, node] + t.l[u, node]
                best = v if best is None else np.maximum(best, v)
            return best[:, None]
        if fam == "Custom" and self.payload.instant_fn is not None:
            return np.asarray(self.payload.instant_fn(z_k, node), dtype=float)
        return None

    def has_instant(self) -> bool:
        return self.family in ("ControlFixed", "ControlEsssup") or (
            self.family == "Custom" and self.payload.instant_fn is not None)

    def evaluate(self, fut: Future) -> np.ndarray:
        """Pathwise generator values at nodes ``start..n_steps``, shape ``(rows, nodes, d)``."""
        out = self.anticipation(fut)
        if self.has_instant():
            inst = np.stack([self.instant(fut.z[:, j], k) for j, k in enumerate(fut.nodes)], axis=1)
            out = out + inst
        return out


# ---------------------------------------------------------------- constructors

def linear_generator(model: LinearModel, grid: TimeGrid, beta: Optional[float] = None, d: int = 1) -> GeneratorSpec:
    """Linear family; audits the declared kernel bounds on ``grid``.

    The pointwise constants are ``C_mu`` for the Y part and ``sqrt(C_nu)`` for
    the weighted Z part (Cauchy-Schwarz), so ``L = C_mu + sqrt(C_nu)``.
    """
    model.audit(grid)
    mu, nu = model.kernel_values(grid)
    has_mu, has_nu = bool(np.any(mu != 0)), bool(np.any(nu != 0))
    ly, lz = float(model.C_mu), float(np.sqrt(model.C_nu))
    L = ly + lz
    notes = ()
    if L == 0:
        L = 1.0
        notes = ("zero kernels: any positive L is valid, L=1 used",)
    return GeneratorSpec(
        "LinearAnticipating", model, L, beta=beta,
        z_dependence="future_path" if has_nu else "none",
        driver=model.l, lipschitz_y=ly, lipschitz_z=lz,
        reads_solution=has_mu or has_nu, d=d, notes=notes)


def zero_generator(d: int = 1, m: int = 1) -> GeneratorSpec:
    zero = lambda t: np.zeros_like(t)
    model = LinearModel(zero, zero, 0.0, 0.0, m=m)
    return GeneratorSpec("LinearAnticipating", model, 1.0, z_dependence="none",
                         lipschitz_y=0.0, lipschitz_z=0.0, reads_solution=False, d=d)


def supnorm_generator(phi: Callable, L_phi: float, beta=None, driver=None) -> GeneratorSpec:
    if not (np.isfinite(L_phi) and L_phi > 0):
        raise ValueError(f"L_phi must be finite and positive, got {L_phi}")
    return GeneratorSpec("SupNorm", SupNormModel(phi=phi, L_phi=L_phi), L_phi, beta=beta,
                         driver=driver, lipschitz_z=0.0)


def indicator_generator(tau: float, scale: float, grid: TimeGrid, beta=None) -> GeneratorSpec:
    """``f(t, y) = scale * E[y_tau | F_t] 1{t <= tau}``; ``tau`` is rounded to a node."""
    if not 0 < tau < grid.T:
        raise ValueError(f"tau must lie in (0, T), got {tau}")
    if not scale > 0:
        raise ValueError("scale must be positive")
    return GeneratorSpec("SupNorm", SupNormModel(tau=tau, scale=scale), scale, beta=beta,
                         lipschitz_z=0.0)


def custom_generator(fn: Callable, L: float, z_dependence: str, reads_solution: bool = True,
                     instant_fn=None, beta=None, driver=None, d: int = 1) -> GeneratorSpec:
    return GeneratorSpec("Custom", CustomModel(fn, instant_fn), L, beta=beta, z_dependence=z_dependence,
                         driver=driver, reads_solution=reads_solution, d=d)


# ---------------------------------------------------------------- operations

def _split_future(grid, node, y_future, z_future):
    n, last = grid.n_steps, grid.n_nodes - 1
    for name, p in (("y_future", y_future), ("z_future", z_future)):
        if p.start > node or p.stop < last:
            raise SegmentTooShort(f"{name} covers [{p.start}, {p.stop}], need [{node}, {last}]")
    if node > n:
        raise SegmentTooShort(f"node {node} lies past the horizon")
    a = node - y_future.start
    b = node - z_future.start
    yv, zv = y_future.values, z_future.values
    return Future(grid, node, yv[:, a:a + n - node + 1], zv[:, b:b + n - node + 1],
                  yv[:, n - y_future.start:], zv[:, n - z_future.start:])


def eval_generator(spec: GeneratorSpec, node: int, y_future, z_future, cond=None) -> np.ndarray:
    """Projected generator value at ``node`` per path, shape ``(n_paths, d)``.

    ``cond(values, node)`` realises the conditional expectation; ``None`` is the
    deterministic passthrough (values must be identical across paths).
    """
    grid = y_future.grid
    fut = _split_future(grid, node, y_future, z_future)
    val = spec.evaluate(fut)[:, 0]
    if cond is not None:
        val = cond(val, node)
    elif val.shape[0] > 1 and not np.all(val == val[:1]):
        if node != 0:
            raise ProjectionFailure("passthrough projection received path-dependent values")
        val = val.mean(axis=0, keepdims=True)
    return np.broadcast_to(val, (y_future.n_paths, val.shape[1])).copy()


def tail_mass_bound(spec: GeneratorSpec, grid: TimeGrid) -> float:
    """Kernel mass left beyond ``T_tail`` according to the declared bounds."""
    fam = spec.family
    if fam == "LinearAnticipating":
        mass_mu, mass_nu = spec.payload.kernel_masses(grid)
        return max(0.0, spec.payload.C_mu - mass_mu) + max(0.0, spec.payload.C_nu - mass_nu)
    if fam in ("ControlFixed", "ControlEsssup"):
        t = spec.payload.tables if fam == "ControlFixed" else spec.payload
        return max(0.0, t.C - float(t.h @ grid.weights))
    raise UnboundedFamily(f"{fam} generators carry no kernel bound")


@dataclass
class H1Report:
    metric: str
    n_probes: int
    max_ratio: float
    max_ratio_y: float
    max_ratio_z: float
    L: float
    lipschitz_y: float
    lipschitz_z: float

    @property
    def passed(self) -> bool:
        return self.max_ratio <= 1.0 + 1e-6


def _ratio(num, den):
    num = np.abs(num)
    out = np.zeros_like(num)
    pos = den > 0
    out[pos] = num[pos] / den[pos]
    out[~pos & (num > 1e-14)] = np.inf
    return out


def check_h1_empirically(spec: GeneratorSpec, grid: TimeGrid, n_probes: int = 1000, seed: int = 0,
                         metric: str = "sup", m: int = 1) -> H1Report:
    """Randomised audit of the Lipschitz bound on deterministic probe pairs.

    At every interior node ``s`` the generator gap is compared with
    ``L_y * Ygap(s) + L_z * sqrt(int_s^{T_tail} e^{beta r} |dZ_r|^2 dr)``, where
    ``Ygap`` is the sup of ``|dY|`` over ``[s, T_tail]`` (``metric="sup"``) or the
    unweighted ``L^2`` norm of ``dY`` over ``[s, T_tail]`` (``metric="l2"``).
    For generators reading only the current ``Z`` the Z term is ``L_z |dZ_s|``.
    Half the probes are smooth random walks, the rest carry a single spike.
    """
    if metric not in ("sup", "l2"):
        raise ValueError("metric must be 'sup' or 'l2'")
    rng = np.random.default_rng(seed)
    d, n, N = spec.d, grid.n_steps, grid.n_nodes
    if spec.family == "ControlFixed" or spec.family == "ControlEsssup":
        t = spec.payload.tables if spec.family == "ControlFixed" else spec.payload
        m = t.m
    elif spec.family == "LinearAnticipating":
        m = spec.payload.m
    P = n_probes

    def probes():
        walk = np.cumsum(rng.normal(size=(P, N, d)), axis=1) / np.sqrt(N)
        spikes = np.zeros((P, N, d))
        where = rng.integers(0, N, size=P)
        if spec.family == "SupNorm" and spec.payload.indicator:
            where[: P // 4] = int(round(spec.payload.tau / grid.dt))
        spikes[np.arange(P), where] = rng.normal(scale=3.0, size=(P, d))
        half = np.arange(P) < P // 2
        return np.where(half[:, None, None], walk, spikes)

    dy = probes()
    y2 = rng.normal(size=(P, 1, d)) + probes()
    y1 = y2 + dy
    dz = probes().repeat(m, axis=2) * rng.normal(size=(1, 1, d * m))
    z2 = probes().repeat(m, axis=2)
    z1 = z2 + dz

    def fut(y, z):
        return Future(grid, 0, y[:, :n + 1], z[:, :n + 1], y[:, n:], z[:, n:])

    f1 = spec.evaluate(fut(y1, z1))
    f2 = spec.evaluate(fut(y2, z2))
    gap = np.sqrt(np.sum((f1 - f2) ** 2, axis=2))[:, :n]     # (P, n) nodes 0..n-1
    t = grid.times
    ay = np.sqrt(np.sum(dy * dy, axis=2))
    if metric == "sup":
        ygap = np.maximum.accumulate(ay[:, ::-1], axis=1)[:, ::-1][:, :n]
    else:
        ygap = np.sqrt(reverse_cumulative_trapezoid(ay * ay, t)[:, :n])
    if spec.z_dependence == "current":
        zgap = np.sqrt(np.sum(dz * dz, axis=2))[:, :n]
    else:
        ez = np.sum(dz * dz, axis=2) * (np.exp(spec.beta * t) if spec.beta else 1.0)
        zgap = np.sqrt(reverse_cumulative_trapezoid(ez, t)[:, :n])
    # split the gap into the parts that read Y and Z
    fy = spec.evaluate(fut(y1, z2)) - f2
    fz = spec.evaluate(fut(y2, z1)) - f2
    gy = np.sqrt(np.sum(fy ** 2, axis=2))[:, :n]
    gz = np.sqrt(np.sum(fz ** 2, axis=2))[:, :n]
    ly, lz = spec.lipschitz_y, spec.lipschitz_z
    combined = _ratio(gap, ly * ygap + lz * zgap)
    ry = _ratio(gy, ly * ygap)
    rz = _ratio(gz, lz * zgap)
    return H1Report(metric, P, float(combined.max()), float(ry.max()), float(rz.max()),
                    spec.L, ly, lz)


# ---------------------------------------------------------------- named kernels

def exponential_kernel(a: float = 1.0, scale: float = 1.0):
    """``scale * exp(-a r)`` with its exact integral ``scale / a`` over ``[0, inf)``."""
    fn = lambda t: scale * np.exp(-a * np.asarray(t, dtype=float))
    fn.integral_abs = abs(scale) / a
    fn.integral_sq = scale * scale / (2 * a)
    fn.description = f"{scale:g}*exp(-{a:g} r)"
    return fn


def constant_kernel(c: float = 0.0):
    fn = lambda t: np.full(np.shape(t), float(c))
    fn.description = f"{c:g}"
    fn.integral_abs = 0.0 if c == 0 else np.inf
    fn.integral_sq = 0.0 if c == 0 else np.inf
    return fn


def polyexp_kernel(p: int = 1, a: float = 1.0, scale: float = 1.0):
    """``scale * r^p exp(-a r)``; integral over ``[0, inf)`` is ``scale p! / a^{p+1}``."""
    from math import factorial
    fn = lambda t: scale * np.asarray(t, dtype=float) ** p * np.exp(-a * np.asarray(t, dtype=float))
    fn.integral_abs = abs(scale) * factorial(p) / a ** (p + 1)
    fn.integral_sq = scale * scale * factorial(2 * p) / (2 * a) ** (2 * p + 1)
    fn.description = f"{scale:g}*r^{p}*exp(-{a:g} r)"
    return fn


NAMED_KERNELS = {"exponential": exponential_kernel, "constant": constant_kernel, "polyexp": polyexp_kernel}


def named_kernel(name: str, **params):
    if name not in NAMED_KERNELS:
        raise ValueError(f"unknown kernel {name!r}; choose from {sorted(NAMED_KERNELS)}")
    return NAMED_KERNELS[name](**params)
