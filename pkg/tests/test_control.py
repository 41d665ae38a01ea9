import numpy as np
import pytest

from iabsde.control import (
    ControlPaths, ControlProblem, esssup_generator, extract_control, fixed_control_generator,
    forward_cost, gronwall_rho, random_adapted_control, solve_fixed_control, solve_value_function,
)
from iabsde.core import ProcessPaths, make_grid
from iabsde.errors import ControlProblemInvalid, EmptyControlGrid, MissingModulus
from iabsde.generators import LinearModel, constant_kernel, eval_generator, exponential_kernel, linear_generator
from iabsde.instances import c1_problem, c2_problem
from iabsde.solver import PicardConfig
from iabsde.stochastic import BrownianBundle

G = make_grid(1.0, 5.0, 200, 200)
zeros = lambda s, u: np.zeros(np.shape(s))


def _prob(mu=zeros, sigma=zeros, l=zeros, Q=1.0, U=(0.0, 1.0), C=1.0, **kw):
    return ControlProblem(mu=mu, sigma=sigma, l=l, Q=lambda t: np.full(np.shape(t), float(Q)), U_grid=U,
                          C=C, h=lambda s: np.exp(-np.asarray(s, dtype=float)), **kw)


def _eval(spec, s, y, z):
    yp = ProcessPaths.constant(G, y) if np.isscalar(y) else y
    zp = ProcessPaths.constant(G, z) if np.isscalar(z) else z
    return eval_generator(spec, s, yp, zp)[0, 0]


def test_fixed_generator_zero():
    pr = _prob(mu=lambda s, u: u * np.exp(-s))
    assert _eval(fixed_control_generator(pr, 1.0, G), 50, 0.0, 0.0) == 0.0


def test_fixed_generator_matches_linear_bitwise():
    pr = _prob(mu=lambda s, u: u * np.exp(-s))
    lin = linear_generator(LinearModel(exponential_kernel(), constant_kernel(0.0), 1.0, 0.0), G)
    fix = fixed_control_generator(pr, 1.0, G)
    y = ProcessPaths.deterministic(G, lambda t: 1 + 0.3 * np.sin(3 * t))
    for s in (0, 77, 199):
        assert _eval(fix, s, y, 0.0) == _eval(lin, s, y, 0.0)


def test_fixed_generator_z_term():
    pr = _prob(sigma=lambda s, u: np.full(np.shape(s), 0.1))
    assert _eval(fixed_control_generator(pr, 0.0, G), 10, 0.0, 2.0) == pytest.approx(0.2, abs=1e-16)


def test_esssup_singleton_bitwise():
    pr = _prob(mu=lambda s, u: (0.2 + 0.3 * u) * np.exp(-s), sigma=lambda s, u: np.full(np.shape(s), 0.1),
               l=lambda s, u: np.full(np.shape(s), 0.3 * (1 - u)), U=(0.5,))
    y = ProcessPaths.deterministic(G, lambda t: np.cos(4 * t))
    z = ProcessPaths.deterministic(G, lambda t: np.sin(2 * t))
    for s in (0, 120):
        assert _eval(esssup_generator(pr, G), s, y, z) == _eval(fixed_control_generator(pr, 0.5, G), s, y, z)
    a = solve_value_function(pr, G)
    b = solve_fixed_control(pr, 0.5, G)
    assert np.array_equal(a.Y.values, b.Y.values)


def test_esssup_dominant_integral():
    pr = c1_problem()
    y = ProcessPaths.deterministic(G, lambda t: 1 + t)
    for s in (0, 100):
        assert _eval(esssup_generator(pr, G), s, y, 0.0) == _eval(fixed_control_generator(pr, 1.0, G), s, y, 0.0)


def test_esssup_instant_max():
    pr = _prob(sigma=lambda s, u: np.full(np.shape(s), 0.2 * u - 0.1))
    assert _eval(esssup_generator(pr, G), 30, 0.0, 1.0) == pytest.approx(0.1, abs=1e-16)
    assert _eval(esssup_generator(pr, G), 30, 0.0, -1.0) == pytest.approx(0.1, abs=1e-16)


def test_esssup_sign_split():
    pr = c2_problem()
    y = ProcessPaths.constant(G, -1.0)
    # Y < 0: the smallest kernel (u = 0) is the maximiser of the integrand
    assert _eval(esssup_generator(pr, G), 0, y, 0.0) == pytest.approx(
        _eval(fixed_control_generator(pr, 0.0, G), 0, y, 0.0))


def test_value_trivial():
    sol = solve_value_function(_prob(Q=2.0), G)
    assert np.all(sol.Y.values == 2.0)


def test_c1_value_equals_dominant_control():
    v = solve_value_function(c1_problem(), G)
    u1 = solve_fixed_control(c1_problem(), 1.0, G)
    assert abs(v.y0 - u1.y0) <= 1e-6
    assert np.all(v.Y.values >= 0)


def test_c2_dominates_constants():
    pr = c2_problem()
    v = solve_value_function(pr, G)
    consts = [solve_fixed_control(pr, u, G).y0 for u in pr.U_grid]
    assert v.y0 >= max(consts)


def test_monotone_refinement():
    coarse = solve_value_function(_prob(mu=lambda s, u: (0.2 + 0.3 * u) * np.exp(-s),
                                        l=lambda s, u: np.full(np.shape(s), 0.3 * (1 - u))), G).y0
    fine = solve_value_function(c2_problem(), G).y0
    assert fine >= coarse - 1e-12


def test_extract_c1():
    pr = c1_problem()
    ex = extract_control(pr, solve_value_function(pr, G), 1e-3)
    assert np.all(ex.u.values == 1.0)
    assert ex.rho == pytest.approx(np.e ** 2) and ex.eps_grid == 0.0


def test_extract_singleton():
    pr = _prob(mu=lambda s, u: u * np.exp(-s), U=(0.7,))
    ex = extract_control(pr, solve_value_function(pr, G), 1e-3)
    assert np.all(ex.u.values == 0.7)


def test_rho_value():
    assert gronwall_rho(1.0, 1.0) == pytest.approx(7.389056, rel=1e-6)


def test_missing_modulus():
    pr = _prob(mu=lambda s, u: u * np.exp(-s), U_interval=(0.0, 1.0))
    with pytest.raises(MissingModulus):
        extract_control(pr, solve_value_function(pr, G), 1e-3)
    pr2 = _prob(mu=lambda s, u: u * np.exp(-s), U_interval=(0.0, 1.0), modulus=lambda d: 2 * d)
    ex = extract_control(pr2, solve_value_function(pr2, G), 1e-3)
    assert ex.eps_grid == pytest.approx(1.0)


def test_invalid_problems():
    with pytest.raises(EmptyControlGrid):
        _prob(U=())
    with pytest.raises(ControlProblemInvalid):
        _prob(mu=lambda s, u: -np.exp(-s)).tables(G)
    with pytest.raises(ControlProblemInvalid):
        _prob(l=lambda s, u: np.full(np.shape(s), 5.0)).tables(G)


def test_forward_trivial():
    assert forward_cost(_prob(Q=3.0), 1.0, G) == (3.0, 0.0)


def test_forward_backward_noise_free():
    pr = _prob(mu=lambda s, u: (0.2 + 0.3 * u) * np.exp(-s), l=lambda s, u: np.full(np.shape(s), 0.3 * (1 - u)),
               U=(0.0, 0.5, 1.0))
    g = make_grid(1.0, 5.0, 1000, 1000)
    for u in pr.U_grid:
        J, se = forward_cost(pr, u, g)
        assert se == 0.0
        assert abs(J / solve_fixed_control(pr, u, g).y0 - 1) < 1e-3


def test_positivity_value():
    v = solve_value_function(c2_problem(), G)
    assert v.Y.values.min() >= 0


def test_freeze_modes_agree():
    pr = c2_problem()
    a = solve_value_function(pr, G, cfg=PicardConfig(freeze_mode="freeze_both"))
    b = solve_value_function(pr, G, cfg=PicardConfig(freeze_mode="freeze_y_only"))
    assert abs(a.y0 - b.y0) < 1e-10


def test_random_control_adapted():
    g = make_grid(1.0, 5.0, 50, 50)
    b = BrownianBundle(g, 200, 1, 3)
    u = random_adapted_control(c2_problem(), g, b, 11)
    fresh = b.with_fresh_steps(20, 99)
    v = random_adapted_control(c2_problem(), g, fresh, 11)
    assert np.array_equal(u.index[:, :21], v.index[:, :21])
    assert set(np.unique(u.values)) <= set(c2_problem().U_grid)
    assert isinstance(u, ControlPaths) and not u.compact
