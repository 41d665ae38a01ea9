import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iabsde.control import ControlPaths, ControlProblem
from iabsde.core import make_grid
from iabsde.errors import ControlOutOfSet, KernelEvaluationFailure, RangeMismatch
from iabsde.stochastic import BrownianBundle, simulate_brownian, simulate_controlled_sdde, simulate_isdde
from oracles import memory_ode_mean

zero = lambda t: np.zeros_like(t)
one = lambda t: np.ones_like(t)


def test_increment_variance():
    g = make_grid(1.0, 5.0, 100, 400)
    b = simulate_brownian(g, 100_000, 1, 7)
    var = b.increments[:, :, 0].var(axis=0)
    assert np.all(np.abs(var / 0.01 - 1) < 0.05)
    mean = b.increments[:, :, 0].mean(axis=0)
    assert np.all(np.abs(mean) < 5 * np.sqrt(0.01 / 100_000))


def test_bundle_bit_identical():
    g = make_grid(1.0, 2.0, 50, 20)
    a = simulate_brownian(g, 1000, 2, 123)
    b = simulate_brownian(g, 1000, 2, 123)
    assert np.array_equal(a.increments, b.increments)
    assert np.array_equal(a.tail_increments(), b.tail_increments())
    c = simulate_brownian(g, 1000, 2, 124)
    assert not np.array_equal(a.increments, c.increments)


def test_single_path():
    g = make_grid(1.0, 2.0, 10, 10)
    b = simulate_brownian(g, 1, 1, 0)
    assert b.increments.shape == (1, 10, 1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**63), st.integers(0, 37), st.integers(0, 37))
def test_partition_invariance(seed, cut_a, cut_b):
    g = make_grid(1.0, 2.0, 8, 8)
    b = BrownianBundle(g, 37, 2, seed)
    lo, hi = sorted((cut_a, cut_b))
    pieces = [b.block(0, 16, 0, lo), b.block(0, 16, lo, hi), b.block(0, 16, hi, 37)]
    whole = np.concatenate(pieces, axis=0)
    assert np.array_equal(whole[:, :8], b.increments)
    assert np.array_equal(whole[:, 8:], b.tail_increments())
    assert np.array_equal(b.block(3, 5, lo, hi), whole[lo:hi, 3:5])


def test_tail_variance():
    g = make_grid(1.0, 3.0, 10, 40)
    tail = BrownianBundle(g, 50_000, 1, 3).tail_increments()[:, :, 0]
    assert np.all(np.abs(tail.var(axis=0) / 0.05 - 1) < 0.05)


def test_fresh_steps_keep_prefix():
    g = make_grid(1.0, 2.0, 20, 5)
    b = BrownianBundle(g, 100, 1, 1)
    c = b.with_fresh_steps(7, 99)
    assert np.array_equal(b.increments[:, :7], c.increments[:, :7])
    assert not np.any(b.increments[:, 7:] == c.increments[:, 7:])
    assert np.array_equal(b.W[:, :8], c.W[:, :8])


def test_isdde_no_dynamics():
    g = make_grid(1.0, 2.0, 50, 10)
    X = simulate_isdde(zero, zero, g, 10)
    assert X.compact and X.deterministic_flag
    assert np.all(X.values == 1.0)
    assert X.start == 10 and X.stop == 50


@pytest.mark.parametrize("start", [0, 300])
def test_isdde_cosh(start):
    g = make_grid(1.0, 2.0, 1000, 10)
    X = simulate_isdde(one, zero, g, start)
    t = g.interior_times[start:]
    exact = np.cosh(t - t[0])
    err = np.max(np.abs(X.values[0, :, 0] / exact - 1))
    assert X.values[0, 0, 0] == 1.0
    assert err < g.dt


def test_isdde_mean_preserved():
    g = make_grid(1.0, 2.0, 50, 10)
    b = BrownianBundle(g, 100_000, 1, 7)
    X = simulate_isdde(zero, lambda t: np.full_like(t, 0.8), g, 0, b).values[:, :, 0]
    assert np.all(X[:, 0] == 1.0)
    se = X.std(axis=0, ddof=1) / np.sqrt(X.shape[0])
    assert np.all(np.abs(X.mean(axis=0) - 1.0) <= 3 * se + 1e-15)


def test_isdde_errors():
    g = make_grid(1.0, 2.0, 10, 10)
    with pytest.raises(RangeMismatch):
        simulate_isdde(zero, one, g, 0, None)

    def broken(t):
        raise ZeroDivisionError("boom")
    with pytest.raises(KernelEvaluationFailure):
        simulate_isdde(broken, zero, g, 0)
    with pytest.raises(KernelEvaluationFailure):
        simulate_isdde(lambda t: np.full_like(t, np.nan), zero, g, 0)


def _problem(mu, sigma, U=(0.0, 1.0)):
    return ControlProblem(mu=mu, sigma=sigma, l=lambda s, u: np.zeros(np.shape(s)),
                          Q=lambda t: np.ones_like(t), U_grid=U, C=2.0, h=lambda s: np.ones(np.shape(s)))


def test_controlled_no_dynamics():
    g = make_grid(1.0, 2.0, 20, 10)
    pr = _problem(lambda s, u: np.zeros(np.shape(s)), lambda s, u: np.zeros(np.shape(s)))
    X = simulate_controlled_sdde(pr, ControlPaths.constant(pr, 1.0, g), g)
    assert np.all(X.values == 1.0)


def test_controlled_cosh():
    g = make_grid(1.0, 2.0, 1000, 10)
    pr = _problem(lambda s, u: np.ones(np.shape(s)), lambda s, u: np.zeros(np.shape(s)))
    X = simulate_controlled_sdde(pr, ControlPaths.constant(pr, 0.0, g), g).values[0, :, 0]
    assert np.max(np.abs(X / np.cosh(g.interior_times) - 1)) < g.dt


def test_controlled_mean_matches_ode():
    g = make_grid(1.0, 2.0, 200, 10)
    pr = _problem(lambda s, u: (0.2 + 0.3 * u) * np.exp(-s), lambda s, u: np.full(np.shape(s), 0.1))
    b = BrownianBundle(g, 100_000, 1, 5)
    X = simulate_controlled_sdde(pr, ControlPaths.constant(pr, 1.0, g), g, b).values[:, :, 0]
    oracle = memory_ode_mean(lambda s: 0.5 * np.exp(-s), 1.0)
    t = g.interior_times
    m_exact = oracle(t)[0]
    se = X.std(axis=0, ddof=1) / np.sqrt(X.shape[0])
    # Euler bias of the mean is O(dt); well below the Monte Carlo band here
    assert np.all(np.abs(X.mean(axis=0) - m_exact) <= 3 * se + 2 * g.dt * 0.5)


def test_controlled_out_of_set():
    g = make_grid(1.0, 2.0, 10, 10)
    pr = _problem(lambda s, u: np.zeros(np.shape(s)), lambda s, u: np.zeros(np.shape(s)))
    with pytest.raises(ControlOutOfSet):
        ControlPaths.from_values(pr, np.full((1, g.n_nodes), 0.5), g)
    with pytest.raises(ControlOutOfSet):
        ControlPaths(g, pr.U_grid, np.full((1, g.n_nodes), 2))


def test_controlled_noise_needs_bundle():
    g = make_grid(1.0, 2.0, 10, 10)
    pr = _problem(lambda s, u: np.zeros(np.shape(s)), lambda s, u: np.full(np.shape(s), 0.1))
    with pytest.raises(RangeMismatch):
        simulate_controlled_sdde(pr, ControlPaths.constant(pr, 1.0, g), g)
