import numpy as np
import pytest

from iabsde.analysis import (
    apriori_diagnostic, check_comparison, check_strict_comparison, convergence_report,
)
from iabsde.core import TerminalData, make_grid
from iabsde.duality import LinearInstance, closed_form_y0
from iabsde.errors import BundleMismatch, GridMismatch, TooFewIterations
from iabsde.generators import LinearModel, constant_kernel, exponential_kernel, linear_generator, zero_generator
from iabsde.instances import d1_instance, d2_pair
from iabsde.solver import picard_solve
from iabsde.stochastic import BrownianBundle

G = make_grid(1.0, 5.0, 200, 400)


def _solve(inst, g=G):
    return picard_solve(inst.generator(g), inst.terminal(g), g)


def _c(v):
    return lambda t: np.full(np.shape(t), float(v))


def test_comparison_self():
    s = _solve(d1_instance())
    rep = check_comparison(s, s)
    assert rep.max_violation == 0.0 and rep.verdict == "pass"


def test_comparison_d2():
    a, b = (_solve(i) for i in d2_pair())
    rep = check_comparison(a, b, 0.0)
    assert rep.verdict == "pass" and rep.max_violation_path == 0.0 and rep.n_nodes_checked == G.n_nodes
    assert check_comparison(b, a, 0.0).verdict == "fail"


def test_comparison_mismatch():
    a = _solve(d1_instance())
    with pytest.raises(GridMismatch):
        check_comparison(a, _solve(d1_instance(), make_grid(1.0, 5.0, 100, 400)))
    g = make_grid(1.0, 2.0, 10, 10)
    term = TerminalData.deterministic(g, _c(1.0), n_paths=50)
    s1 = picard_solve(zero_generator(), term, g, BrownianBundle(g, 50, 1, 1))
    s2 = picard_solve(zero_generator(), term, g, BrownianBundle(g, 50, 1, 2))
    with pytest.raises(BundleMismatch):
        check_comparison(s1, s2)


def test_strict_identical():
    inst = d1_instance()
    rep = check_strict_comparison(inst.generator(G), inst.terminal(G), inst.generator(G), inst.terminal(G), G,
                                  expect="equal")
    assert rep.gap == 0.0 and rep.verdict == "pass"


def test_strict_terminal_gap():
    m = LinearModel(exponential_kernel(), constant_kernel(0.0), 1.0, 0.0)
    hi, lo = LinearInstance(m, _c(1.0)), LinearInstance(m, _c(0.5))
    rep = check_strict_comparison(hi.generator(G), hi.terminal(G), lo.generator(G), lo.terminal(G), G,
                                  expect="strict", expected_gap=0.5)
    assert rep.verdict == "pass" and rep.gap > 0.5


def test_strict_driver_gap_with_memory():
    # with mu > 0 a driver gap delta is amplified: the Y_0 gap equals delta * int_0^T X_s ds
    m = LinearModel(exponential_kernel(), constant_kernel(0.0), 1.0, 0.0)
    one, two = LinearInstance(m, _c(1.0), None, _c(0.1)), LinearInstance(m, _c(1.0))
    diff, _ = closed_form_y0(LinearInstance(m, _c(0.0), None, _c(0.1)), G, 1, 0)
    rep = check_strict_comparison(one.generator(G), one.terminal(G), two.generator(G), two.terminal(G), G,
                                  expect="exact", expected_gap=diff, tol=5e-3 * diff)
    assert rep.verdict == "pass" and rep.gap > 0.1


def test_apriori_zero_data():
    g = make_grid(1.0, 2.0, 10, 10)
    term = TerminalData.deterministic(g, _c(0.0))
    sol = picard_solve(zero_generator(), term, g)
    rep = apriori_diagnostic(sol, term, zero_generator(), g)
    assert rep.lhs == 0.0 and rep.rhs == 0.0 and rep.ratio is None


def test_apriori_d1_components():
    inst = d1_instance()
    spec, term = inst.generator(G), inst.terminal(G)
    rep = apriori_diagnostic(picard_solve(spec, term, G), term, spec, G)
    assert rep.rhs_xi == 1.0 and rep.rhs_eta == 0.0 and rep.rhs_driver == 0.0
    assert rep.sup_y == pytest.approx(1.6774 ** 2, rel=5e-3)
    assert np.isfinite(rep.ratio)


def test_convergence_geometric():
    hist = [(i, 0.5 ** i, 0.0) for i in range(1, 12)]
    rep = convergence_report(hist, G, 1.0)
    assert rep.geometric and not rep.factorial and rep.label == "geometric, not factorial"


def test_convergence_factorial_synthetic():
    from math import factorial
    hist = [(i, 2.0 ** i / factorial(i), 0.0) for i in range(1, 12)]
    rep = convergence_report(hist, G, 1.0)
    assert rep.factorial and rep.fitted_K == pytest.approx(2.0, rel=1e-6)


def test_convergence_d1():
    rep = convergence_report(_solve(d1_instance()).residual_history, G, 1.0)
    assert rep.eventually_decreasing and rep.factorial


def test_convergence_too_short():
    with pytest.raises(TooFewIterations):
        convergence_report([(1, 0.3, 0.0)], G, 1.0)
