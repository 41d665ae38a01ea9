import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iabsde.core import make_grid
from iabsde.duality import (
    LinearInstance, closed_form_y0, closed_form_yt_deterministic, duality_gap, refinement_budget,
)
from iabsde.errors import StochasticDataRejected
from iabsde.generators import LinearModel, constant_kernel, exponential_kernel
from iabsde.instances import d1_instance, s1_instance
from oracles import d1_fixed_point

G = make_grid(1.0, 5.0, 1000, 4000)
ZERO = constant_kernel(0.0)


def _c(v):
    return lambda t: np.full(np.shape(t), float(v))


def test_trivial_instance():
    inst = LinearInstance(LinearModel(ZERO, ZERO, 0.0, 0.0), _c(2.0))
    est, se = closed_form_y0(inst, G, 1000, 1)
    assert est == 2.0 and se == 0.0


def test_d1_closed_form_against_oracle():
    t, Y = d1_fixed_point()
    est, se = closed_form_y0(d1_instance(), G, 1, 0)
    assert se == 0.0
    assert abs(est / Y[0] - 1) < 1e-3
    mid = closed_form_yt_deterministic(d1_instance(), G, 500)
    assert abs(mid / Y[5000] - 1) < 1e-3


def test_conditional_at_horizon():
    assert closed_form_yt_deterministic(d1_instance(), G, G.n_steps) == 1.0


def test_conditional_constant_driver():
    g = make_grid(1.0, 2.0, 100, 10)
    inst = LinearInstance(LinearModel(ZERO, ZERO, 0.0, 0.0), _c(0.0), None, _c(1.0))
    for k in (0, 37, 100):
        assert closed_form_yt_deterministic(inst, g, k) == pytest.approx(1.0 - g.times[k], abs=1e-13)


def test_conditional_rejects_noise():
    with pytest.raises(StochasticDataRejected):
        closed_form_yt_deterministic(s1_instance(), G, 10)


def test_gap_zero_instance():
    inst = LinearInstance(LinearModel(ZERO, ZERO, 0.0, 0.0), _c(0.0))
    rep = duality_gap(inst, make_grid(1.0, 2.0, 10, 10), None)
    assert rep.gap == 0.0 and rep.verdict == "pass"


def test_gap_d1():
    rep = duality_gap(d1_instance(), G, None)
    assert rep.gap <= 1e-3 * abs(rep.closed_y0) and rep.verdict == "pass"
    assert rep.tail_mass == pytest.approx(np.exp(-5.0), rel=1e-3)


def test_affine_in_data():
    g = make_grid(1.0, 5.0, 100, 400)
    from iabsde.stochastic import BrownianBundle
    from iabsde.duality import closed_form_y0_on_bundle
    inst = LinearInstance(s1_instance().model, _c(1.0), _c(0.3), _c(0.1))
    b = BrownianBundle(g, 2000, 1, 5)
    base, _ = closed_form_y0_on_bundle(inst, g, b)
    double, _ = closed_form_y0_on_bundle(inst.scaled(2.0), g, b)
    assert double == 2.0 * base


def test_noise_free_is_reproducible():
    a = closed_form_y0(d1_instance(), G, 10, 1)
    b = closed_form_y0(d1_instance(), G, 10, 2)
    assert a == b and a[1] == 0.0


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(0.0, 3.0), st.floats(0.0, 1.0), st.floats(0.1, 3.0))
def test_sign_propagation(q, lv, scale, a):
    g = make_grid(1.0, 3.0, 50, 50)
    model = LinearModel(exponential_kernel(a, scale), ZERO, scale / a, 0.0)
    est, _ = closed_form_y0(LinearInstance(model, _c(q), None, _c(lv)), g, 1, 0)
    assert est >= 0.0


def test_refinement_budget_deterministic_is_small():
    g = make_grid(1.0, 5.0, 200, 400)
    b = refinement_budget(d1_instance(), g)
    assert 0 < b < 5e-3
