import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iabsde.core import ProcessPaths, make_grid
from iabsde.errors import KernelBoundViolation, SegmentTooShort, UnboundedFamily
from iabsde.generators import (
    LinearModel, check_h1_empirically, constant_kernel, custom_generator, eval_generator,
    exponential_kernel, indicator_generator, linear_generator, named_kernel, polyexp_kernel,
    supnorm_generator, tail_mass_bound, zero_generator,
)

G = make_grid(1.0, 5.0, 200, 800)


def _paths(fn, grid=G, start=0, dim=1):
    return ProcessPaths.deterministic(grid, fn, start=start, dim=dim)


def _d1():
    return linear_generator(LinearModel(exponential_kernel(), constant_kernel(0.0), 1.0, 0.0), G)


def test_linear_zero_base_point():
    spec = _d1()
    for s in (0, 57, 200):
        v = eval_generator(spec, s, _paths(np.zeros_like, start=s), _paths(np.zeros_like, start=s))
        assert np.all(v == 0.0)


def test_linear_constant_y():
    spec = _d1()
    ones = _paths(np.ones_like)
    for s in (0, 100, 200):
        v = eval_generator(spec, s, ones, _paths(np.zeros_like))[0, 0]
        t = G.times[s]
        exact = np.exp(-t) - np.exp(-5.0)
        # trapezoid error bound for e^{-r}: (b - a) h^2 / 12 max|f''|
        assert abs(v - exact) <= (5.0 - t) * G.dt_tail ** 2 / 12 * np.exp(-t) * 1.01


def test_supnorm_identity():
    spec = supnorm_generator(lambda x: x, 1.0)
    y = _paths(lambda t: np.exp(-t))
    for s in (0, 80, 200):
        v = eval_generator(spec, s, y, _paths(np.zeros_like))[0, 0]
        assert v == np.exp(-G.times[s])


def test_segment_too_short():
    spec = _d1()
    short = ProcessPaths.constant(G, 1.0, start=0, stop=300)
    with pytest.raises(SegmentTooShort):
        eval_generator(spec, 0, short, _paths(np.zeros_like))
    with pytest.raises(SegmentTooShort):
        eval_generator(spec, 10, _paths(np.ones_like, start=20), _paths(np.zeros_like))


def test_default_beta():
    spec = _d1()
    assert spec.L == 1.0 and spec.beta == 76.0
    s1 = linear_generator(LinearModel(exponential_kernel(2.0), exponential_kernel(2.0), 0.51, 0.26), G)
    assert s1.L == pytest.approx(0.51 + np.sqrt(0.26))
    assert s1.beta == 2 * s1.L + 74
    assert linear_generator(LinearModel(exponential_kernel(), constant_kernel(0.0), 1.0, 0.0), G, beta=3.0).beta == 3.0


def test_kernel_audit():
    with pytest.raises(KernelBoundViolation):
        linear_generator(LinearModel(exponential_kernel(), constant_kernel(0.0), 0.9, 0.0), G)
    with pytest.raises(KernelBoundViolation):
        linear_generator(LinearModel(constant_kernel(0.0), exponential_kernel(), 0.0, 0.1), G)


def test_tail_mass():
    assert tail_mass_bound(_d1(), G) == pytest.approx(np.exp(-5.0), rel=1e-3)
    z = linear_generator(LinearModel(constant_kernel(0.0), constant_kernel(0.0), 0.0, 0.0), G)
    assert tail_mass_bound(z, G) == 0.0
    with pytest.raises(UnboundedFamily):
        tail_mass_bound(supnorm_generator(np.abs, 1.0), G)
    with pytest.raises(UnboundedFamily):
        tail_mass_bound(custom_generator(lambda f: 0, 1.0, "none"), G)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 199))
def test_linear_affine(seed, a, b, s):
    g = make_grid(1.0, 3.0, 40, 40)
    model = LinearModel(exponential_kernel(), exponential_kernel(2.0), 1.0, 0.26,
                        l=lambda t: np.sin(t))
    spec = linear_generator(model, g)
    s = s % 41
    rng = np.random.default_rng(seed)
    y1, y2, z1, z2 = (ProcessPaths(g, rng.normal(size=(1, g.n_nodes, 1))) for _ in range(4))
    comb = lambda p, q: ProcessPaths(g, a * p.values + b * q.values)
    l_s = np.sin(g.times[s])
    lhs = eval_generator(spec, s, comb(y1, y2), comb(z1, z2)) - l_s
    rhs = a * (eval_generator(spec, s, y1, z1) - l_s) + b * (eval_generator(spec, s, y2, z2) - l_s)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-11, atol=1e-11)


def test_h1_linear_family():
    g = make_grid(1.0, 5.0, 100, 400)
    for model in (LinearModel(exponential_kernel(), constant_kernel(0.0), 1.0, 0.0),
                  LinearModel(exponential_kernel(2.0), exponential_kernel(2.0), 0.51, 0.26)):
        rep = check_h1_empirically(linear_generator(model, g), g, 200, seed=1)
        assert rep.passed and rep.max_ratio <= 1 + 1e-6
        assert rep.max_ratio_y > 0.1


def test_h1_indicator_metrics():
    g = make_grid(1.0, 5.0, 100, 400)
    spec = indicator_generator(0.5, 2.0, g)
    sup = check_h1_empirically(spec, g, 400, seed=3, metric="sup")
    l2 = check_h1_empirically(spec, g, 400, seed=3, metric="l2")
    assert sup.max_ratio <= 1.0 + 1e-12
    assert l2.max_ratio > 1.0


def test_h1_zero_generator():
    g = make_grid(1.0, 2.0, 20, 20)
    rep = check_h1_empirically(zero_generator(), g, 50, seed=0)
    assert rep.max_ratio == 0.0


def test_indicator_values():
    g = make_grid(1.0, 2.0, 10, 10)
    spec = indicator_generator(0.5, 3.0, g)
    y = _paths(lambda t: 1 + t, grid=g)
    z = _paths(np.zeros_like, grid=g)
    assert eval_generator(spec, 2, y, z)[0, 0] == pytest.approx(3.0 * 1.5)
    assert eval_generator(spec, 5, y, z)[0, 0] == pytest.approx(3.0 * 1.5)
    assert eval_generator(spec, 6, y, z)[0, 0] == 0.0


def test_named_kernels():
    assert named_kernel("exponential", a=2.0)(np.array([0.0]))[0] == 1.0
    assert named_kernel("constant", c=0.3)(np.array([7.0]))[0] == 0.3
    k = polyexp_kernel(2, 1.0)
    assert k(np.array([1.0]))[0] == pytest.approx(np.exp(-1.0))
    assert k.integral_abs == 2.0
    with pytest.raises(ValueError):
        named_kernel("gaussian")
