import math

import numba
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowmpc.advect import (
    GridSpec, IntegrationError, IntegratorConfig, advect_point, flow_map, step, substeps,
)
from flowmpc.flowfield import DoubleGyre, FlowField, LinearSaddle, Uniform


@numba.njit
def _quartic_vel(x, y, t, p):
    return x ** 4, 0.0


@numba.njit
def _quartic_grad(x, y, t, p):
    return 4 * x ** 3, 0.0, 0.0, 0.0


class Quartic(FlowField):
    """dx/dt = x^4 blows up in finite time."""

    def kernel(self):
        return _quartic_vel, _quartic_grad, np.zeros(1)


def test_step_uniform():
    np.testing.assert_allclose(step(Uniform(1.0, 0.0), [0.0, 0.0], 0.0, 0.1), [0.1, 0.0],
                               rtol=0, atol=1e-16)


def test_step_saddle_local_error():
    xn = step(LinearSaddle(), [1.0, 1.0], 0.0, 0.01)
    # RK4 local error is dt^5/120 ~ 8e-13
    assert abs(xn[0] - math.exp(0.01)) < 1e-11
    assert abs(xn[1] - math.exp(-0.01)) < 1e-11


def test_step_double_gyre_direction():
    xn = step(DoubleGyre(), [1.0, 0.5], 0.0, 0.01)
    assert xn[1] < 0.5
    assert xn[1] == pytest.approx(0.5 - 0.01 * math.pi * 0.1, abs=1e-5)
    assert abs(xn[0] - 1.0) <= 1e-4


def test_step_rejects_zero_dt():
    with pytest.raises(ValueError):
        step(Uniform(), [0.0, 0.0], 0.0, 0.0)


def test_substeps_cover_horizon_exactly():
    assert substeps(1.0, 0.01).tolist() == [0.01] * 100
    hs = substeps(0.105, 0.01)
    assert len(hs) == 11
    assert hs[-1] == pytest.approx(0.005)
    assert hs.sum() == pytest.approx(0.105, abs=1e-15)


def test_advect_point_examples():
    np.testing.assert_allclose(advect_point(Uniform(1.0, 0.0), [0, 0], 0.0, 1.0), [1.0, 0.0],
                               atol=1e-14)
    x = advect_point(LinearSaddle(), [1.0, 1.0], 0.0, 1.0)
    assert abs(x[0] - math.e) < 1e-8
    assert abs(x[1] - 1 / math.e) < 1e-8


def test_advect_point_partial_step():
    np.testing.assert_allclose(advect_point(Uniform(1.0, 0.0), [0, 0], 0.0, 0.105), [0.105, 0.0],
                               atol=1e-15)
    x = advect_point(LinearSaddle(), [1.0, 1.0], 0.0, -0.537)
    assert x[0] == pytest.approx(math.exp(-0.537), abs=1e-10)


def test_advect_point_rejects_short_horizon():
    with pytest.raises(ValueError):
        advect_point(Uniform(), [0, 0], 0.0, 0.001)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 1.95), st.floats(0.05, 0.95), st.floats(0, 10), st.floats(0.5, 5))
def test_forward_backward_reversibility(x, y, t0, T):
    f = DoubleGyre()
    fwd = advect_point(f, [x, y], t0, T)
    back = advect_point(f, fwd, t0 + T, -T)
    np.testing.assert_allclose(back, [x, y], atol=1e-6)


def test_flow_map_examples():
    spec = GridSpec(0.0, 2.0, 0.0, 1.0, 11, 6)
    m = flow_map(Uniform(1.0, 0.0), spec, 0.0, 1.0)
    np.testing.assert_allclose(m.positions, spec.nodes() + [1.0, 0.0], atol=1e-14)

    m = flow_map(DoubleGyre(A=0.0), spec, 0.0, 1.0)
    np.testing.assert_array_equal(m.positions, spec.nodes())

    spec = GridSpec(-1.0, 1.0, -1.0, 1.0, 9, 9)
    m = flow_map(LinearSaddle(), spec, 0.0, 1.0)
    expected = spec.nodes() * [math.e, 1 / math.e]
    np.testing.assert_allclose(m.positions, expected, atol=1e-8)


def test_rk4_order():
    exact = math.e
    errs = [abs(advect_point(LinearSaddle(), [1.0, 1.0], 0.0, 1.0, IntegratorConfig(h))[0] - exact)
            for h in (0.1, 0.05)]
    assert 12 <= errs[0] / errs[1] <= 20


def test_grid_point_consistency_bitwise():
    spec = GridSpec(0.0, 2.0, 0.0, 1.0, 13, 7)
    f = DoubleGyre()
    m = flow_map(f, spec, 1.3, 4.0)
    for j in range(spec.ny):
        for i in range(spec.nx):
            p = advect_point(f, [spec.xs[i], spec.ys[j]], 1.3, 4.0)
            assert np.array_equal(m.positions[j, i], p)


def test_flow_map_deterministic():
    spec = GridSpec(0.0, 2.0, 0.0, 1.0, 21, 11)
    a = flow_map(DoubleGyre(), spec, 0.0, 7.5).positions
    b = flow_map(DoubleGyre(), spec, 0.0, 7.5).positions
    assert a.tobytes() == b.tobytes()


def test_integration_error_carries_location():
    with pytest.raises(IntegrationError) as exc:
        advect_point(Quartic(), [10.0, 0.0], 0.0, 1.0)
    assert exc.value.t is not None and 0.0 <= exc.value.t < 1.0

    spec = GridSpec(9.0, 11.0, 0.0, 1.0, 3, 3)
    with pytest.raises(IntegrationError) as exc:
        flow_map(Quartic(), spec, 0.0, 1.0)
    assert exc.value.node == (0, 0)


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec(0, 1, 0, 1, 2, 5)
    with pytest.raises(ValueError):
        GridSpec(1, 0, 0, 1, 5, 5)
    with pytest.raises(ValueError):
        IntegratorConfig(dt_int=0.0)
