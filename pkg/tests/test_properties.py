import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from manifold_control.bounds import BoundConstants, par_error_bound, perp_error_bound
from manifold_control.control import fmt
from manifold_control.expr import evaluate
from manifold_control.ftle import ScalarFieldGrid, extract_ridge
from manifold_control.integrate import IntegratorConfig, autonomous, flow_map
from manifold_control.manifold import desired_from_offset, validate_desired
from manifold_control.vectorfield import J, rotate90

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vec = st.tuples(finite, finite).map(np.array)
mat = st.tuples(finite, finite, finite, finite).map(lambda v: np.array(v).reshape(2, 2))


@given(vec, mat)
def test_trace_identity(b, A):
    lhs = (J @ b) @ A + J @ (A @ b)
    rhs = np.trace(A) * (J @ b)
    scale = max(1.0, np.abs(A).max() * np.abs(b).max())
    assert np.allclose(lhs, rhs, atol=1e-12 * scale, rtol=0)


@given(vec)
def test_rotation_twice_negates(v):
    assert np.array_equal(rotate90(rotate90(v)), -v)
    assert np.array_equal(J @ J, -np.eye(2))


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_csv_format_roundtrip(v):
    assert float(fmt(v)) == v


@given(st.floats(-1e6, 1e6, allow_nan=False), st.floats(-1e6, 1e6, allow_nan=False))
def test_expression_arithmetic(a, b):
    assert evaluate(f"{a!r} - ({b!r})") == a - b
    assert evaluate(f"({a!r}) * 2") == a * 2


@given(st.floats(0.8, 1.2), st.floats(0.1, 3.0))
def test_parabola_ridge_any_centre(c, k):
    x = np.linspace(0, 2, 201)
    vals = np.tile(-k * (x - c) ** 2, (5, 1))
    r = extract_ridge(ScalarFieldGrid((0, 2), (0, 1), vals), (0.5, 1.5))
    assert np.allclose(r.x, c, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 0.5), st.floats(1.1, 5.0))
def test_bounds_scale_as_eps_squared(stable_scenario, eps, k):
    um = stable_scenario.um
    bc = BoundConstants((1.0, 1.0, 1.0), 2.0, 3.0, eps)
    p, t = np.linspace(-1.0, 0.8, 7), -0.6
    a = perp_error_bound(um, bc, p, t), par_error_bound(um, bc, p, t)
    b = perp_error_bound(um, bc.scaled(k * eps), p, t), par_error_bound(um, bc.scaled(k * eps), p, t)
    assert np.allclose(b[0], k**2 * a[0], rtol=1e-12)
    assert np.allclose(b[1], k**2 * a[1], rtol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.floats(-2.0, 2.0), st.floats(0.2, 3.0), st.floats(0.01, 0.2))
def test_normal_offsets_are_congruent(stable_scenario, a, w, eps):
    um = stable_scenario.um

    def offset(p, t, e):
        # horizontal is normal to the vertical heteroclinic at every time
        r = a * np.exp(-np.abs(p)) * np.cos(w * (t - p))
        return np.stack(np.broadcast_arrays(r, 0 * r), -1)

    rec = validate_desired(um, desired_from_offset(um, offset, eps))
    assert rec.congruence_ok
    # horizontal offsets against a vertical tangent: zero up to coordinate roundoff
    assert rec.congruence_residual <= 64 * np.finfo(float).eps * (abs(a) * eps + um.field.domain.diagonal) * np.pi


@settings(max_examples=10, deadline=None)
@given(st.floats(-1.0, 0.5), st.floats(0.3, 1.0), st.integers(0, 2**31))
def test_flow_map_preserves_area(tg_field, t0, tau, seed):
    pts = np.random.default_rng(seed).uniform([0.05, 0.05], [1.95, 0.95], (200, 2))
    h = 1e-6
    stencil = np.array([[h, 0.0], [-h, 0.0], [0.0, h], [0.0, -h]])
    seeds = pts[:, None, :] + stencil
    cfg = IntegratorConfig(method="rk4", step=tau / 400)
    F = flow_map(autonomous(tg_field), seeds, t0, tau, cfg).endpoints
    dFdx = (F[:, 0] - F[:, 1]) / (2 * h)
    dFdy = (F[:, 2] - F[:, 3]) / (2 * h)
    det = dFdx[:, 0] * dFdy[:, 1] - dFdx[:, 1] * dFdy[:, 0]
    assert np.max(np.abs(det - 1)) < 0.01
