import math

import numpy as np
import pytest

from manifold_control.errors import BudgetError, EscapeError
from manifold_control.integrate import IntegratorConfig, autonomous, flow_map, integrate_batch, integrate_ode
from manifold_control.taylor_green import tg_heteroclinic
from manifold_control.vectorfield import Rect, TaylorGreenParams

TIGHT = IntegratorConfig(abs_tol=1e-11, rel_tol=1e-11)


def rotation(x, t):
    return np.stack([-x[..., 1], x[..., 0]], -1)


def test_fixed_point_stays(tg_field):
    tr = integrate_ode(autonomous(tg_field), (1.0, 0.0), 0.0, 3.0)
    assert np.allclose(tr.points, [1.0, 0.0], atol=1e-12)


def test_heteroclinic_endpoint(tg_field):
    tr = integrate_ode(autonomous(tg_field), (1.0, 0.5), 0.0, 1.0, TIGHT)
    y = 2 / math.pi * math.atan(math.exp(-math.pi**2))
    assert np.allclose(tr.end, (1.0, y), atol=1e-10)


def test_rotation_returns():
    tr = integrate_ode(rotation, (1.0, 0.0), 0.0, 2 * math.pi, TIGHT)
    assert np.allclose(tr.end, (1.0, 0.0), atol=1e-9)


def test_trajectory_invariants(tg_field):
    tr = integrate_ode(autonomous(tg_field), (0.3, 0.4), 0.0, -1.5)
    assert len(tr.times) == len(tr.points)
    assert np.all(np.diff(tr.times) > 0)
    for i in (0, len(tr) // 2, len(tr) - 1):
        assert np.array_equal(tr.dense_eval(tr.times[i]), tr.points[i])


def test_dense_output_accuracy(tg_field):
    tr = integrate_ode(autonomous(tg_field), (1.0, 0.5), 0.0, 0.5, TIGHT)
    ts = np.linspace(0, 0.5, 37)
    assert np.allclose(tr.dense_eval(ts), tg_heteroclinic(TaylorGreenParams(), ts), atol=1e-8)


def test_forward_backward_roundtrip(tg_field):
    cfg = IntegratorConfig(abs_tol=1e-10, rel_tol=1e-10)
    x0 = np.array([0.4, 0.3])
    fwd = integrate_ode(autonomous(tg_field), x0, 0.0, 1.0, cfg)
    back = integrate_ode(autonomous(tg_field), fwd.end, 1.0, 0.0, cfg)
    assert np.linalg.norm(back.end - x0) < 10 * cfg.abs_tol * 10


def test_escape_reported():
    dom = Rect(-1.0, 1.0, -1.0, 1.0)
    with pytest.raises(EscapeError) as info:
        integrate_ode(lambda x, t: np.array([1.0, 0.0]), (0.0, 0.0), 0.0, 5.0, domain=dom)
    assert info.value.exit_time == pytest.approx(1.0, abs=1e-6)


def test_budget():
    with pytest.raises(BudgetError):
        integrate_ode(rotation, (1.0, 0.0), 0.0, 100.0, IntegratorConfig(method="rk4", step=1e-3, max_steps=10))


def test_bad_config():
    with pytest.raises(ValueError):
        IntegratorConfig(method="euler")
    with pytest.raises(ValueError):
        IntegratorConfig(abs_tol=0)


def test_batch_matches_single(tg_field):
    seeds = np.array([[0.3, 0.4], [1.0, 0.5], [1.7, 0.2]])
    r = integrate_batch(autonomous(tg_field), seeds, 0.0, [0.3, 0.8], TIGHT)
    for i, s in enumerate(seeds):
        tr = integrate_ode(autonomous(tg_field), s, 0.0, 0.8, TIGHT)
        assert np.allclose(r.points[1, i], tr.end, atol=1e-9)


def test_batch_freezes_escapes():
    dom = Rect(-1.0, 1.0, -1.0, 1.0)
    r = integrate_batch(lambda x, t: np.ones_like(x) * [1.0, 0.0], [[0.0, 0.0], [-3.0, 0.0]], 0.0, [2.0], domain=dom)
    assert r.escaped.tolist() == [True, True]
    assert r.points[0, 0, 0] == pytest.approx(1.0, abs=1e-9)
    assert r.exit_time[0] == pytest.approx(1.0, abs=1e-6)
    assert r.exit_time[1] == 0.0


def test_flow_map_consistency(tg_field):
    fm = flow_map(autonomous(tg_field), np.array([[1.0, 0.5], [1.0, 0.0]]), -0.9, 1.0, TIGHT)
    tr = integrate_ode(autonomous(tg_field), (1.0, 0.5), -0.9, 0.1, TIGHT)
    assert np.allclose(fm.endpoints[0], tr.end, atol=1e-10)
    assert np.array_equal(fm.endpoints[1], [1.0, 0.0])


def test_flow_map_independent_of_workers(tg_field):
    seeds = np.random.default_rng(4).uniform(0.1, 0.9, (300, 2))
    cfg = IntegratorConfig()
    one = flow_map(autonomous(tg_field), seeds, 0.0, 0.7, cfg, chunk=64)
    many = flow_map(autonomous(tg_field), seeds, 0.0, 0.7, cfg, workers=3, chunk=64)
    assert np.array_equal(one.endpoints, many.endpoints)


def test_rk4_fourth_order_on_heteroclinic(tg_field):
    exact = tg_heteroclinic(TaylorGreenParams(), 0.4)
    errs = []
    for h in (0.02, 0.01):
        tr = integrate_ode(autonomous(tg_field), (1.0, 0.5), 0.0, 0.4, IntegratorConfig(method="rk4", step=h))
        errs.append(np.linalg.norm(tr.end - exact))
    assert 13 < errs[0] / errs[1] < 19
