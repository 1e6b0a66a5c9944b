import math

import numpy as np
import pytest

from manifold_control.control import (
    ControlField,
    ProjectionSample,
    _bump,
    control_components,
    default_h_t,
    differentiate_MB,
    eval_control,
    fmt,
    project_MB,
    synthesize_control,
)
from manifold_control.errors import NearSaddleError, StencilError, ValidationFailure, WindowError
from manifold_control.manifold import desired_from_offset, desired_identity, mappability_window, validate_desired
from manifold_control.taylor_green import stable_preset, tg_condition


def test_five_point_stencil_exact_for_quartic():
    t = np.linspace(0, 1, 9)
    v = 3 * t**4 - t**3 + 2 * t
    h = t[1] - t[0]
    d = differentiate_MB(v, h)
    assert np.allclose(d, 12 * t[2:-2] ** 3 - 3 * t[2:-2] ** 2 + 2, atol=1e-12)


def test_stencil_needs_five_samples():
    with pytest.raises(StencilError):
        differentiate_MB(np.zeros(4), 0.1)


def test_default_step(stable_scenario):
    assert default_h_t(stable_scenario.um) == pytest.approx(1e-3 / math.pi**2)


def test_projections_for_taylor_green(stable_scenario):
    um = stable_scenario.um
    dm = stable_scenario.desired(0.1)
    p = np.array([-1.0, 0.0, 0.5])
    s = project_MB(um, dm, p, 0.0)
    q = um.q_of(p, 0.0)
    speed = um.speed(q)
    # target offset is e^{-p} cos(t - p) along +x; J f points along +x on the downward heteroclinic
    assert np.allclose(s.M, speed * np.exp(-p) * np.cos(-p), rtol=1e-9)
    assert np.allclose(s.B, 0.0, atol=1e-12)


def test_projection_outside_window(stable_scenario):
    um = stable_scenario.um
    dm = stable_scenario.desired(0.1)
    w = mappability_window(um, dm, -0.5)
    with pytest.raises(WindowError):
        project_MB(um, dm, np.array([w.p_hi + 1.0]), -0.5, window=w)


def test_components_refuse_saddle(stable_scenario):
    um = stable_scenario.um
    p = np.array([um.p_cap_at(0.0) + 2.0])
    s = ProjectionSample(p, np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1))
    with pytest.raises(NearSaddleError):
        control_components(um, s)


def test_generic_matches_closed_form(stable_scenario):
    um = stable_scenario.um
    cf = ControlField(um, stable_scenario.desired(0.1))
    P, T = np.meshgrid(np.linspace(-1, um.p_cap_at(0.0), 41), np.linspace(-1, 0, 11), indexing="ij")
    g = cf.assembled(P, T)
    ref = tg_condition(stable_preset(0.1), P, T)
    assert np.max(np.abs(g[..., 0] - ref)) / np.max(np.abs(ref)) < 1e-3
    gp, gl = cf.on_manifold(P, T)
    assert np.max(np.abs(gl)) < 1e-6 * np.max(np.abs(gp))


def test_identity_target_gives_zero_control(stable_scenario):
    um = stable_scenario.um
    cf = ControlField(um, desired_identity(um)).synthesize(np.linspace(-1, 1, 5), np.linspace(-1, 0, 3))
    assert np.allclose(cf.table["g"], 0.0, atol=1e-12)
    assert np.allclose(cf.evaluate(np.array([[1.0, 0.5], [1.02, 0.3]]), -0.5), 0.0, atol=1e-12)


def test_tube_extension_consistency(stable_scenario):
    um = stable_scenario.um
    cf = ControlField(um, stable_scenario.desired(0.1), radius=0.2)
    p = np.linspace(-0.8, 0.8, 17)
    t = -0.4
    on = um.slice_point(p, t)
    assert np.allclose(cf.evaluate(on, t), cf.assembled(p, np.full_like(p, t)), atol=1e-8 * 50)
    far = on + [[cf.radius * 1.01, 0.0]]
    assert np.allclose(cf.evaluate(far, t), 0.0)


def test_foot_breaks_ties_to_smallest_parameter(stable_scenario):
    um = stable_scenario.um
    cf = ControlField(um, stable_scenario.desired(0.1))
    ps, d = cf.foot(np.array([[1.3, 0.4]]), 0.0)
    assert np.allclose(um.slice_point(ps, 0.0)[0], [1.0, 0.4], atol=1e-6)
    assert d[0] == pytest.approx(0.3, abs=1e-6)


def test_bump_shape():
    s = np.array([0.0, 1.0, 1.5])
    assert np.allclose(_bump(s), [1.0, 0.0, 0.0])
    h = 1e-4
    assert abs(_bump(h) - 1) < 1e-10
    assert abs(_bump(1 - h)) < 1e-10


def test_analytic_override_example(stable_scenario):
    from manifold_control.taylor_green import tg_control

    scn = stable_preset(0.1)
    cf = ControlField(
        stable_scenario.um,
        stable_scenario.desired(0.1),
        extension="analytic",
        override=lambda X, t: tg_control(scn, X[..., 0], X[..., 1], t, clip=True),
    )
    assert eval_control(cf, np.array([0.5, 0.5]), 0.0)[1] == 0.0


def test_eps_zero_is_uncontrolled(stable_scenario):
    um = stable_scenario.um
    cf = ControlField(um, stable_scenario.desired(0.0))
    assert np.all(cf.evaluate(np.array([[1.0, 0.5], [0.7, 0.2]]), -0.3) == 0)


def test_refuses_failed_validation(stable_scenario):
    um = stable_scenario.um
    dm = desired_from_offset(um, lambda p, t, e: np.stack(np.broadcast_arrays(0 * p, 1 + 0 * t), -1), 0.1)
    dm.validity = validate_desired(um, dm)
    assert not dm.validated
    with pytest.raises(ValidationFailure):
        synthesize_control(um, dm, [0.0], [0.0])


def test_csv_export_roundtrip(stable_scenario, tmp_path):
    import csv

    cf = ControlField(stable_scenario.um, stable_scenario.desired(0.1)).synthesize(np.linspace(-1, 0.5, 4), [-0.5, 0.0])
    path = tmp_path / "g.csv"
    cf.to_csv(path)
    rows = list(csv.reader(open(path, newline="")))
    assert rows[0] == ["p", "t", "x", "y", "g_perp", "g_par", "g_x", "g_y"]
    assert len(rows) == 9
    vals = np.array(rows[1:], float)
    assert np.array_equal(vals[:, 4], cf.table["g_perp"].T.ravel())
    assert open(path, "rb").read().count(b"\r") == 0


def test_fmt_roundtrips():
    for v in (math.pi, 1 / 3, -2.5e-300, 1e22):
        assert float(fmt(v)) == v
    assert fmt(float("nan")) == "nan"
