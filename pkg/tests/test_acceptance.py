"""Acceptance criteria 1-8, each at its stated tolerance, one PASS/FAIL line apiece."""

import math
import time

import numpy as np
import pytest

from manifold_control.bounds import BoundProfile, bound_limits, error_bound_report, estimate_constants, par_error_bound, perp_error_bound
from manifold_control.config import preset_config
from manifold_control.control import ControlField
from manifold_control.ftle import compute_ftle, extract_ridge, measure_manifold_error
from manifold_control.integrate import IntegratorConfig, autonomous, flow_map, integrate_ode
from manifold_control.manifold import conditioned_mask, mappability_window, validate_desired
from manifold_control.pipeline import Scenario
from manifold_control.taylor_green import mirror_preset, stable_preset, tg_condition, tg_controlled_rhs, tg_heteroclinic, tg_manifold_slice, tg_y_max
from manifold_control.vectorfield import J, TaylorGreenParams

pytestmark = pytest.mark.slow

EPS = (0.05, 0.1, 0.2)
PRESETS = {"stable": "taylor_green_stable", "unstable": "taylor_green_mirror"}
CLOSED = {"stable": stable_preset, "unstable": mirror_preset}
_cache = {}


def scenario(kind):
    if kind not in _cache:
        _cache[kind] = Scenario(preset_config(PRESETS[kind]))
    return _cache[kind]


def sweep(kind):
    """Measured errors for every eps over the preset grid, masked by the validated window."""
    key = ("sweep", kind)
    if key not in _cache:
        scn = scenario(kind)
        t0 = time.perf_counter()
        mask = conditioned_mask(scn.um, scn.desired(max(EPS)), scn.p_grid, scn.t_grid)
        recs = {}
        for eps in EPS:
            dm = scn.desired(eps)
            recs[eps] = (dm, measure_manifold_error(scn.rhs(eps, scn.control(eps, dm)), scn.um, dm, scn.p_grid, scn.t_grid, scn.integrator))
        _cache[key] = (mask, recs, time.perf_counter() - t0)
    return _cache[key]


def oracle_error(kind):
    t0 = time.perf_counter()
    scn = Scenario(preset_config(PRESETS[kind]))
    um = scn.um
    cf = ControlField(um, scn.desired(0.1))
    closed = CLOSED[kind](0.1)
    worst, peak = 0.0, 0.0
    ts = np.linspace(-1.0, 0.0, 21) if kind == "stable" else np.linspace(0.0, 1.0, 21)
    for t in ts:
        pc = um.p_cap_at(t)
        p = np.linspace(-1.0, pc, 121) if kind == "stable" else np.linspace(pc, 1.0, 121)
        g = cf.assembled(p, np.full_like(p, t))[:, 0]
        ref = tg_condition(closed, p, t)
        worst = max(worst, float(np.max(np.abs(g - ref))))
        peak = max(peak, float(np.max(np.abs(ref))))
    return worst / peak, time.perf_counter() - t0


def eps_slope(kind):
    mask, recs, elapsed = sweep(kind)
    sups = [recs[e][1].sup_perp(mask) for e in EPS]
    slope = float(np.polyfit(np.log(EPS), np.log(sups), 1)[0])
    return slope, sups, int(mask.sum()), elapsed


def domination(kind):
    """Fraction of validated samples where the measured errors sit under the bounds."""
    scn = scenario(kind)
    mask, recs, _ = sweep(kind)
    # interior half: central half of the validated p-range at each time
    interior = np.zeros_like(mask)
    for j in range(mask.shape[1]):
        idx = np.flatnonzero(mask[:, j])
        if len(idx):
            a, b = scn.p_grid[idx[0]], scn.p_grid[idx[-1]]
            w = b - a
            interior[:, j] = mask[:, j] & (scn.p_grid >= a + w / 4 - 1e-12) & (scn.p_grid <= b - w / 4 + 1e-12)
    overall, inner, minimum_ratio = [], [], math.inf
    for eps in EPS:
        dm, rec = recs[eps]
        C_s = validate_desired(scn.um, dm).C_s
        override = scn.override(eps)
        bc = estimate_constants(scn.field, override, t_range=(float(scn.t_grid.min()), float(scn.t_grid.max())), C_s=C_s, eps=eps, um=scn.um, radius=10 * eps * scn.field.domain.diagonal)
        rep = error_bound_report(scn.um, bc, scn.p_grid, scn.t_grid, mask)
        ok = (np.abs(rec.e_perp) <= rep.perp) & (np.abs(rec.e_par) <= rep.par) & ~rec.escaped
        overall.append(float(np.mean(ok[mask])))
        inner.append(float(np.mean(ok[interior])))
        with np.errstate(divide="ignore", invalid="ignore"):
            r = rep.perp[mask] / np.abs(rec.e_perp[mask])
        minimum_ratio = min(minimum_ratio, float(np.nanmin(r)))
    return min(overall), min(inner), minimum_ratio


def ridge_deviation(eps, t, nx=512, ny=256):
    """Max horizontal ridge-to-target distance in cells over rows y in (0.05, 0.9 y_m(t))."""
    key = ("ridge", eps, t)
    if key not in _cache:
        scn = stable_preset(eps)
        fg = compute_ftle(tg_controlled_rhs(scn), (0.0, 2.0), (0.0, 1.0), nx, ny, t, 1.0)
        r = extract_ridge(fg, (0.7, 1.3))
        ym = float(tg_y_max(scn, t))
        sel = (r.y > 0.05) & (r.y < 0.9 * ym)
        dev = np.abs(r.x[sel] - tg_manifold_slice(scn, r.y[sel], t)) / fg.dx
        _cache[key] = (float(np.max(dev)) if sel.any() else math.nan, int(sel.sum()))
    return _cache[key]


# ---------------------------------------------------------------------------------


def test_criterion_1_oracle_equivalence(verdict):
    err, elapsed = oracle_error("stable")
    ok = err < 1e-3 and elapsed < 30
    verdict(1, ok, f"generic vs closed-form control, relative sup error {err:.2e} (< 1e-3), {elapsed:.1f} s (< 30 s)")
    assert ok


def test_criterion_2_eps_squared_scaling(verdict):
    slope, sups, n, elapsed = eps_slope("stable")
    ok = 1.7 <= slope <= 2.3 and elapsed < 300
    verdict(2, ok, f"sup e_perp {['%.4g' % s for s in sups]} over {n} validated samples, slope {slope:.3f} in [1.7, 2.3], {elapsed:.0f} s (< 300 s)")
    assert ok


def test_criterion_3_bound_domination(verdict):
    overall, inner, ratio = domination("stable")
    ok = overall >= 0.95 and inner == 1.0
    verdict(3, ok, f"bounds dominate at {100 * overall:.1f}% of the window (>= 95%), {100 * inner:.1f}% of its interior half (= 100%); min perp bound/error {ratio:.3g}")
    assert ok


def test_criterion_4_ftle_ridge_match(verdict):
    dev_small, rows = ridge_deviation(0.05, -0.9)
    dev_large, _ = ridge_deviation(0.2, -0.9)
    ok = dev_small < 2.0 and dev_large > 2.0
    verdict(4, ok, f"t=-0.9, 512x256: eps=0.05 max ridge offset {dev_small:.2f} cells over {rows} rows (< 2); eps=0.2 {dev_large:.1f} cells (> 2)")
    assert ok


def test_criterion_5_temporal_degradation(verdict):
    eps, T_s = 0.1, -1.0
    tol = 2.0 * (eps / 0.05) ** 2
    offsets = (0.2, 0.5, 1.0, 1.05, 1.1, 1.2, 1.3, 1.5)
    scn = scenario("stable")
    dm = scn.desired(eps)
    status, his = {}, []
    for s in offsets:
        dev, rows = ridge_deviation(eps, T_s + s)
        status[s] = rows > 0 and dev < tol
        his.append(mappability_window(scn.um, dm, T_s + s, raise_empty=False).p_hi)
    passing = [s for s in offsets if status[s]]
    last = max(passing) if passing else math.nan
    shrinking = all(b < a for a, b in zip(his, his[1:]))
    ok = status[0.2] and status[0.5] and not status[1.5] and shrinking and 1.0 <= last <= 1.6
    devs = ", ".join(f"T_s+{s:g}: {ridge_deviation(eps, T_s + s)[0]:.2f}" for s in offsets)
    verdict(5, ok, f"eps=0.1, tolerance {tol:g} cells; offsets {devs}; last pass T_s+{last:g} (in [1.0, 1.6]); p_hi shrinking {shrinking}")
    assert ok


def test_criterion_6_asymptotic_limits(verdict):
    scn = scenario("stable")
    um = scn.um
    dm = scn.desired(0.1)
    bc = estimate_constants(scn.field, scn.override(0.1), C_s=validate_desired(um, dm).C_s, eps=0.1, um=um, radius=10 * 0.1 * scn.field.domain.diagonal)
    target = bound_limits(um, bc)["perp_time"]
    p = 0.0
    ts = np.linspace(0.0, um.p_cap_at(0.0) - p - 1e-6, 200)
    perp = perp_error_bound(um, bc, p, ts)
    rel = abs(perp[-1] / target - 1)
    settling = abs(perp[-1] - target) <= abs(perp[len(ts) // 2] - target)
    par = par_error_bound(um, bc, p, ts)
    decay = par[-1] / np.max(par)
    ok = rel < 0.01 and settling and decay < 1e-3
    verdict(6, ok, f"p={p:g}: perp bound at t={ts[-1]:.2f} is {perp[-1]:.4g} vs -c eps^2/lambda_s {target:.4g} (rel {rel:.1e} < 1%); tangential bound end/peak {decay:.1e} (< 1e-3)")
    assert ok


def test_criterion_7_property_suites(verdict, tg_field):
    rng = np.random.default_rng(7)
    b = rng.normal(size=(10_000, 2))
    A = rng.normal(size=(10_000, 2, 2))
    Jb = b @ J.T
    lhs = np.einsum("ni,nij->nj", Jb, A) + np.einsum("ij,njk,nk->ni", J, A, b)
    trace_err = float(np.max(np.abs(lhs - np.trace(A, axis1=1, axis2=2)[:, None] * Jb)))

    fg = compute_ftle(autonomous(tg_field), (0.0, 2.0), (0.0, 1.0), 512, 256, -0.9, 1.0)
    r = extract_ridge(fg, (0.5, 1.5))
    sel = (r.y > 0.05) & (r.y < 0.95)
    ridge_cells = float(np.max(np.abs(r.x[sel] - 1.0)) / fg.dx)

    pts = rng.uniform([0.05, 0.05], [1.95, 0.95], (400, 2))
    h = 1e-6
    seeds = pts[:, None, :] + np.array([[h, 0], [-h, 0], [0, h], [0, -h]])
    F = flow_map(autonomous(tg_field), seeds, -0.9, 1.0, IntegratorConfig(method="rk4", step=1 / 400)).endpoints
    dx, dy = (F[:, 0] - F[:, 1]) / (2 * h), (F[:, 2] - F[:, 3]) / (2 * h)
    area_err = float(np.max(np.abs(dx[:, 0] * dy[:, 1] - dx[:, 1] * dy[:, 0] - 1)))

    cong = []
    for kind in ("stable", "unstable"):
        rec = validate_desired(scenario(kind).um, scenario(kind).desired(0.1))
        cong.append(rec.congruence_ok and rec.congruence_residual <= 64 * np.finfo(float).eps * math.e * 0.1 * math.pi)

    exact = tg_heteroclinic(TaylorGreenParams(), 0.4)
    errs = [np.linalg.norm(integrate_ode(autonomous(tg_field), (1.0, 0.5), 0.0, 0.4, IntegratorConfig(method="rk4", step=hh)).end - exact) for hh in (0.02, 0.01)]
    order_ratio = float(errs[0] / errs[1])

    ok = trace_err < 1e-12 * 10 and ridge_cells < 1.0 and area_err < 0.01 and all(cong) and 14 < order_ratio < 18
    verdict(7, ok, f"trace identity {trace_err:.1e} on 1e4 draws; steady ridge {ridge_cells:.1e} cells (< 1); area {area_err:.1e} (< 1%); congruence {cong}; RK4 halving ratio {order_ratio:.2f} (~16)")
    assert ok


def test_criterion_8_unstable_mirror(verdict):
    err, elapsed = oracle_error("unstable")
    slope_u, sups_u, n_u, el_u = eps_slope("unstable")
    slope_s, sups_s, _, _ = eps_slope("stable")
    overall, inner, _ = domination("unstable")
    same = float(np.max(np.abs(np.array(sups_u) / np.array(sups_s) - 1)))
    ok = err < 1e-3 and elapsed < 30 and 1.7 <= slope_u <= 2.3 and el_u < 300 and overall >= 0.95 and inner == 1.0 and same < 0.01
    verdict(8, ok, f"unstable mirror: oracle {err:.2e} in {elapsed:.1f} s; slope {slope_u:.3f} (stable {slope_s:.3f}, sups differ by {same:.1e}); domination {100 * overall:.1f}% / interior {100 * inner:.1f}%")
    assert ok
