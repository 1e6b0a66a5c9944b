"""Orchestration: scenario -> manifold -> control -> simulation -> bounds -> FTLE -> reports."""

from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import bounds as bnd
from .config import ScenarioConfig
from .control import ControlField
from .errors import ValidationFailure
from .expr import Expression
from .ftle import compute_ftle, extract_ridge, measure_manifold_error, ridge_offsets, target_curve
from .integrate import IntegratorConfig
from .manifold import (
    DesiredManifold,
    compute_manifold,
    conditioned_mask,
    default_validation_grids,
    desired_from_offset,
    mappability_window,
    validate_desired,
)
from .taylor_green import TGScenario, tg_control
from .vectorfield import Rect, TaylorGreenParams, expression_field, find_saddle, taylor_green

log = logging.getLogger(__name__)


def _lin(g):
    lo, hi, n = g
    return np.linspace(lo, hi, n)


class Scenario:
    """Everything derived from a config that does not depend on eps."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        fs = cfg.field
        if "builtin" in fs:
            prm = fs.get("params", {}) or {}
            self.tg_params = TaylorGreenParams(float(prm.get("U", 1.0)), float(prm.get("L", 1.0)))
            dom = fs.get("domain")
            self.field = taylor_green(self.tg_params, Rect(*map(float, dom)) if dom else None)
        else:
            self.tg_params = None
            self.field = expression_field(fs["expression"][0], fs["expression"][1], Rect(*map(float, fs["domain"])))
        self.saddle = find_saddle(self.field, cfg.saddle_guess)
        self.um = compute_manifold(
            self.field, self.saddle, cfg.kind, cfg.p_bound, cfg.time_anchor, anchor=cfg.anchor
        )
        self.p_grid = _lin(cfg.p_grid)
        self.t_grid = _lin(cfg.t_grid)
        icfg = dict(method="rk45", abs_tol=1e-11, rel_tol=1e-11)
        icfg.update(cfg.integrator)
        self.integrator = IntegratorConfig(**icfg)

    # ----- eps-dependent pieces ---------------------------------------------------
    def desired(self, eps: float) -> DesiredManifold:
        cfg = self.cfg
        if cfg.offset is not None:
            ex = [Expression(s, ("p", "t", "eps")) for s in cfg.offset]

            def offset(p, t, e):
                return np.stack(np.broadcast_arrays(ex[0](p=p, t=t, eps=e), ex[1](p=p, t=t, eps=e)), -1)

            return desired_from_offset(self.um, offset, eps, label="offset")
        ex = [Expression(s, ("p", "t", "eps")) for s in cfg.target]

        def family(e):
            def target(p, t):
                return np.stack(np.broadcast_arrays(ex[0](p=p, t=t, eps=e), ex[1](p=p, t=t, eps=e)), -1)

            return DesiredManifold(e, target, cfg.kind, family=family, label="target")

        return family(eps)

    def override(self, eps: float):
        cfg = self.cfg
        if cfg.extension != "analytic":
            return None
        if cfg.override == "taylor_green":
            if self.tg_params is None:
                raise ValidationFailure("the taylor_green override needs the builtin Taylor-Green field")
            scn = TGScenario(self.tg_params, eps, cfg.time_anchor, cfg.p_bound, cfg.kind)
            return lambda X, t: tg_control(scn, np.asarray(X)[..., 0], np.asarray(X)[..., 1], t, clip=True)
        ex = [Expression(s, ("x", "y", "t", "eps")) for s in cfg.override]

        def g(X, t):
            X = np.asarray(X, dtype=float)
            return np.stack(np.broadcast_arrays(*(e(x=X[..., 0], y=X[..., 1], t=t, eps=eps) for e in ex)), -1)

        return g

    def control(self, eps: float, dm: DesiredManifold) -> ControlField:
        cf = ControlField(self.um, dm, self.cfg.policy, extension=self.cfg.extension, override=self.override(eps))
        return cf.synthesize(self.p_grid, self.t_grid)

    def rhs(self, eps: float, cf: ControlField):
        f = self.field

        def rhs(X, t):
            return f.raw(X) + eps * cf.evaluate(X, t)

        return rhs


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (np.bool_,)):
        return bool(o)
    raise TypeError(f"not serialisable: {type(o)}")


def _tag(eps: float) -> str:
    return f"eps{eps:g}"


class Run:
    """One CLI invocation; collects artifacts and timings into a report."""

    def __init__(self, cfg: ScenarioConfig, out: Optional[str] = None):
        self.cfg = cfg
        self.out = Path(out or cfg.output)
        self.out.mkdir(parents=True, exist_ok=True)
        self.report: Dict[str, object] = {"config": cfg.source, "timings": {}, "artifacts": []}
        t0 = time.perf_counter()
        self.scn = Scenario(cfg)
        self._time("setup", t0)
        self.report["saddle"] = self.scn.saddle.as_dict()
        self.report["manifold"] = self.scn.um.as_dict()

    def _time(self, name, t0):
        self.report["timings"][name] = round(time.perf_counter() - t0, 3)

    def _artifact(self, path: Path) -> str:
        s = str(path)
        self.report["artifacts"].append(s)
        return s

    # ----- stages -----------------------------------------------------------------
    def validate(self) -> bool:
        t0 = time.perf_counter()
        scn = self.scn
        p_grid, _ = default_validation_grids(scn.um)
        results = {}
        ok = True
        for eps in self.cfg.eps:
            dm = scn.desired(eps)
            sweep = sorted(set(self.cfg.eps)) if len(self.cfg.eps) >= 2 else None
            rec = validate_desired(scn.um, dm, p_grid, scn.t_grid, sweep)
            results[_tag(eps)] = rec.as_dict()
            ok &= rec.passed
        path = self.out / "validation.json"
        _write_json(path, results)
        self.report["validation"] = {"passed": ok, "file": self._artifact(path)}
        self._time("validate", t0)
        return ok

    def control(self):
        t0 = time.perf_counter()
        scn = self.scn
        files = {}
        for eps in self.cfg.eps:
            dm = scn.desired(eps)
            cf = scn.control(eps, dm)
            csv_path = self.out / f"control_{_tag(eps)}.csv"
            cf.to_csv(csv_path)
            meta = cf.metadata()
            meta["override"] = self.cfg.override if isinstance(self.cfg.override, str) else list(self.cfg.override or [])
            meta_path = self.out / f"control_{_tag(eps)}.json"
            _write_json(meta_path, meta)
            files[_tag(eps)] = [self._artifact(csv_path), self._artifact(meta_path)]
        self.report["control"] = files
        self._time("control", t0)

    def verify(self):
        t0 = time.perf_counter()
        scn, cfg = self.scn, self.cfg
        um = scn.um
        eps_list = sorted(cfg.eps)
        widest = scn.desired(max(eps_list))
        mask = conditioned_mask(um, widest, scn.p_grid, scn.t_grid)
        errors, bound_stats, ridges = {}, {}, {}
        sups = []
        for eps in eps_list:
            dm = scn.desired(eps)
            cf = scn.control(eps, dm)
            rhs = scn.rhs(eps, cf)
            rec = measure_manifold_error(rhs, um, dm, scn.p_grid, scn.t_grid, scn.integrator)
            path = self.out / f"errors_{_tag(eps)}.csv"
            rec.to_csv(path)
            sup = rec.sup_perp(mask)
            sups.append(sup)
            errors[_tag(eps)] = {
                "sup_perp": sup,
                "sup_par": rec.sup_par(mask),
                "window_samples": int(mask.sum()),
                "decomposition_residual": rec.decomposition_residual,
                "file": self._artifact(path),
            }
            bound_stats[_tag(eps)] = self._bounds(eps, dm, cf, rec, mask)
            for t in cfg.times:
                ridges[f"{_tag(eps)}_t{t:g}"] = self._ftle(eps, dm, rhs, t)
        self.report["errors"] = errors
        self.report["bounds"] = bound_stats
        self.report["ridges"] = ridges
        if len(eps_list) >= 2 and all(np.isfinite(sups)) and min(sups) > 0:
            slope = float(np.polyfit(np.log(eps_list), np.log(sups), 1)[0])
            self.report["eps_scaling"] = {"eps": eps_list, "sup_perp": sups, "slope": slope}
        self._time("verify", t0)

    def _bounds(self, eps, dm, cf, rec, mask):
        scn = self.scn
        um = scn.um
        val = validate_desired(um, dm, *default_validation_grids(um))
        ctl = cf.override if cf.extension == "analytic" else cf.evaluate
        t_lo, t_hi = float(scn.t_grid.min()), float(scn.t_grid.max())
        bc = bnd.estimate_constants(scn.field, ctl, t_range=(t_lo, t_hi), C_s=val.C_s, eps=eps, um=um, radius=cf.radius)
        rep = bnd.error_bound_report(um, bc, scn.p_grid, scn.t_grid, mask)
        csv_path = self.out / f"bounds_{_tag(eps)}.csv"
        json_path = self.out / f"bounds_{_tag(eps)}.json"
        rep.to_csv(csv_path)
        rep.to_json(json_path)
        inside = mask & ~rec.escaped & np.isfinite(rep.perp)
        perp_ok = np.abs(rec.e_perp) <= rep.perp
        par_ok = np.abs(rec.e_par) <= rep.par
        n = int(inside.sum())
        return {
            "samples": n,
            "perp_dominated": float(np.mean(perp_ok[inside])) if n else math.nan,
            "par_dominated": float(np.mean(par_ok[inside])) if n else math.nan,
            "constants": bc.as_dict(),
            "files": [self._artifact(csv_path), self._artifact(json_path)],
        }

    def _ftle(self, eps, dm, rhs, t):
        scn, st = self.scn, self.cfg.ftle
        d = scn.field.domain
        cfg = IntegratorConfig(method="rk4", step=abs(st.tau) / st.steps)
        fg = compute_ftle(rhs, (d.x_min, d.x_max), (d.y_min, d.y_max), st.nx, st.ny, t, st.tau, cfg)
        base = str(self.out / f"ftle_{_tag(eps)}_t{t:g}")
        csv_path, pgm_path = Path(base + ".csv"), Path(base + ".pgm")
        fg.to_csv(csv_path)
        fg.to_pgm(pgm_path)
        um = scn.um
        a = um.saddle.a
        band = st.band
        if band is None:
            w = 0.15 * (d.x_max - d.x_min)
            band = (float(a[0]) - w, float(a[0]) + w)
        ridge = extract_ridge(fg, band)
        ridge_path = Path(base + "_ridge.csv")
        ridge.to_csv(ridge_path)
        dev = ridge_offsets(ridge, target_curve(um, dm, t)) / fg.dx
        win = mappability_window(um, dm, t, raise_empty=False)
        finite = np.isfinite(dev)
        # rows whose target point lies in the well-conditioned part of the window
        cond = np.full(dev.shape, np.nan)
        if np.isfinite(win.p_lo_cond):
            ps = np.linspace(win.p_lo_cond, win.p_hi_cond, 2001)
            cond = ridge_offsets(ridge, dm(ps, t)) / fg.dx
        cfin = np.isfinite(cond)
        return {
            "max_offset_cells": float(np.max(dev[finite])) if finite.any() else math.nan,
            "median_offset_cells": float(np.median(dev[finite])) if finite.any() else math.nan,
            "rows_compared": int(finite.sum()),
            "max_offset_cells_conditioned": float(np.max(cond[cfin])) if cfin.any() else math.nan,
            "rows_conditioned": int(cfin.sum()),
            "window": win.as_dict(),
            "files": [
                self._artifact(csv_path),
                self._artifact(pgm_path),
                self._artifact(ridge_path),
            ],
        }

    def finish(self) -> Dict[str, object]:
        path = self.out / "run_report.json"
        self.report["report_file"] = str(path)
        _write_json(path, self.report)
        return self.report
