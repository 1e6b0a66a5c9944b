"""Control velocity that moves a manifold segment onto a target curve.

On the unperturbed segment the control is fixed by its normal and
tangential components, computed from the projections

    M = (J f)^T (x^eps - y) / eps,      B = f^T (x^eps - y) / eps,

with y = x(t - T + p), and their time derivatives. Away from the segment the
control is extended along normal lines inside a tube, or replaced by an
analytic override.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import NearSaddleError, StencilError, WindowError
from .manifold import DesiredManifold, MappabilityWindow, UnperturbedManifold
from .vectorfield import rotate90

STENCIL = np.array([-2, -1, 0, 1, 2])
_W5 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0


@dataclass
class ProjectionSample:
    p: np.ndarray
    t: np.ndarray
    M: np.ndarray
    B: np.ndarray
    dM_dt: Optional[np.ndarray] = None
    dB_dt: Optional[np.ndarray] = None


def project_MB(
    um: UnperturbedManifold,
    dm: DesiredManifold,
    p,
    t,
    window: Optional[MappabilityWindow] = None,
) -> ProjectionSample:
    p = np.asarray(p, dtype=float)
    t = np.asarray(t, dtype=float)
    if window is not None and not np.all(window.contains(p)):
        raise WindowError(f"parameter outside the mappability window at t={window.t:g}")
    M, B = _projections(um, dm, p, t)
    return ProjectionSample(p, t, M, B)


def _projections(um, dm, p, t):
    q = um.q_of(p, t)
    y = um.sample(q)
    f = um.sample_dp(q)
    if dm.eps == 0:
        z = np.zeros(np.broadcast(p, t).shape)
        return z, z.copy()
    d = (dm(p, t) - y) / dm.eps
    return np.sum(rotate90(f) * d, -1), np.sum(f * d, -1)


def differentiate_MB(values, h: float) -> np.ndarray:
    """Five-point central derivative along the last axis.

    Returns derivatives at the interior samples 2 .. n-3 (so a five-sample
    input yields its centre derivative). Exact for polynomials up to degree 4.
    """
    v = np.asarray(values, dtype=float)
    n = v.shape[-1]
    if n < 5:
        raise StencilError(f"need at least 5 time samples, got {n}")
    if not h > 0:
        raise StencilError("stencil spacing must be positive")
    out = (v[..., :-4] - 8 * v[..., 1:-3] + 8 * v[..., 3:-1] - v[..., 4:]) / (12 * h)
    return out


def default_h_t(um: UnperturbedManifold) -> float:
    return 1e-3 * min(1.0 / um.saddle.lambda_u, 1.0)


def control_components(um: UnperturbedManifold, sample: ProjectionSample, check: bool = True):
    """Normal and tangential control from (M, B, dM/dt, dB/dt) at y = x(t - T + p)."""
    if sample.dM_dt is None or sample.dB_dt is None:
        raise StencilError("time derivatives of M and B are required")
    q = um.q_of(sample.p, sample.t)
    y = um.sample(q)
    f = um.sample_dp(q)
    A = um.field.raw_jacobian(y)
    nf = np.linalg.norm(f, axis=-1)
    if check and np.any(nf <= um.eta):
        raise NearSaddleError("|f| at or below the near-saddle cutoff; use the cutoff policy")
    tr = np.trace(A, axis1=-2, axis2=-1)
    g_perp = (sample.dM_dt - tr * sample.M) / nf
    Jf = rotate90(f)
    v = Jf * sample.M[..., None] + f * sample.B[..., None]
    S = A + np.swapaxes(A, -1, -2)
    quad = np.einsum("...i,...ij,...j->...", f, S, v)
    g_par = (nf**2 * sample.dB_dt - quad) / nf**3
    return g_perp, g_par


def _limit_components(um, dm, p, t, h):
    """Scale-free form of the two components, valid down to the saddle.

    With r = n.(x^eps - y)/eps, b = u.(x^eps - y)/eps, u = f/|f|, n = J u and
    k = u.Df u, the definitions reduce to
        g_perp = dr/dt + r (k - tr Df),   g_par = db/dt - k b - r u.(Df + Df^T) n.
    Near the saddle u is frozen at its limiting eigendirection.
    """
    q = um.q_of(p, t)
    u = um.unit_tangent(q)
    n = rotate90(u)
    ts = t[..., None] + h * STENCIL
    ps = np.broadcast_to(p[..., None], ts.shape)
    d = (dm(ps, ts) - um.sample(um.q_of(ps, ts))) / dm.eps
    r = np.sum(n[..., None, :] * d, -1)
    b = np.sum(u[..., None, :] * d, -1)
    dr = differentiate_MB(r, h)[..., 0]
    db = differentiate_MB(b, h)[..., 0]
    r0, b0 = r[..., 2], b[..., 2]
    A = um.field.raw_jacobian(um.sample(q))
    k = np.einsum("...i,...ij,...j->...", u, A, u)
    tr = np.trace(A, axis1=-2, axis2=-1)
    S = A + np.swapaxes(A, -1, -2)
    g_perp = dr + r0 * (k - tr)
    g_par = db - k * b0 - r0 * np.einsum("...i,...ij,...j->...", u, S, n)
    return g_perp, g_par


def _generic_components(um, dm, p, t, h):
    ts = t[..., None] + h * STENCIL
    ps = np.broadcast_to(p[..., None], ts.shape)
    M, B = _projections(um, dm, ps, ts)
    s = ProjectionSample(p, t, M[..., 2], B[..., 2], differentiate_MB(M, h)[..., 0], differentiate_MB(B, h)[..., 0])
    return control_components(um, s, check=False)


def _bump(s):
    """C2 cutoff: 1 at s = 0, 0 for s >= 1, zero first and second derivatives at both ends."""
    s = np.clip(s, 0.0, 1.0)
    return 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s**2)


class ControlField:
    """Synthesised control: on-manifold components plus an extension to the plane."""

    def __init__(
        self,
        um: UnperturbedManifold,
        dm: DesiredManifold,
        policy: str = "limit",
        h_t: Optional[float] = None,
        extension: str = "tube",
        override: Optional[Callable] = None,
        radius: Optional[float] = None,
        windows: Optional[dict] = None,
    ):
        if policy not in ("limit", "scale"):
            raise ValueError(f"unknown near-saddle policy {policy!r}")
        if extension not in ("tube", "analytic"):
            raise ValueError(f"unknown extension {extension!r}")
        if extension == "analytic" and override is None:
            raise ValueError("analytic extension needs an override function")
        self.um = um
        self.dm = dm
        self.eps = dm.eps
        self.policy = policy
        self.h_t = default_h_t(um) if h_t is None else h_t
        self.extension = extension
        self.override = override
        diag = um.field.domain.diagonal
        self.radius = 10.0 * self.eps * diag if radius is None else radius
        self.windows = windows or {}
        self.table = None
        self._tree = None

    # ----- on-manifold ------------------------------------------------------------
    def on_manifold(self, p, t):
        p = np.asarray(p, dtype=float)
        t = np.asarray(t, dtype=float)
        p, t = np.broadcast_arrays(p, t)
        shape = p.shape
        p = p.reshape(-1)
        t = t.reshape(-1)
        gp = np.zeros(p.shape)
        gl = np.zeros(p.shape)
        if self.eps == 0 or p.size == 0:
            return gp.reshape(shape), gl.reshape(shape)
        q = self.um.q_of(p, t)
        near = self.um.beyond_cap(q)
        far = ~near
        if np.any(far):
            gp[far], gl[far] = _generic_components(self.um, self.dm, p[far], t[far], self.h_t)
        if np.any(near):
            if self.policy == "limit":
                gp[near], gl[near] = _limit_components(self.um, self.dm, p[near], t[near], self.h_t)
            else:
                pc = self.um.q_cap - t[near] + self.um.time_anchor
                # evaluate just inside the cutoff so the generic formula applies
                pc = pc - 1e-9 * self.um.sign
                cp, cl = _generic_components(self.um, self.dm, pc, t[near], self.h_t)
                ratio = self.um.speed(q[near]) / self.um.speed(self.um.q_of(pc, t[near]))
                gp[near], gl[near] = cp * ratio, cl * ratio
        return gp.reshape(shape), gl.reshape(shape)

    def assembled(self, p, t):
        p = np.asarray(p, dtype=float)
        t = np.asarray(t, dtype=float)
        gp, gl = self.on_manifold(p, t)
        u = self.um.unit_tangent(self.um.q_of(p, t))
        return gp[..., None] * rotate90(u) + gl[..., None] * u

    def synthesize(self, p_grid, t_grid, enforce_window: bool = False):
        """Tabulate components and vectors over a (p, t) grid."""
        p_grid = np.asarray(p_grid, dtype=float)
        t_grid = np.asarray(t_grid, dtype=float)
        P, T = np.meshgrid(p_grid, t_grid, indexing="ij")
        if enforce_window:
            for j, t in enumerate(t_grid):
                w = self.windows.get(float(t))
                if w is not None and not np.all(w.contains(p_grid)):
                    raise WindowError(f"grid leaves the mappability window at t={t:g}")
        gp, gl = self.on_manifold(P, T)
        u = self.um.unit_tangent(self.um.q_of(P, T))
        g = gp[..., None] * rotate90(u) + gl[..., None] * u
        pos = self.um.slice_point(P, T)
        self.table = {"p": P, "t": T, "x": pos[..., 0], "y": pos[..., 1], "g_perp": gp, "g_par": gl, "g": g}
        return self

    # ----- extension --------------------------------------------------------------
    def _build_tree(self):
        um = self.um
        lo = um.q_traj_lo if um.kind == "stable" else um.q_cap - 5.0 / abs(um.lam)
        hi = um.q_cap + 5.0 / abs(um.lam) if um.kind == "stable" else um.q_traj_hi
        q = np.linspace(lo, hi, 20001)
        pts = um.sample(q)
        self._tree_q = q
        self._tree = cKDTree(pts)

    def foot(self, X, t):
        """Nearest point of the time-t slice to each X, as (p*, distance)."""
        if self._tree is None:
            self._build_tree()
        um = self.um
        X = np.asarray(X, dtype=float).reshape(-1, 2)
        q_end = um.q_of(um.p_bound, t)
        k = 16
        dist, idx = self._tree.query(X, k=k)
        qc = self._tree_q[idx]
        valid = qc >= q_end if um.kind == "stable" else qc <= q_end
        dist = np.where(valid, dist, np.inf)
        # smallest parameter wins among equals: sort candidates by (distance, q)
        order = np.lexsort((qc, dist), axis=-1)
        first = np.take_along_axis(qc, order[:, :1], -1)[:, 0]
        none = ~np.isfinite(np.min(dist, -1))
        q = np.where(none, q_end, first)
        lo, hi = self._tree_q[0], self._tree_q[-1]
        if um.kind == "stable":
            lo = max(lo, q_end)
        else:
            hi = min(hi, q_end)
        dq = self._tree_q[1] - self._tree_q[0]
        for _ in range(8):
            xs = um.sample(q)
            f = um.sample_dp(q)
            e = X - xs
            phi = np.sum(f * e, -1)
            Df = um.field.raw_jacobian(xs)
            dphi = np.sum(np.einsum("...ij,...j->...i", Df, f) * e, -1) - np.sum(f * f, -1)
            with np.errstate(divide="ignore", invalid="ignore"):
                step = np.where(dphi < 0, phi / dphi, 0.0)
            step = np.clip(np.nan_to_num(step), -2 * dq, 2 * dq)
            q = np.clip(q - step, lo, hi)
        d = np.linalg.norm(X - um.sample(q), axis=-1)
        return q - t + um.time_anchor, d

    def __call__(self, X, t) -> np.ndarray:
        return self.evaluate(X, t)

    def evaluate(self, X, t) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        shape = X.shape
        if self.extension == "analytic":
            return np.asarray(self.override(X, t), dtype=float).reshape(shape)
        if self.eps == 0:
            return np.zeros(shape)
        flat = X.reshape(-1, 2)
        out = np.zeros_like(flat)
        ps, d = self.foot(flat, float(t))
        inside = d < self.radius
        if np.any(inside):
            g = self.assembled(ps[inside], np.full(inside.sum(), float(t)))
            out[inside] = g * _bump(d[inside] / self.radius)[:, None]
        return out.reshape(shape)

    def controlled_rhs(self):
        """x' = f(x) + eps g(x, t) for the integrators."""
        f = self.um.field
        eps = self.eps

        def rhs(X, t):
            return f.raw(X) + eps * self.evaluate(X, t)

        return rhs

    # ----- export -----------------------------------------------------------------
    def to_csv(self, path):
        if self.table is None:
            raise ValueError("synthesize() before exporting")
        tb = self.table
        cols = ["p", "t", "x", "y", "g_perp", "g_par", "g_x", "g_y"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            P = tb["p"].reshape(-1)
            order = np.lexsort((P, tb["t"].reshape(-1)))
            data = [
                tb["p"].reshape(-1),
                tb["t"].reshape(-1),
                tb["x"].reshape(-1),
                tb["y"].reshape(-1),
                tb["g_perp"].reshape(-1),
                tb["g_par"].reshape(-1),
                tb["g"][..., 0].reshape(-1),
                tb["g"][..., 1].reshape(-1),
            ]
            for i in order:
                w.writerow([fmt(c[i]) for c in data])

    def metadata(self):
        return {
            "eps": self.eps,
            "kind": self.um.kind,
            "near_saddle_policy": self.policy,
            "h_t": self.h_t,
            "extension": self.extension,
            "tube_radius": self.radius if self.extension == "tube" else None,
        }


def fmt(v: float) -> str:
    """17 significant digits, round-trip exact."""
    v = float(v)
    if math.isnan(v):
        return "nan"
    return format(v, ".17g")


def synthesize_control(
    um: UnperturbedManifold,
    dm: DesiredManifold,
    p_grid,
    t_grid,
    policy: str = "limit",
    h_t: Optional[float] = None,
    extension: str = "tube",
    override: Optional[Callable] = None,
    require_valid: bool = True,
) -> ControlField:
    if require_valid and dm.validity is not None and not dm.validated:
        from .errors import ValidationFailure

        raise ValidationFailure("desired manifold failed validation; refusing to synthesise")
    windows = dm.validity.windows if dm.validity is not None else {}
    cf = ControlField(um, dm, policy, h_t, extension, override, windows=windows)
    return cf.synthesize(p_grid, t_grid)


def eval_control(cf: ControlField, x, t) -> np.ndarray:
    return cf.evaluate(x, t)
