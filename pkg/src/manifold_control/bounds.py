"""Error bounds for the controlled manifold segment and the constants they use.

Both bounds depend on (p, t) only through q = t - T + p (the position along
the unperturbed branch) and, for the tangential bound, q0 = q - t. Writing

    K(q) = int_q^inf |f(s)| exp(-int_q^s tr Df) ds          (stable)
    K(q) = int_-inf^q |f(s)| exp(int_s^q tr Df) ds          (unstable)
    h(q) = (|f(q)| + 2 C_f K(q)) / |f(q)|^2,

the normal bound is c eps^2 K(q) / |f(q)| and the tangential bound is
c eps^2 |f(q)| |int_q0^q h|, with c = C_s C_g + C_s^2 C_f / 2. K and the
antiderivative of h are tabulated once on a fine q grid and interpolated.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import FieldError, NearSaddleError, TruncationError
from .integrate import Trajectory
from .manifold import UnperturbedManifold
from .vectorfield import VectorField2D, rotate90

DECAY = 30.0  # e-folds of the integrand kept past the evaluation point


@dataclass
class BoundConstants:
    f_terms: Tuple[float, float, float]
    C_g: float
    C_s: float
    eps: float
    g_terms: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    converged: bool = True
    changes: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        vals = list(self.f_terms) + [self.C_g, self.C_s, self.eps]
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise FieldError(f"bound constants must be finite and nonnegative, got {vals}")

    @property
    def C_f(self) -> float:
        return float(sum(self.f_terms))

    @property
    def prefactor(self) -> float:
        return self.C_s * self.C_g + 0.5 * self.C_s**2 * self.C_f

    def scaled(self, eps: float) -> "BoundConstants":
        return BoundConstants(self.f_terms, self.C_g, self.C_s, eps, self.g_terms, self.converged, dict(self.changes))

    def as_dict(self):
        return {
            "sup_f": self.f_terms[0],
            "sup_Df": self.f_terms[1],
            "sup_D2f": self.f_terms[2],
            "C_f": self.C_f,
            "sup_g": self.g_terms[0],
            "sup_Dg": self.g_terms[1],
            "sup_dg_dt": self.g_terms[2],
            "C_g": self.C_g,
            "C_s": self.C_s,
            "eps": self.eps,
            "prefactor": self.prefactor,
            "converged": self.converged,
            "refinement_change": self.changes,
        }


# ---------------------------------------------------------------------------------
# Constants


def _bilinear_norm(H, n_angle: int = 48):
    """sup over unit u, v of |H(u, v)|, by sampling angles in [0, pi)."""
    a = np.linspace(0.0, np.pi, n_angle, endpoint=False)
    U = np.stack([np.cos(a), np.sin(a)], -1)
    val = np.einsum("...ijk,aj,bk->...abi", H, U, U)
    return np.max(np.linalg.norm(val, axis=-1), axis=(-2, -1))


def _sup_field_terms(field: VectorField2D, nx: int, ny: int):
    d = field.domain
    X, Y = np.meshgrid(np.linspace(d.x_min, d.x_max, nx), np.linspace(d.y_min, d.y_max, ny), indexing="ij")
    pts = np.stack([X, Y], -1)
    if field.jacobian_mode != "analytic" or field.hessian_mode != "analytic":
        # keep finite-difference stencils inside the domain
        pad = 2 * field.h_hess
        pts = np.stack(
            [np.clip(X, d.x_min + pad, d.x_max - pad), np.clip(Y, d.y_min + pad, d.y_max - pad)], -1
        )
    f = field.raw(pts)
    A = field.raw_jacobian(pts)
    H = field.raw_hessian(pts)
    terms = (
        float(np.max(np.linalg.norm(f, axis=-1))),
        float(np.max(np.linalg.norm(A, ord=2, axis=(-2, -1)))),
        float(np.max(_bilinear_norm(H))),
    )
    if not all(math.isfinite(v) for v in terms):
        raise FieldError("non-finite samples of f or its derivatives")
    return terms


def tube_points(um: UnperturbedManifold, radius: float, t_grid, n_p: int = 41, n_r: int = 9):
    """Sample points on normal lines of the segment, |offset| <= radius, inside the domain."""
    out = []
    for t in np.asarray(t_grid, dtype=float):
        cap = um.p_cap_at(t)
        if um.kind == "stable":
            if cap <= um.p_bound:
                continue
            ps = np.linspace(um.p_bound, cap, n_p)
        else:
            if cap >= um.p_bound:
                continue
            ps = np.linspace(cap, um.p_bound, n_p)
        q = um.q_of(ps, t)
        y = um.sample(q)
        n = rotate90(um.unit_tangent(q))
        r = np.linspace(-radius, radius, n_r)
        pts = (y[:, None, :] + r[None, :, None] * n[:, None, :]).reshape(-1, 2)
        pts = pts[um.field.domain.contains(pts)]
        out.append((float(t), pts))
    return out


def _sup_control_terms(control: Callable, samples, h_x: float, h_t: float):
    s_g = s_dg = s_dt = 0.0
    ex = np.array([h_x, 0.0])
    ey = np.array([0.0, h_x])
    for t, pts in samples:
        if len(pts) == 0:
            continue
        g = np.asarray(control(pts, t), dtype=float)
        gx = (np.asarray(control(pts + ex, t)) - np.asarray(control(pts - ex, t))) / (2 * h_x)
        gy = (np.asarray(control(pts + ey, t)) - np.asarray(control(pts - ey, t))) / (2 * h_x)
        gt = (np.asarray(control(pts, t + h_t)) - np.asarray(control(pts, t - h_t))) / (2 * h_t)
        D = np.stack([gx, gy], -1)
        vals = [g, D, gt]
        if not all(np.all(np.isfinite(v)) for v in vals):
            raise FieldError(f"non-finite control samples at t={t:g}")
        s_g = max(s_g, float(np.max(np.linalg.norm(g, axis=-1))))
        s_dg = max(s_dg, float(np.max(np.linalg.norm(D, ord=2, axis=(-2, -1)))))
        s_dt = max(s_dt, float(np.max(np.linalg.norm(gt, axis=-1))))
    return (s_g, s_dg, s_dt)


def estimate_constants(
    field: VectorField2D,
    control: Optional[Callable] = None,
    sample_grid: Tuple[int, int, int] = (65, 33, 11),
    t_range: Tuple[float, float] = (-1.0, 0.0),
    C_s: float = 0.0,
    eps: float = 0.0,
    um: Optional[UnperturbedManifold] = None,
    radius: Optional[float] = None,
    check_refinement: bool = True,
) -> BoundConstants:
    """Sampled suprema of f and g with their derivatives.

    f is sampled over the whole domain. The control is sampled over the
    tube of normal lines around the segment when ``um`` is given (the only
    place the flow of the segment feels it), otherwise over the domain.
    Each estimate is repeated on a grid of twice the resolution; a change
    above 5% clears the ``converged`` flag.
    """
    nx, ny, nt = sample_grid

    def run(nx, ny, nt):
        fterms = _sup_field_terms(field, nx, ny)
        if control is None:
            return fterms, (0.0, 0.0, 0.0)
        ts = np.linspace(t_range[0], t_range[1], nt)
        d = field.domain
        if um is not None:
            R = radius if radius is not None else getattr(control, "radius", 0.1 * d.diagonal)
            samples = tube_points(um, R, ts, n_p=nx, n_r=max(3, ny // 4 | 1))
        else:
            X, Y = np.meshgrid(np.linspace(d.x_min, d.x_max, nx), np.linspace(d.y_min, d.y_max, ny), indexing="ij")
            pts = np.stack([X.ravel(), Y.ravel()], -1)
            samples = [(float(t), pts) for t in ts]
        h_x = 1e-5 * d.diagonal
        # shrink samples by the stencil so finite differences stay inside
        samples = [(t, d.clip(p) * 1.0) for t, p in samples]
        samples = [
            (t, np.stack([np.clip(p[:, 0], d.x_min + h_x, d.x_max - h_x), np.clip(p[:, 1], d.y_min + h_x, d.y_max - h_x)], -1))
            for t, p in samples
        ]
        return fterms, _sup_control_terms(control, samples, h_x, 1e-5)

    fterms, gterms = run(nx, ny, nt)
    changes: Dict[str, float] = {}
    converged = True
    if check_refinement:
        f2, g2 = run(2 * nx - 1, 2 * ny - 1, 2 * nt - 1)
        names = ["sup_f", "sup_Df", "sup_D2f", "sup_g", "sup_Dg", "sup_dg_dt"]
        for name, a, b in zip(names, list(fterms) + list(gterms), list(f2) + list(g2)):
            rel = abs(b - a) / max(abs(b), 1e-300) if b != 0 or a != 0 else 0.0
            changes[name] = rel
            converged &= rel < 0.05
        fterms, gterms = tuple(map(max, fterms, f2)), tuple(map(max, gterms, g2))
    return BoundConstants(tuple(fterms), float(sum(gterms)), float(C_s), float(eps), tuple(gterms), converged, changes)


# ---------------------------------------------------------------------------------
# Profiles along the branch


class BoundProfile:
    """K(q) and the antiderivative of h(q) on a uniform q grid, with Hermite interpolation."""

    def __init__(self, um: UnperturbedManifold, C_f: float, q_lo: float, q_hi: float, n_per_unit: int = 0):
        self.um = um
        self.C_f = C_f
        self.q_lo, self.q_hi = float(q_lo), float(q_hi)
        lam_u, lam_s = um.saddle.lambda_u, um.saddle.lambda_s
        self.rate = lam_u if um.kind == "stable" else -lam_s
        if n_per_unit <= 0:
            n_per_unit = int(math.ceil(64 * max(abs(lam_u), abs(lam_s), 1.0)))
        self.n_per_unit = n_per_unit
        self._build()

    def _nodes(self, a, b, n_per_unit):
        n = max(int(math.ceil((b - a) * n_per_unit)), 2)
        return np.linspace(a, b, 2 * n + 1)

    def _build(self):
        um = self.um
        stable = um.kind == "stable"
        extent = DECAY / self.rate
        lo, hi = (self.q_lo, self.q_hi + extent) if stable else (self.q_lo - extent, self.q_hi)
        for _ in range(4):
            s = self._nodes(lo, hi, self.n_per_unit)
            pts = um.sample(s)
            sp = um.speed(s)
            tr = np.trace(um.field.raw_jacobian(pts), axis1=-2, axis2=-1)
            # Theta(s) = int tr ds, by Simpson over node pairs
            theta = _cum_simpson(tr, s)
            w = sp * np.exp(-theta)
            seg = w[s >= self.q_hi - 1e-12] if stable else w[s <= self.q_lo + 1e-12]
            ratio = (seg[-1] if stable else seg[0]) / np.max(seg)
            if ratio < 1e-12:
                break
            if stable:
                hi += extent
            else:
                lo -= extent
        else:
            raise TruncationError(
                "bound integrand does not decay below 1e-12 of its peak",
                {"end_ratio": float(ratio), "q_range": [lo, hi]},
            )
        self.truncation = {"q_range": [float(lo), float(hi)], "end_ratio": float(ratio)}
        if stable:
            # K(q) = e^{Theta(q)} int_q^hi |f| e^{-Theta}
            tail = theta[-1]
            wk = sp * np.exp(-(theta - tail))
            J = _cum_simpson(wk[::-1], s[::-1])[::-1] * -1.0
            K = np.exp(theta - tail) * J
        else:
            # K(q) = e^{Theta(q)} int_lo^q |f| e^{-Theta}
            wk = sp * np.exp(-theta)
            K = np.exp(theta) * _cum_simpson(wk, s)
        dK = tr * K - sp if stable else tr * K + sp
        # even-indexed node range covering [q_lo, q_hi], so Simpson pairs stay aligned
        i0 = 2 * (int(np.searchsorted(s, self.q_lo + 1e-12, side="right") - 1) // 2)
        i1 = int(np.searchsorted(s, self.q_hi - 1e-12, side="left"))
        i1 = min(max(i1 + (i1 % 2), i0 + 2), len(s) - 1)
        keep = slice(max(i0, 0), i1 + 1)
        s_k, K_k, dK_k, sp_k = s[keep], K[keep], dK[keep], sp[keep]
        h = (sp_k + 2 * self.C_f * K_k) / sp_k**2
        # accumulate from the end far from the saddle so differences keep their digits
        if stable:
            H = _cum_simpson(h, s_k)
        else:
            H = _cum_simpson(h[::-1], s_k[::-1])[::-1]
        even = slice(0, None, 2)
        s_e = s_k[even]
        self.q = s_e
        self.K_nodes = K_k[even]
        self._K = Trajectory(s_e, np.stack([K_k[even]] * 2, -1), np.stack([dK_k[even]] * 2, -1))
        self._H = Trajectory(s_e, np.stack([H[even]] * 2, -1), np.stack([h[even]] * 2, -1))

    def _check(self, q):
        q = np.asarray(q, dtype=float)
        if np.any(q < self.q_lo - 1e-9) or np.any(q > self.q_hi + 1e-9):
            raise ValueError(f"q outside the tabulated range [{self.q_lo:g}, {self.q_hi:g}]")
        return q

    def K(self, q):
        return self._K.dense_eval(self._check(q))[..., 0]

    def H(self, q):
        return self._H.dense_eval(self._check(q))[..., 0]


def _cum_simpson(y, x):
    """Cumulative Simpson integral at nodes 0, 2, 4, ... with linear fill-in at odd nodes.

    ``len(x)`` must be odd and ``x`` equally spaced. Odd nodes get the
    trapezoid-corrected value from the neighbouring pair.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    hstep = (x[2] - x[0]) / 2
    pair = hstep / 3 * (y[:-2:2] + 4 * y[1:-1:2] + y[2::2])
    out = np.empty_like(y)
    out[0::2] = np.concatenate([[0.0], np.cumsum(pair)])
    # odd nodes: integral over the first half of each pair, quadratic rule
    half = hstep / 12 * (5 * y[:-2:2] + 8 * y[1:-1:2] - y[2::2])
    out[1::2] = out[:-2:2] + half
    return out


# ---------------------------------------------------------------------------------
# Bounds


def _q_range(um, p, t):
    p = np.asarray(p, dtype=float)
    t = np.asarray(t, dtype=float)
    q = um.q_of(p, t)
    q0 = q - t
    both = np.concatenate([np.ravel(q), np.ravel(q0)])
    return q, q0, float(np.min(both)), float(np.max(both))


def _profile(um, bc, p, t, n_per_unit=0, profile=None):
    q, q0, lo, hi = _q_range(um, p, t)
    if profile is None or profile.q_lo > lo or profile.q_hi < hi:
        profile = BoundProfile(um, bc.C_f, lo, hi, n_per_unit)
    return q, q0, profile


def _near_saddle_check(um, q, check):
    if check and np.any(um.speed(q) <= um.eta):
        raise NearSaddleError("bound requested where |f| is at or below the near-saddle cutoff")


def perp_error_bound(um: UnperturbedManifold, bc: BoundConstants, p, t, profile=None, check: bool = True):
    """Normal-component bound: c eps^2 K(q) / |f(q)|."""
    q, q0, prof = _profile(um, bc, p, t, profile=profile)
    _near_saddle_check(um, q, check)
    if bc.eps == 0:
        return np.zeros(np.shape(q))
    return bc.prefactor * bc.eps**2 * prof.K(q) / um.speed(q)


def par_error_bound(um: UnperturbedManifold, bc: BoundConstants, p, t, profile=None, check: bool = True):
    """Tangential-component bound: c eps^2 |f(q)| |int_{q-t}^{q} h|."""
    q, q0, prof = _profile(um, bc, p, t, profile=profile)
    _near_saddle_check(um, q, check)
    if bc.eps == 0:
        return np.zeros(np.shape(q))
    return bc.prefactor * bc.eps**2 * um.speed(q) * np.abs(prof.H(q) - prof.H(q0))


def bound_limits(um: UnperturbedManifold, bc: BoundConstants, t: Optional[float] = None) -> Dict[str, float]:
    """Closed-form limiting values of the two bounds.

    ``perp_time`` and ``par_time`` are the standard stated values for the
    time limit; ``*_asymptotic`` are what the integrals tend to for a general
    trace (they agree with the stated values for divergence-free fields).
    """
    lam_s, lam_u = um.saddle.lambda_s, um.saddle.lambda_u
    c = bc.prefactor * bc.eps**2
    Cf = bc.C_f
    out: Dict[str, float] = {}
    if um.kind == "stable":
        out["perp_time"] = -c / lam_s
        out["perp_param"] = c / lam_u
        out["perp_time_asymptotic"] = c / lam_u
        out["par_time"] = 0.0
        out["par_time_asymptotic"] = c * (lam_u + 2 * Cf) / (-lam_s * lam_u)
        if t is not None:
            out["par_param"] = c * (lam_u + 2 * Cf) / (-lam_s * lam_u) * abs(1 - math.exp(lam_s * t))
    else:
        out["perp_time"] = c / lam_u
        out["perp_param"] = -c / lam_s
        out["perp_time_asymptotic"] = -c / lam_s
        out["par_time"] = 0.0
        out["par_time_asymptotic"] = c * (-lam_s + 2 * Cf) / (-lam_s * lam_u)
        if t is not None:
            out["par_param"] = c * (-lam_s + 2 * Cf) / (-lam_s * lam_u) * abs(1 - math.exp(lam_u * t))
    return out


@dataclass
class ErrorBoundReport:
    p: np.ndarray
    t: np.ndarray
    perp: np.ndarray
    par: np.ndarray
    constants: BoundConstants
    limits: Dict[str, float]
    truncation: Dict[str, object]
    quadrature_change: float = math.nan

    def to_csv(self, path):
        from .control import fmt

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["p", "t", "perp_bound", "par_bound"])
            for j, t in enumerate(self.t):
                for i, p in enumerate(self.p):
                    w.writerow([fmt(p), fmt(t), fmt(self.perp[i, j]), fmt(self.par[i, j])])

    def summary(self):
        return {
            "constants": self.constants.as_dict(),
            "limits": self.limits,
            "truncation": self.truncation,
            "quadrature_change": self.quadrature_change,
            "max_perp_bound": float(np.nanmax(self.perp)) if self.perp.size else None,
            "max_par_bound": float(np.nanmax(self.par)) if self.par.size else None,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def error_bound_report(
    um: UnperturbedManifold,
    bc: BoundConstants,
    p_grid: Sequence[float],
    t_grid: Sequence[float],
    mask: Optional[np.ndarray] = None,
) -> ErrorBoundReport:
    """Both bounds on a (p, t) grid; entries outside ``mask`` or past the cutoff are NaN."""
    p_grid = np.asarray(p_grid, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    P, T = np.meshgrid(p_grid, t_grid, indexing="ij")
    ok = um.speed(um.q_of(P, T)) > um.eta
    if mask is not None:
        ok &= mask
    q, q0, lo, hi = _q_range(um, P, T)
    prof = BoundProfile(um, bc.C_f, lo, hi)
    perp = np.where(ok, perp_error_bound(um, bc, P, T, prof, check=False), np.nan)
    par = np.where(ok, par_error_bound(um, bc, P, T, prof, check=False), np.nan)
    fine = BoundProfile(um, bc.C_f, lo, hi, 2 * prof.n_per_unit)
    perp2 = perp_error_bound(um, bc, P, T, fine, check=False)
    par2 = par_error_bound(um, bc, P, T, fine, check=False)
    with np.errstate(invalid="ignore", divide="ignore"):
        ch = np.concatenate(
            [np.ravel(np.abs(perp2 - perp) / np.abs(perp2)), np.ravel(np.abs(par2 - par) / np.abs(par2))]
        )
    ch = ch[np.isfinite(ch)]
    t_mid = None if not len(t_grid) else float(np.median(t_grid))
    return ErrorBoundReport(
        p_grid,
        t_grid,
        perp,
        par,
        bc,
        bound_limits(um, bc, t_mid),
        prof.truncation,
        float(np.max(ch)) if ch.size else 0.0,
    )
