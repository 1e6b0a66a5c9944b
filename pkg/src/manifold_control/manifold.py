"""Unperturbed manifold parametrisations and checks on user-supplied targets.

Parameters follow one convention throughout: ``q`` is the trajectory
parameter of the unperturbed manifold (``sample(q)`` solves x' = f(x)), and
a point (p, t) of the time-varying segment sits at ``q = t - T + p`` where T
is the time anchor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import CoverageError, MappabilityError
from .integrate import IntegratorConfig, integrate_ode, autonomous, Trajectory
from .vectorfield import SaddleData, VectorField2D, rotate90, velocity_scale
from .errors import EscapeError, BudgetError


class UnperturbedManifold:
    """Stable or unstable manifold branch of a saddle, sampled by its own flow.

    ``kind="stable"``: sample(q) -> a as q -> +inf, segment p in [S, inf).
    ``kind="unstable"``: sample(q) -> a as q -> -inf, segment p in (-inf, U].
    """

    def __init__(
        self,
        field: VectorField2D,
        saddle: SaddleData,
        kind: str,
        p_bound: float,
        time_anchor: float,
        trajectory: Trajectory,
        sigma0: float,
        side: float,
        delta: float,
        eta: float,
    ):
        self.field = field
        self.saddle = saddle
        self.kind = kind
        self.p_bound = float(p_bound)
        self.time_anchor = float(time_anchor)
        self._traj = trajectory
        self._sigma0 = sigma0
        self.side = side
        self.delta = delta
        self.eta = eta
        self.lam = saddle.lambda_s if kind == "stable" else saddle.lambda_u
        self.v = saddle.v_s if kind == "stable" else saddle.v_u
        self.anchor_point = self.sample(0.0)
        # trajectory coverage in q
        self.q_traj_lo = trajectory.t_min - sigma0
        self.q_traj_hi = trajectory.t_max - sigma0
        self.q_cap = self._find_cap()
        self._build_arclength()

    # ----- parameter bookkeeping -------------------------------------------------
    @property
    def sign(self) -> float:
        return 1.0 if self.kind == "stable" else -1.0

    @property
    def p_min(self) -> float:
        return self.p_bound if self.kind == "stable" else -math.inf

    @property
    def p_max(self) -> float:
        return math.inf if self.kind == "stable" else self.p_bound

    @property
    def p_cap(self) -> float:
        """Near-saddle cutoff expressed in q (sample parameter)."""
        return self.q_cap

    def q_of(self, p, t):
        return np.asarray(t, dtype=float) - self.time_anchor + np.asarray(p, dtype=float)

    def p_cap_at(self, t) -> float:
        """Parameter p at which the slice at time t reaches the near-saddle cutoff."""
        return self.q_cap - t + self.time_anchor

    def in_tail(self, q) -> np.ndarray:
        """True where q lies beyond the seed, in the linearised saddle neighbourhood."""
        s = self._sigma0 + np.asarray(q, dtype=float)
        return s > 0 if self.kind == "stable" else s < 0

    # ----- evaluation ------------------------------------------------------------
    def sample(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        s = self._sigma0 + q
        tail = self.in_tail(q)
        body = self._traj.dense_eval(np.clip(s, self._traj.t_min, self._traj.t_max))
        with np.errstate(over="ignore", under="ignore"):
            lin = self.saddle.a + (self.side * self.delta * np.exp(self.lam * np.where(tail, s, 0.0)))[..., None] * self.v
        out = np.where(tail[..., None], lin, body)
        if np.any(~tail & ((s < self._traj.t_min - 1e-12) | (s > self._traj.t_max + 1e-12))):
            raise CoverageError(
                f"parameter outside the computed manifold range [{self.q_traj_lo:.4g}, {self.q_traj_hi:.4g}]"
            )
        return out

    def sample_dp(self, q) -> np.ndarray:
        """d/dq sample(q), i.e. f along the manifold (linear rate in the tail)."""
        q = np.asarray(q, dtype=float)
        x = self.sample(q)
        tail = self.in_tail(q)
        f = self.field.raw(x)
        lin = self.lam * (x - self.saddle.a)
        return np.where(tail[..., None], lin, f)

    def speed(self, q) -> np.ndarray:
        return np.linalg.norm(self.sample_dp(q), axis=-1)

    def unit_tangent(self, q) -> np.ndarray:
        """f/|f| along the manifold; beyond the cutoff, the limiting saddle direction."""
        q = np.asarray(q, dtype=float)
        f = self.sample_dp(q)
        n = np.linalg.norm(f, axis=-1)
        limit = np.sign(self.lam) * self.side * self.v
        with np.errstate(invalid="ignore", divide="ignore"):
            u = f / n[..., None]
        beyond = self.beyond_cap(q) | (n == 0)
        return np.where(beyond[..., None], limit, u)

    def beyond_cap(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        return q > self.q_cap if self.kind == "stable" else q < self.q_cap

    def slice_point(self, p, t) -> np.ndarray:
        return self.sample(self.q_of(p, t))

    # ----- derived quantities ----------------------------------------------------
    def _find_cap(self) -> float:
        fs = abs(self.lam) * self.delta  # speed at the seed in the linear model
        if fs > self.eta:
            s_cap = math.log(self.eta / fs) / self.lam
            return s_cap - self._sigma0
        # the cutoff lies inside the integrated part; bisect on the monotone speed
        lo, hi = (self.q_traj_lo, -self._sigma0) if self.kind == "stable" else (-self._sigma0, self.q_traj_hi)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            small = self.speed(mid) < self.eta
            if self.kind == "stable":
                hi, lo = (mid, lo) if small else (hi, mid)
            else:
                lo, hi = (mid, hi) if small else (lo, mid)
        return 0.5 * (lo + hi)

    def _build_arclength(self):
        """Arclength to the saddle along the branch, N(q)."""
        s = self._traj.times
        pts = self._traj.points
        # refine each step with its Hermite midpoint (Simpson on |f|)
        mids = self._traj.dense_eval(0.5 * (s[1:] + s[:-1]))
        sp = np.linalg.norm(self.field.raw(pts), axis=-1)
        sm = np.linalg.norm(self.field.raw(mids), axis=-1)
        seg = (s[1:] - s[:-1]) / 6 * (sp[1:] + 4 * sm + sp[:-1])
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        # measure from the seed, whose arclength to a is delta in the linear model
        i_seed = int(np.argmin(np.abs(s)))
        arc = np.abs(cum - cum[i_seed]) + self.delta
        slope = -sp if self.kind == "stable" else sp
        self._arc_traj = Trajectory(s, np.stack([arc, arc], -1), np.stack([slope, slope], -1))

    def arclength_to_saddle(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        s = self._sigma0 + q
        tail = self.in_tail(q)
        with np.errstate(over="ignore", under="ignore"):
            lin = self.delta * np.exp(self.lam * np.where(tail, s, 0.0))
        body = self._arc_traj.dense_eval(s)[..., 0]
        return np.where(tail, lin, body)

    def slice_arclength(self, t) -> float:
        """Arclength of the time-t segment (p from its bound to the saddle end)."""
        return float(self.arclength_to_saddle(self.q_of(self.p_bound, t)))

    def as_dict(self):
        return {
            "kind": self.kind,
            "saddle": self.saddle.as_dict(),
            "anchor_point": self.anchor_point.tolist(),
            "p_bound": self.p_bound,
            "time_anchor": self.time_anchor,
            "q_cap": self.q_cap,
            "q_range": [self.q_traj_lo, self.q_traj_hi],
        }


def compute_manifold(
    field: VectorField2D,
    saddle: SaddleData,
    kind: str,
    p_bound: float,
    time_anchor: float,
    anchor=None,
    cfg: Optional[IntegratorConfig] = None,
    side: Optional[float] = None,
    margin: float = 1.0,
    eta_rel: float = 1e-8,
) -> UnperturbedManifold:
    """Seed next to the saddle along its eigendirection and follow the branch.

    The origin q = 0 is the point at arclength 0.1 * diagonal from the saddle,
    or the manifold point closest to ``anchor`` when one is given.
    """
    if kind not in ("stable", "unstable"):
        raise ValueError(f"unknown manifold kind {kind!r}")
    if kind == "stable" and not (p_bound <= 0 and time_anchor < 0):
        raise ValueError("stable manifolds need S <= 0 and T_s < 0")
    if kind == "unstable" and not (p_bound >= 0 and time_anchor > 0):
        raise ValueError("unstable manifolds need U >= 0 and T_u > 0")
    dom = field.domain
    diag = dom.diagonal
    delta = 1e-6 * diag
    v = saddle.v_s if kind == "stable" else saddle.v_u
    lam = saddle.lambda_s if kind == "stable" else saddle.lambda_u
    if side is None:
        side = 1.0 if dom.contains(saddle.a + delta * v) else -1.0
    seed = saddle.a + side * delta * v
    if not dom.contains(seed):
        raise CoverageError("both seeds beside the saddle fall outside the domain")
    direction = -1.0 if kind == "stable" else 1.0
    if cfg is None:
        cfg = IntegratorConfig(abs_tol=1e-12, rel_tol=1e-12, max_step=0.02 / abs(lam))
    rhs = autonomous(field)
    eta = eta_rel * velocity_scale(field)
    d0 = 0.1 * diag

    chunk = 5.0 / abs(lam)
    times: List[float] = []
    pts: List[np.ndarray] = []
    slopes: List[np.ndarray] = []
    t_cur, x_cur = 0.0, seed
    arc = delta
    sigma0 = None
    best = (math.inf, None)
    total = 0.0
    escaped = False
    limit = 200.0 / abs(lam) + abs(p_bound) + 10 * margin
    while True:
        try:
            tr = integrate_ode(rhs, x_cur, t_cur, t_cur + direction * chunk, cfg, domain=dom)
        except EscapeError as exc:
            # keep what we have up to the exit; coverage is judged below
            escaped = True
            tr = integrate_ode(rhs, x_cur, t_cur, t_cur + 0.999 * (exc.exit_time - t_cur), cfg)
        except BudgetError as exc:
            raise CoverageError(f"manifold integration ran out of steps: {exc}") from exc
        seg_t = tr.times if direction > 0 else tr.times[::-1]
        seg_x = tr.points if direction > 0 else tr.points[::-1]
        seg_f = tr.slopes if direction > 0 else tr.slopes[::-1]
        start = 1 if times else 0
        times.extend(seg_t[start:])
        pts.extend(seg_x[start:])
        slopes.extend(seg_f[start:])
        # arclength and anchor search on the new piece
        sp = np.linalg.norm(seg_f, axis=-1)
        cum = arc + np.concatenate([[0.0], np.cumsum(0.5 * (sp[1:] + sp[:-1]) * np.abs(np.diff(seg_t)))])
        if sigma0 is None:
            if anchor is None:
                hit = np.flatnonzero(cum >= d0)
                if len(hit):
                    k = hit[0]
                    if k == 0:
                        sigma0 = seg_t[0]
                    else:
                        w = (d0 - cum[k - 1]) / (cum[k] - cum[k - 1])
                        sigma0 = seg_t[k - 1] + w * (seg_t[k] - seg_t[k - 1])
            else:
                dist = np.linalg.norm(seg_x - np.asarray(anchor, dtype=float), axis=-1)
                k = int(np.argmin(dist))
                if dist[k] < best[0]:
                    best = (dist[k], seg_t[k])
                elif best[1] is not None and dist[-1] > best[0] + 1e-3 * diag:
                    sigma0 = best[1]
        arc = cum[-1]
        total += chunk
        t_cur, x_cur = seg_t[-1], seg_x[-1]
        if sigma0 is not None:
            need = sigma0 + direction * (abs(p_bound) + margin)
            if direction * (t_cur - need) >= 0:
                break
        if escaped or total > limit:
            break
    if sigma0 is None and anchor is not None and best[1] is not None:
        sigma0 = best[1]
    if sigma0 is None:
        raise CoverageError("manifold branch never reached the anchor arclength")

    times_a = np.array(times)
    order = np.argsort(times_a)
    traj = Trajectory(times_a[order], np.array(pts)[order], np.array(slopes)[order])
    if anchor is not None:
        sigma0 = _refine_anchor(traj, field, np.asarray(anchor, dtype=float), sigma0)
        if np.linalg.norm(traj.dense_eval(sigma0) - anchor) > 1e-6 * diag:
            raise CoverageError(f"anchor {list(anchor)} is not on the manifold branch")
    m = UnperturbedManifold(field, saddle, kind, p_bound, time_anchor, traj, sigma0, side, delta, eta)
    if anchor is None:
        # the search above used trapezoid arclength; settle the origin on the Simpson one
        for _ in range(3):
            miss = float(m.arclength_to_saddle(0.0)) - d0
            sigma0 += (1.0 if kind == "stable" else -1.0) * miss / float(m.speed(0.0))
            m = UnperturbedManifold(field, saddle, kind, p_bound, time_anchor, traj, sigma0, side, delta, eta)
    q_needed = p_bound  # q = t - T + p reaches p_bound at t = T
    if kind == "stable" and m.q_traj_lo > q_needed + 1e-9:
        raise CoverageError(f"stable branch escapes before reaching S={p_bound} (covers q >= {m.q_traj_lo:.4g})")
    if kind == "unstable" and m.q_traj_hi < q_needed - 1e-9:
        raise CoverageError(f"unstable branch escapes before reaching U={p_bound} (covers q <= {m.q_traj_hi:.4g})")
    return m


def _refine_anchor(traj, field, anchor, s0):
    s = s0
    for _ in range(30):
        x = traj.dense_eval(s)
        f = field.raw(x)
        g = f @ (x - anchor)
        dg = f @ f + (field.raw_jacobian(x) @ f) @ (x - anchor)
        if dg == 0:
            break
        step = g / dg
        s = float(np.clip(s - step, traj.t_min, traj.t_max))
        if abs(step) < 1e-15:
            break
    return s


# ---------------------------------------------------------------------------------
# Desired manifolds


@dataclass
class DesiredManifold:
    """Target x^eps(p, t) for the manifold segment, with optional analytic p-derivative."""

    eps: float
    target: Callable[[np.ndarray, np.ndarray], np.ndarray]
    kind: str = "stable"
    target_dp: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    family: Optional[Callable[[float], "DesiredManifold"]] = None
    validity: Optional["ValidityRecord"] = None
    label: str = ""

    def __call__(self, p, t) -> np.ndarray:
        return np.asarray(self.target(np.asarray(p, dtype=float), np.asarray(t, dtype=float)), dtype=float)

    def dp(self, p, t, h: float = 1e-4) -> np.ndarray:
        if self.target_dp is not None:
            return np.asarray(self.target_dp(np.asarray(p, dtype=float), np.asarray(t, dtype=float)), dtype=float)
        p = np.asarray(p, dtype=float)
        return (
            -self(p + 2 * h, t) + 8 * self(p + h, t) - 8 * self(p - h, t) + self(p - 2 * h, t)
        ) / (12 * h)

    @property
    def validated(self) -> bool:
        return self.validity is not None and self.validity.passed


def desired_from_offset(um: UnperturbedManifold, offset, eps: float, offset_dp=None, label="offset") -> DesiredManifold:
    """x^eps(p,t) = x(t - T + p) + eps * offset(p, t, eps)."""

    def target(p, t):
        return um.slice_point(p, t) + eps * np.asarray(offset(p, t, eps))

    dp = None
    if offset_dp is not None:

        def dp(p, t):
            return um.sample_dp(um.q_of(p, t)) + eps * np.asarray(offset_dp(p, t, eps))

    def family(e):
        return desired_from_offset(um, offset, e, offset_dp, label)

    return DesiredManifold(eps, target, um.kind, dp, family, label=label)


def desired_identity(um: UnperturbedManifold) -> DesiredManifold:
    def zero(p, t, eps):
        return np.zeros(np.broadcast(p, t).shape + (2,))

    return desired_from_offset(um, zero, 0.0, zero, label="identity")


# ---------------------------------------------------------------------------------
# Mappability


@dataclass
class MappabilityWindow:
    """Normal-line correspondence p -> p^eps at one time slice.

    ``p_lo``/``p_hi`` bound the largest contiguous run where the map is
    single-valued and strictly increasing. ``p_lo_cond``/``p_hi_cond`` bound
    the sub-run where it is also well conditioned: the target tangent
    deviates from f by less than |f|, which keeps the tangential derivative of
    the matching equation positive.
    """

    t: float
    p: np.ndarray
    p_eps: np.ndarray
    r: np.ndarray
    rho: np.ndarray
    ok: np.ndarray
    p_lo: float
    p_hi: float
    p_lo_cond: float = math.nan
    p_hi_cond: float = math.nan
    residual: float = 0.0

    @property
    def empty_cond(self) -> bool:
        return not np.isfinite(self.p_lo_cond)

    def contains(self, p, conditioned: bool = False) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if conditioned:
            if self.empty_cond:
                return np.zeros(p.shape, bool)
            return (p >= self.p_lo_cond - 1e-12) & (p <= self.p_hi_cond + 1e-12)
        return (p >= self.p_lo - 1e-12) & (p <= self.p_hi + 1e-12)

    def r_at(self, p):
        return np.interp(p, self.p, self.r)

    def p_to_peps(self, p):
        return np.interp(p, self.p, self.p_eps)

    def as_dict(self):
        return {
            "t": self.t,
            "p_lo": self.p_lo,
            "p_hi": self.p_hi,
            "p_lo_conditioned": self.p_lo_cond if np.isfinite(self.p_lo_cond) else None,
            "p_hi_conditioned": self.p_hi_cond if np.isfinite(self.p_hi_cond) else None,
            "reconstruction_residual": self.residual,
        }


def default_p_grid(um: UnperturbedManifold, t: float, n: int = 401) -> np.ndarray:
    cap = um.p_cap_at(t)
    if um.kind == "stable":
        if cap <= um.p_bound:
            return np.array([um.p_bound])
        return np.linspace(um.p_bound, cap, n)
    if cap >= um.p_bound:
        return np.array([um.p_bound])
    return np.linspace(cap, um.p_bound, n)


def _runs(mask):
    runs = []
    i = 0
    while i < len(mask):
        if mask[i]:
            j = i
            while j < len(mask) and mask[j]:
                j += 1
            runs.append((i, j))
            i = j
        else:
            i += 1
    return runs


def mappability_window(
    um: UnperturbedManifold,
    dm: DesiredManifold,
    t: float,
    p_grid: Optional[Sequence[float]] = None,
    slope_tol: float = 1e-6,
    rho_max: float = 1.0,
    raise_empty: bool = True,
) -> MappabilityWindow:
    """Match each unperturbed point to the target point on its normal line."""
    p = np.asarray(default_p_grid(um, t) if p_grid is None else p_grid, dtype=float)
    q = um.q_of(p, t)
    y = um.sample(q)
    tan = um.unit_tangent(q)
    nrm = rotate90(tan)
    speed = um.speed(q)
    # Newton on g(p_eps) = tan . (x^eps(p_eps, t) - y) = 0, starting at p_eps = p
    pe = p.copy()
    conv = np.zeros(p.shape, bool)
    for _ in range(50):
        d = dm(pe, t) - y
        g = np.sum(tan * d, -1)
        dg = np.sum(tan * dm.dp(pe, t), -1)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(dg > 0, g / dg, np.nan)
        step = np.clip(step, -1.0, 1.0)
        pe = pe - np.nan_to_num(step, nan=0.0)
        conv = np.isfinite(step) & (np.abs(step) < 1e-13 * (1 + np.abs(pe)))
        if np.all(conv | ~np.isfinite(step)):
            break
    d = dm(pe, t) - y
    tang_res = np.abs(np.sum(tan * d, -1))
    scale = 1e-9 * um.field.domain.diagonal
    solved = np.isfinite(pe) & (tang_res <= scale)
    r = np.sum(nrm * d, -1)
    dev = dm.dp(pe, t) - um.sample_dp(q)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.linalg.norm(dev, axis=-1) / speed
    near_cap = um.beyond_cap(q)
    rho = np.where(near_cap, np.inf, rho)

    ok = solved.copy()
    if len(p) > 1:
        slope = np.diff(pe) / np.diff(p)
        good = slope > slope_tol
        # a grid point is kept only if both adjacent intervals are monotone
        left = np.concatenate([[True], good])
        right = np.concatenate([good, [True]])
        ok &= left & right
    runs = _runs(ok)
    if not runs:
        if raise_empty:
            raise MappabilityError(f"empty mappability window at t={t}")
        return MappabilityWindow(t, p, pe, r, rho, ok, math.nan, math.nan)
    saddle_end = len(p) - 1 if um.kind == "stable" else 0
    chosen = None
    for a, b in runs:
        if a <= saddle_end < b:
            chosen = (a, b)
    if chosen is None:
        chosen = max(runs, key=lambda ab: ab[1] - ab[0])
    a, b = chosen
    win = MappabilityWindow(t, p, pe, r, rho, ok, float(p[a]), float(p[b - 1]))
    recon = um.sample(q) + r[..., None] * nrm - dm(pe, t)
    win.residual = float(np.max(np.linalg.norm(recon[a:b], axis=-1))) if b > a else 0.0
    cond = np.zeros(len(p), bool)
    cond[a:b] = rho[a:b] < rho_max
    cruns = _runs(cond)
    if cruns:
        ca, cb = max(cruns, key=lambda ab: (ab[1] - ab[0], -ab[0]))
        win.p_lo_cond, win.p_hi_cond = float(p[ca]), float(p[cb - 1])
    return win


# ---------------------------------------------------------------------------------
# Validation


@dataclass
class ValidityRecord:
    closeness_ok: bool
    C_s: float
    congruence_ok: bool
    congruence_residual: float
    congruence_tol_min: float
    limit_ok: bool
    limit_distances: List[List[float]]
    mappability_ok: bool
    windows: Dict[float, MappabilityWindow]
    smoothness: str
    smoothness_sup: Optional[List[float]] = None
    notes: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        smooth = self.smoothness in ("unchecked", "pass")
        return self.closeness_ok and self.congruence_ok and self.limit_ok and self.mappability_ok and smooth

    def as_dict(self):
        return {
            "passed": self.passed,
            "closeness": {"ok": self.closeness_ok, "C": self.C_s},
            "congruence": {
                "ok": self.congruence_ok,
                "residual_sup": self.congruence_residual,
                "tolerance_min": self.congruence_tol_min,
            },
            "limit": {"ok": self.limit_ok, "distances": self.limit_distances},
            "mappability": {"ok": self.mappability_ok, "windows": [w.as_dict() for w in self.windows.values()]},
            "eps_derivatives": {"status": self.smoothness, "sup": self.smoothness_sup},
            "notes": self.notes,
        }


def default_validation_grids(um: UnperturbedManifold, n_p: int = 121, n_t: int = 11):
    T = um.time_anchor
    if um.kind == "stable":
        t_grid = np.linspace(T, 0.0, n_t)
        p_grid = np.linspace(um.p_bound, um.p_cap_at(0.0), n_p)
    else:
        t_grid = np.linspace(0.0, T, n_t)
        p_grid = np.linspace(um.p_cap_at(0.0), um.p_bound, n_p)
    return p_grid, t_grid


def validate_desired(
    um: UnperturbedManifold,
    dm: DesiredManifold,
    p_grid=None,
    t_grid=None,
    eps_sweep: Optional[Sequence[float]] = None,
) -> ValidityRecord:
    """Check closeness, congruence, the p-limit, mappability and (optionally) eps-smoothness."""
    if p_grid is None or t_grid is None:
        dp_, dt_ = default_validation_grids(um)
        p_grid = dp_ if p_grid is None else p_grid
        t_grid = dt_ if t_grid is None else t_grid
    p_grid = np.asarray(p_grid, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    notes: List[str] = []
    diag = um.field.domain.diagonal
    eps = dm.eps

    P, T = np.meshgrid(p_grid, t_grid, indexing="ij")
    Q = um.q_of(P, T)
    diff = dm(P, T) - um.sample(Q)
    ddiff = dm.dp(P, T) - um.sample_dp(Q)
    mag = np.linalg.norm(diff, axis=-1) + np.linalg.norm(ddiff, axis=-1)
    if eps > 0:
        C_s = float(np.max(mag) / eps)
    else:
        C_s = 0.0 if np.max(mag) <= 1e-12 * diag else math.inf
    closeness_ok = bool(np.isfinite(C_s) and np.isfinite(mag).all() and eps * C_s < diag)

    q0 = um.q_of(p_grid, 0.0)
    f0 = um.sample_dp(q0)
    res = np.abs(np.sum(f0 * (dm(p_grid, 0.0) - um.sample(q0)), -1))
    tol = 1e-8 * np.linalg.norm(f0, axis=-1) * eps * diag
    congruence_ok = bool(np.all(res <= tol + 1e-300))
    if not congruence_ok:
        notes.append("target is not on the normal lines at t = 0")

    limit_ok = True
    dists = []
    for t in t_grid:
        pc = um.p_cap_at(t)
        if um.kind == "stable" and pc <= 0 or um.kind == "unstable" and pc >= 0:
            pc = 1.0 if um.kind == "stable" else -1.0
        # Cauchy tail: T_k = sup over p >= 2^k pc of |x(p) - x(8 pc)| must decrease, and halve overall
        ps = np.linspace(pc, 8 * pc, 113)
        pts = dm(ps, t)
        far = np.linalg.norm(pts - pts[-1], axis=-1)
        depth = ps / pc  # >= 1, grows toward the saddle end for either kind
        tails = [float(np.max(far[depth >= 2**k - 1e-12])) for k in range(3)]
        last = pts[depth >= 4 - 1e-12]
        tails[2] = float(np.max(np.linalg.norm(last[:, None] - last[None], axis=-1)))
        dists.append(tails)
        tiny = 1e-12 * diag
        geometric = tails[2] < tails[1] < tails[0] and tails[2] <= 0.5 * tails[0]
        if not (np.all(np.isfinite(pts)) and (geometric or max(tails) <= tiny)):
            limit_ok = False
    if not limit_ok:
        notes.append("target does not settle as p approaches the saddle end")

    windows: Dict[float, MappabilityWindow] = {}
    mappability_ok = True
    for t in t_grid:
        w = mappability_window(um, dm, float(t), raise_empty=False)
        windows[float(t)] = w
        if not np.isfinite(w.p_lo):
            mappability_ok = False
            notes.append(f"no mappability window at t={t:g}")
        elif not np.all(w.ok):
            mappability_ok = False
            notes.append(f"target folds back or leaves the normal lines at t={t:g} (window [{w.p_lo:g}, {w.p_hi:g}])")
    smoothness = "unchecked"
    sup = None
    if eps_sweep is not None and dm.family is not None and len(eps_sweep) >= 2:
        es = sorted(set(float(e) for e in eps_sweep))
        vals = [dm.family(e)(P, T) for e in es]
        sup = []
        table = vals
        xs = list(es)
        order = 0
        while len(table) > 1 and order < 3:
            order += 1
            table = [(table[i + 1] - table[i]) / (xs[i + order] - xs[i]) for i in range(len(table) - 1)]
            sup.append(float(np.max(np.abs(np.stack(table)))))
        smoothness = "pass" if all(np.isfinite(sup)) else "fail"
    return ValidityRecord(
        closeness_ok,
        C_s,
        congruence_ok,
        float(np.max(res)) if res.size else 0.0,
        float(np.min(tol)) if tol.size else 0.0,
        limit_ok,
        dists,
        mappability_ok,
        windows,
        smoothness,
        sup,
        notes,
    )


def conditioned_mask(
    um: UnperturbedManifold,
    dm: DesiredManifold,
    p_grid,
    t_grid,
    path_from: Optional[float] = 0.0,
    rho_max: float = 1.0,
):
    """(p, t) samples inside the well-conditioned windows.

    With ``path_from`` set, a sample (p, t) is kept only if (p, tau) is inside for
    every grid time tau between ``path_from`` and t, since measured errors at
    (p, t) accumulate along that stretch of the trajectory.
    """
    p_grid = np.asarray(p_grid, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    mask = np.zeros((len(p_grid), len(t_grid)), bool)
    for j, t in enumerate(t_grid):
        w = mappability_window(um, dm, float(t), p_grid=p_grid, rho_max=rho_max, raise_empty=False)
        if np.isfinite(w.p_lo):
            mask[:, j] = w.contains(p_grid, conditioned=True)
    if path_from is not None:
        for side in (t_grid <= path_from, t_grid >= path_from):
            idx = np.flatnonzero(side)
            seen = np.ones(len(p_grid), bool)
            for j in idx[np.argsort(np.abs(t_grid[idx] - path_from), kind="stable")]:
                seen = seen & mask[:, j]
                mask[:, j] = seen
    return mask
