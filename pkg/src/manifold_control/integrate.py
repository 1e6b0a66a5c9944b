"""Explicit Runge-Kutta integration for planar nonautonomous ODEs.

Two schemes are provided: classical fixed-step RK4 and the adaptive
Dormand-Prince 5(4) pair. Single trajectories keep every accepted step and
expose a cubic Hermite interpolant; batches advance many seeds with a
shared step and report per-seed escapes from the domain.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BudgetError, EscapeError
from .vectorfield import Rect

RHS = Callable[[np.ndarray, float], np.ndarray]

# Dormand-Prince tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rk45"
    abs_tol: float = 1e-9
    rel_tol: float = 1e-9
    step: float = 1e-3
    max_step: float = math.inf
    max_steps: int = 1_000_000

    def __post_init__(self):
        if self.method not in ("rk45", "rk4"):
            raise ValueError(f"unknown method {self.method!r}; expected 'rk45' or 'rk4'")
        if not (self.abs_tol > 0 and self.rel_tol > 0 and self.step > 0 and self.max_step > 0):
            raise ValueError("tolerances and steps must be positive")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")


class Trajectory:
    """Accepted steps of one solution plus a C1 cubic Hermite interpolant."""

    def __init__(self, times, points, slopes, t_end=None):
        self.t_end = float(times[-1] if t_end is None else t_end)
        order = np.argsort(times)
        self.times = np.asarray(times, dtype=float)[order]
        self.points = np.asarray(points, dtype=float)[order]
        self.slopes = np.asarray(slopes, dtype=float)[order]
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    @property
    def t_min(self):
        return self.times[0]

    @property
    def t_max(self):
        return self.times[-1]

    def dense_eval(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        tt = np.clip(t, self.t_min, self.t_max)
        i = np.clip(np.searchsorted(self.times, tt, side="right") - 1, 0, len(self.times) - 2)
        if len(self.times) == 1:
            return np.broadcast_to(self.points[0], t.shape + (2,)).copy()
        t0, t1 = self.times[i], self.times[i + 1]
        h = (t1 - t0)[..., None]
        s = ((tt - t0) / (t1 - t0))[..., None]
        p0, p1 = self.points[i], self.points[i + 1]
        m0, m1 = self.slopes[i], self.slopes[i + 1]
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        out = h00 * p0 + h10 * h * m0 + h01 * p1 + h11 * h * m1
        exact = tt == self.times[i]
        out = np.where(exact[..., None], p0, out)
        exact1 = tt == t1
        return np.where(exact1[..., None], p1, out)

    def dense_slope(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        tt = np.clip(t, self.t_min, self.t_max)
        i = np.clip(np.searchsorted(self.times, tt, side="right") - 1, 0, len(self.times) - 2)
        t0, t1 = self.times[i], self.times[i + 1]
        h = (t1 - t0)[..., None]
        s = ((tt - t0) / (t1 - t0))[..., None]
        p0, p1 = self.points[i], self.points[i + 1]
        m0, m1 = self.slopes[i], self.slopes[i + 1]
        d00 = (6 * s**2 - 6 * s) / h
        d10 = 3 * s**2 - 4 * s + 1
        d01 = (-6 * s**2 + 6 * s) / h
        d11 = 3 * s**2 - 2 * s
        return d00 * p0 + d10 * m0 + d01 * p1 + d11 * m1

    @property
    def end(self):
        """State at the time integration stopped (the earliest time for backward runs)."""
        return self.points[-1] if self.t_end == self.t_max else self.points[0]


def _rk4_step(rhs, x, t, h, k1=None):
    if k1 is None:
        k1 = rhs(x, t)
    k2 = rhs(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = rhs(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = rhs(x + h * k3, t + h)
    return x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _dp_step(rhs, x, t, h, k1):
    ks = [k1]
    for s in range(1, 7):
        dx = sum(a * k for a, k in zip(_A[s], ks))
        ks.append(rhs(x + h * dx, t + _C[s] * h))
    x_new = x + h * sum(b * k for b, k in zip(_B5[:6], ks[:6]))
    err = h * sum(e * k for e, k in zip(_E, ks))
    return x_new, err, ks[6]


def _err_norm(err, x, x_new, cfg, axis=None):
    scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(x), np.abs(x_new))
    r = (err / scale) ** 2
    return np.sqrt(np.mean(r, axis=axis))


def _initial_step(rhs, x, t, direction, cfg, span):
    f0 = rhs(x, t)
    scale = cfg.abs_tol + cfg.rel_tol * np.abs(x)
    d0 = np.sqrt(np.mean((x / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span, cfg.max_step)
    x1 = x + direction * h0 * f0
    f1 = rhs(x1, t + direction * h0)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span, cfg.max_step), f0


def integrate_ode(
    rhs: RHS,
    x0,
    t0: float,
    t1: float,
    cfg: IntegratorConfig = IntegratorConfig(),
    domain: Optional[Rect] = None,
) -> Trajectory:
    """Integrate x' = rhs(x, t) from t0 to t1 (either direction)."""
    x = np.array(x0, dtype=float)
    if domain is not None and not domain.contains(x):
        raise EscapeError(f"initial point {x.tolist()} outside domain", t0, x)
    times, pts, slopes = [t0], [x.copy()], []
    if t1 == t0:
        return Trajectory(times, pts, [rhs(x, t0)])
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    t = t0
    steps = 0
    if cfg.method == "rk4":
        n = max(1, int(math.ceil(span / cfg.step - 1e-12)))
        h = direction * span / n
        if n > cfg.max_steps:
            raise BudgetError(f"{n} RK4 steps exceed max_steps={cfg.max_steps}")
        k1 = rhs(x, t)
        slopes.append(k1)
        for i in range(n):
            x_new = _rk4_step(rhs, x, t, h, k1)
            t_new = t0 + (i + 1) * h if i < n - 1 else t1
            _check_escape(domain, x, x_new, t, t_new)
            x, t = x_new, t_new
            k1 = rhs(x, t)
            times.append(t)
            pts.append(x.copy())
            slopes.append(k1)
        return Trajectory(times, pts, slopes)

    habs, k1 = _initial_step(rhs, x, t, direction, cfg, span)
    slopes.append(k1)
    while direction * (t1 - t) > 0:
        if steps >= cfg.max_steps:
            raise BudgetError(f"step budget {cfg.max_steps} exhausted at t={t}")
        habs = min(habs, cfg.max_step)
        last = habs >= abs(t1 - t) * (1 - 1e-12)
        if last:
            habs = abs(t1 - t)
        h = direction * habs
        x_new, err, k_new = _dp_step(rhs, x, t, h, k1)
        en = _err_norm(err, x, x_new, cfg)
        steps += 1
        if not np.isfinite(en):
            habs *= 0.2
            continue
        if en <= 1.0:
            t_new = t1 if last else t + h
            _check_escape(domain, x, x_new, t, t_new)
            x, t, k1 = x_new, t_new, k_new
            times.append(t)
            pts.append(x.copy())
            slopes.append(k1)
            fac = 5.0 if en == 0 else min(5.0, 0.9 * en ** -0.2)
        else:
            fac = max(0.2, 0.9 * en ** -0.2)
        habs *= fac
        if habs < 1e-14 * max(1.0, abs(t)):
            raise BudgetError(f"step size underflow at t={t}")
    return Trajectory(times, pts, slopes)


def _check_escape(domain, x, x_new, t, t_new):
    if domain is None or domain.contains(x_new):
        return
    frac = _crossing_fraction(domain, x, x_new)
    raise EscapeError(
        f"trajectory left the domain near t={t + frac * (t_new - t):.6g}",
        t + frac * (t_new - t),
        x + frac * (x_new - x),
    )


def _crossing_fraction(domain, x, x_new):
    """Fraction of the chord from x to x_new that stays inside the rectangle."""
    x = np.asarray(x, dtype=float)
    d = np.asarray(x_new, dtype=float) - x
    frac = np.ones(x.shape[:-1])
    with np.errstate(divide="ignore", invalid="ignore"):
        for k, (lo, hi) in enumerate(((domain.x_min, domain.x_max), (domain.y_min, domain.y_max))):
            s_hi = np.where(d[..., k] > 0, (hi - x[..., k]) / d[..., k], np.inf)
            s_lo = np.where(d[..., k] < 0, (lo - x[..., k]) / d[..., k], np.inf)
            frac = np.minimum(frac, np.minimum(s_hi, s_lo))
    return np.clip(frac, 0.0, 1.0)


@dataclass
class BatchResult:
    """Positions at each requested output time; escaped seeds are frozen at the boundary."""

    times: np.ndarray
    points: np.ndarray  # (n_times, n_seeds, 2)
    escaped: np.ndarray  # (n_seeds,) bool
    exit_time: np.ndarray  # (n_seeds,) nan where not escaped


def integrate_batch(
    rhs: RHS,
    seeds,
    t0: float,
    t_out: Sequence[float],
    cfg: IntegratorConfig = IntegratorConfig(),
    domain: Optional[Rect] = None,
) -> BatchResult:
    """Advance many seeds together and record them at monotone output times."""
    X = np.array(seeds, dtype=float).reshape(-1, 2)
    t_out = np.asarray(t_out, dtype=float)
    n = X.shape[0]
    escaped = np.zeros(n, bool)
    exit_time = np.full(n, np.nan)
    if domain is not None:
        out0 = ~domain.contains(X)
        escaped |= out0
        exit_time[out0] = t0
    out = np.empty((len(t_out), n, 2))
    if len(t_out) == 0:
        return BatchResult(t_out, out, escaped, exit_time)
    direction = 1.0 if t_out[-1] >= t0 else -1.0
    if np.any(direction * np.diff(np.concatenate([[t0], t_out])) < 0):
        raise ValueError("output times must be monotone in the integration direction")
    t = t0
    state = {"h": None, "steps": 0}
    for j, target in enumerate(t_out):
        if target != t:
            X, t = _advance_batch(rhs, X, t, target, cfg, domain, escaped, exit_time, state)
        out[j] = X
    return BatchResult(t_out, out, escaped, exit_time)


def _freeze(domain, X, X_new, t, t_new, escaped, exit_time):
    if domain is None:
        return X_new
    newly = ~escaped & ~domain.contains(X_new)
    if np.any(newly):
        frac = _crossing_fraction(domain, X[newly], X_new[newly])
        X_new[newly] = X[newly] + frac[:, None] * (X_new[newly] - X[newly])
        exit_time[newly] = t + frac * (t_new - t)
        escaped |= newly
    return X_new


def _advance_batch(rhs, X, t, t1, cfg, domain, escaped, exit_time, state):
    direction = 1.0 if t1 > t else -1.0
    span = abs(t1 - t)
    if cfg.method == "rk4":
        m = max(1, int(math.ceil(span / cfg.step - 1e-12)))
        h = direction * span / m
        t_start = t
        for i in range(m):
            state["steps"] += 1
            if state["steps"] > cfg.max_steps:
                raise BudgetError(f"step budget {cfg.max_steps} exhausted at t={t}")
            act = ~escaped
            X_new = X.copy()
            X_new[act] = _rk4_step(rhs, X[act], t, h)
            t_new = t_start + (i + 1) * h if i < m - 1 else t1
            X = _freeze(domain, X, X_new, t, t_new, escaped, exit_time)
            t = t_new
        return X, t

    act = ~escaped
    if state["h"] is None:
        habs, _ = _initial_step(rhs, X[act] if act.any() else X, t, direction, cfg, span)
    else:
        habs = state["h"]
    k1 = rhs(X[act], t) if act.any() else None
    while direction * (t1 - t) > 0:
        act_idx = np.flatnonzero(~escaped)
        if len(act_idx) == 0:
            return X, t1
        if k1 is None or len(k1) != len(act_idx):
            k1 = rhs(X[act_idx], t)
        state["steps"] += 1
        if state["steps"] > cfg.max_steps:
            raise BudgetError(f"step budget {cfg.max_steps} exhausted at t={t}")
        habs = min(habs, cfg.max_step)
        last = habs >= abs(t1 - t) * (1 - 1e-12)
        hh = abs(t1 - t) if last else habs
        h = direction * hh
        xa = X[act_idx]
        xa_new, err, k_new = _dp_step(rhs, xa, t, h, k1)
        en = float(np.max(_err_norm(err, xa, xa_new, cfg, axis=-1)))
        if not np.isfinite(en):
            habs = hh * 0.2
            continue
        if en <= 1.0:
            t_new = t1 if last else t + h
            X_new = X.copy()
            X_new[act_idx] = xa_new
            before = escaped.copy()
            X = _freeze(domain, X, X_new, t, t_new, escaped, exit_time)
            t = t_new
            keep = ~escaped[act_idx]
            k1 = k_new[keep] if not np.array_equal(before, escaped) else k_new
            fac = 5.0 if en == 0 else min(5.0, 0.9 * en ** -0.2)
            if not last:
                habs = hh * fac
        else:
            habs = hh * max(0.2, 0.9 * en ** -0.2)
        if habs < 1e-14 * max(1.0, abs(t)):
            raise BudgetError(f"step size underflow at t={t}")
    state["h"] = habs
    return X, t


@dataclass
class FlowMapResult:
    endpoints: np.ndarray
    escaped: np.ndarray
    exit_time: np.ndarray


def flow_map(
    rhs: RHS,
    seeds,
    t0: float,
    tau: float,
    cfg: IntegratorConfig = IntegratorConfig(method="rk4", step=5e-3),
    domain: Optional[Rect] = None,
    workers: int = 1,
    chunk: int = 8192,
) -> FlowMapResult:
    """Endpoints of x' = rhs(x, t) over [t0, t0 + tau] for every seed.

    Seeds are split into fixed-size chunks before any worker sees them, so the
    result does not depend on the number of workers even with adaptive steps.
    """
    seeds = np.asarray(seeds, dtype=float)
    shape = seeds.shape[:-1]
    flat = seeds.reshape(-1, 2)
    bounds = [(i, min(i + chunk, len(flat))) for i in range(0, len(flat), chunk)]

    def run(b):
        r = integrate_batch(rhs, flat[b[0] : b[1]], t0, [t0 + tau], cfg, domain)
        return r.points[0], r.escaped, r.exit_time

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    if not parts:
        empty = np.empty((0, 2))
        return FlowMapResult(empty.reshape(shape + (2,)), np.zeros(shape, bool), np.full(shape, np.nan))
    ends = np.concatenate([p[0] for p in parts]).reshape(shape + (2,))
    esc = np.concatenate([p[1] for p in parts]).reshape(shape)
    ext = np.concatenate([p[2] for p in parts]).reshape(shape)
    return FlowMapResult(ends, esc, ext)


def autonomous(field) -> RHS:
    """Wrap a vector field as a time-independent right-hand side."""

    def rhs(x, t):
        return field.raw(x)

    return rhs
