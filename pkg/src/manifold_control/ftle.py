"""FTLE fields, ridge extraction and measured errors of the controlled manifold."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .integrate import IntegratorConfig, flow_map, integrate_batch
from .manifold import DesiredManifold, UnperturbedManifold
from .vectorfield import Rect, rotate90


@dataclass
class ScalarFieldGrid:
    """Values on a uniform grid; ``values[j, i]`` sits at (x_i, y_j), so rows run along x."""

    x_range: Tuple[float, float]
    y_range: Tuple[float, float]
    values: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or min(self.values.shape) < 2:
            raise ValueError("grid needs at least 2 x 2 values")
        if self.mask is None:
            self.mask = np.zeros(self.values.shape, bool)

    @property
    def ny(self) -> int:
        return self.values.shape[0]

    @property
    def nx(self) -> int:
        return self.values.shape[1]

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_range[0], self.x_range[1], self.nx)

    @property
    def y(self) -> np.ndarray:
        return np.linspace(self.y_range[0], self.y_range[1], self.ny)

    @property
    def dx(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / (self.nx - 1)

    @property
    def dy(self) -> float:
        return (self.y_range[1] - self.y_range[0]) / (self.ny - 1)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x_min", "x_max", "y_min", "y_max", "nx", "ny"])
            w.writerow([repr(float(v)) for v in (*self.x_range, *self.y_range)] + [self.nx, self.ny])
            for row, m in zip(self.values, self.mask):
                w.writerow(["nan" if mm else format(v, ".9g") for v, mm in zip(row, m)])

    @classmethod
    def from_csv(cls, path) -> "ScalarFieldGrid":
        with open(path) as fh:
            rows = list(csv.reader(fh))
        x0, x1, y0, y1 = (float(v) for v in rows[1][:4])
        vals = np.array([[float(v) for v in r] for r in rows[2:]])
        return cls((x0, x1), (y0, y1), np.nan_to_num(vals, nan=0.0), ~np.isfinite(vals))

    def to_pgm(self, path):
        """8-bit portable graymap, top row at y_max."""
        v = np.where(self.mask, np.nan, self.values)
        lo, hi = np.nanmin(v), np.nanmax(v)
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
        img = np.nan_to_num((v - lo) * scale, nan=0.0).clip(0, 255).astype(np.uint8)[::-1]
        with open(path, "wb") as fh:
            fh.write(f"P5\n{self.nx} {self.ny}\n255\n".encode())
            fh.write(img.tobytes())


def compute_ftle(
    rhs: Callable,
    x_range: Tuple[float, float],
    y_range: Tuple[float, float],
    nx: int,
    ny: int,
    t0: float,
    tau: float,
    cfg: Optional[IntegratorConfig] = None,
    domain: Optional[Rect] = None,
    workers: int = 1,
) -> ScalarFieldGrid:
    """(1/|tau|) ln sigma_max of the flow-map gradient, by central differences on the seed grid.

    With ``domain`` set, seeds that leave it are frozen at the exit point and
    every cell whose stencil touches an escaped seed is masked.
    """
    if tau == 0:
        raise ValueError("integration time tau must be nonzero")
    if nx < 2 or ny < 2:
        raise ValueError("grid needs nx, ny >= 2")
    if cfg is None:
        cfg = IntegratorConfig(method="rk4", step=abs(tau) / 200)
    xs = np.linspace(x_range[0], x_range[1], nx)
    ys = np.linspace(y_range[0], y_range[1], ny)
    seeds = np.stack(np.meshgrid(xs, ys, indexing="xy"), -1)
    res = flow_map(rhs, seeds, t0, tau, cfg, domain, workers)
    F = res.endpoints
    dx, dy = xs[1] - xs[0], ys[1] - ys[0]
    gx = np.gradient(F[..., 0], dy, dx)
    gy = np.gradient(F[..., 1], dy, dx)
    a, b = gx[1], gx[0]  # dFx/dx, dFx/dy
    c, d = gy[1], gy[0]
    # largest singular value of [[a, b], [c, d]] in closed form
    s = a * a + b * b + c * c + d * d
    det = a * d - b * c
    sig2 = 0.5 * (s + np.sqrt(np.maximum(s * s - 4 * det * det, 0.0)))
    with np.errstate(divide="ignore"):
        val = np.log(np.sqrt(sig2)) / abs(tau)
    esc = res.escaped
    mask = esc.copy()
    mask[1:] |= esc[:-1]
    mask[:-1] |= esc[1:]
    mask[:, 1:] |= esc[:, :-1]
    mask[:, :-1] |= esc[:, 1:]
    mask |= ~np.isfinite(val)
    return ScalarFieldGrid((float(x_range[0]), float(x_range[1])), (float(y_range[0]), float(y_range[1])), np.where(mask, 0.0, val), mask)


@dataclass
class Ridge:
    y: np.ndarray
    x: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["y", "x"])
            for a, b in zip(self.y, self.x):
                w.writerow([repr(float(a)), repr(float(b))])


def extract_ridge(fg: ScalarFieldGrid, band: Tuple[float, float]) -> Ridge:
    """Per-row argmax inside the x band, refined by a 3-point parabola."""
    xs = fg.x
    idx = np.flatnonzero((xs >= band[0]) & (xs <= band[1]))
    if len(idx) == 0:
        raise ValueError(f"ridge band {band} contains no grid columns")
    V = np.where(fg.mask[:, idx], -np.inf, fg.values[:, idx])
    k = np.argmax(V, axis=1)
    rows = np.arange(fg.ny)
    i = idx[k]
    keep = np.isfinite(V[rows, k])
    has_nb = (k > 0) & (k < len(idx) - 1)
    lo = fg.values[rows, np.maximum(i - 1, 0)]
    mid = fg.values[rows, i]
    hi = fg.values[rows, np.minimum(i + 1, fg.nx - 1)]
    nb_masked = fg.mask[rows, np.maximum(i - 1, 0)] | fg.mask[rows, np.minimum(i + 1, fg.nx - 1)]
    keep &= ~(has_nb & nb_masked)
    den = lo - 2 * mid + hi
    with np.errstate(divide="ignore", invalid="ignore"):
        shift = np.where(has_nb & (den < 0), 0.5 * (lo - hi) / den, 0.0)
    x = xs[i] + np.clip(shift, -0.5, 0.5) * fg.dx
    return Ridge(fg.y[keep], x[keep])


def target_curve(um: UnperturbedManifold, dm: DesiredManifold, t: float, n: int = 4001) -> np.ndarray:
    """Dense polyline of the target slice at time t, from the parameter bound to the cutoff."""
    cap = um.p_cap_at(t)
    if um.kind == "stable":
        ps = np.linspace(um.p_bound, max(cap, um.p_bound), n)
    else:
        ps = np.linspace(min(cap, um.p_bound), um.p_bound, n)
    return dm(ps, t)


def ridge_offsets(ridge: Ridge, curve: np.ndarray) -> np.ndarray:
    """Horizontal distance from each ridge point to a curve given as a graph over y.

    NaN where the row lies outside the curve's y extent.
    """
    order = np.argsort(curve[:, 1])
    cy, cx = curve[order, 1], curve[order, 0]
    x_at = np.interp(ridge.y, cy, cx, left=np.nan, right=np.nan)
    return np.abs(ridge.x - x_at)


# ---------------------------------------------------------------------------------
# Measured manifold errors


@dataclass
class ManifoldErrorRecord:
    p: np.ndarray
    t: np.ndarray
    error: np.ndarray  # (n_p, n_t, 2): integrated minus target
    e_perp: np.ndarray
    e_par: np.ndarray
    escaped: np.ndarray
    decomposition_residual: float

    def sup_perp(self, mask=None) -> float:
        m = ~self.escaped if mask is None else mask & ~self.escaped
        return float(np.max(np.abs(self.e_perp[m]))) if np.any(m) else math.nan

    def sup_par(self, mask=None) -> float:
        m = ~self.escaped if mask is None else mask & ~self.escaped
        return float(np.max(np.abs(self.e_par[m]))) if np.any(m) else math.nan

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["p", "t", "e_perp", "e_par", "escaped"])
            for j, t in enumerate(self.t):
                for i, p in enumerate(self.p):
                    w.writerow([repr(float(p)), repr(float(t)), repr(float(self.e_perp[i, j])), repr(float(self.e_par[i, j])), int(self.escaped[i, j])])


def measure_manifold_error(
    rhs: Callable,
    um: UnperturbedManifold,
    dm: DesiredManifold,
    p_grid: Sequence[float],
    t_grid: Sequence[float],
    cfg: Optional[IntegratorConfig] = None,
    domain: Optional[Rect] = None,
) -> ManifoldErrorRecord:
    """Integrate seeds placed on the target at t = 0 and compare with the target at each t.

    Times on either side of 0 are integrated separately, each output list in
    monotone order. Errors are split along n = J f/|f| and f/|f| taken at the
    unperturbed point of the same (p, t).
    """
    p_grid = np.asarray(p_grid, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    if cfg is None:
        cfg = IntegratorConfig(method="rk45", abs_tol=1e-11, rel_tol=1e-11)
    seeds = dm(p_grid, 0.0)
    n_p, n_t = len(p_grid), len(t_grid)
    X = np.empty((n_p, n_t, 2))
    esc = np.zeros((n_p, n_t), bool)
    for side in (t_grid >= 0, t_grid < 0):
        j = np.flatnonzero(side)
        if len(j) == 0:
            continue
        order = j[np.argsort(np.abs(t_grid[j]))]
        ts = t_grid[order]
        exact0 = ts == 0
        out_t = ts[~exact0]
        if len(out_t):
            r = integrate_batch(rhs, seeds, 0.0, list(out_t), cfg, domain)
            for k, jj in enumerate(order[~exact0]):
                X[:, jj] = r.points[k]
                esc[:, jj] = r.escaped & (r.exit_time <= t_grid[jj]) if t_grid[jj] > 0 else r.escaped & (r.exit_time >= t_grid[jj])
        for jj in order[exact0]:
            X[:, jj] = seeds
    P, T = np.meshgrid(p_grid, t_grid, indexing="ij")
    err = X - dm(P, T)
    u = um.unit_tangent(um.q_of(P, T))
    n = rotate90(u)
    e_perp = np.sum(n * err, -1)
    e_par = np.sum(u * err, -1)
    recon = e_perp[..., None] * n + e_par[..., None] * u - err
    resid = float(np.max(np.linalg.norm(recon, axis=-1))) if recon.size else 0.0
    return ManifoldErrorRecord(p_grid, t_grid, err, e_perp, e_par, esc, resid)
