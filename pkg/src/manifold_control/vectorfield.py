"""Autonomous planar vector fields, their derivatives and saddle points."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .errors import DomainError, NoSaddleError, NotASaddleError
from .expr import Expression

Components = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class Rect:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate rectangle {self}")

    @property
    def diagonal(self) -> float:
        return math.hypot(self.x_max - self.x_min, self.y_max - self.y_min)

    def contains(self, pts, pad: float = 0.0) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        x, y = pts[..., 0], pts[..., 1]
        return (
            (x >= self.x_min + pad)
            & (x <= self.x_max - pad)
            & (y >= self.y_min + pad)
            & (y <= self.y_max - pad)
        )

    def clip(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return np.stack(
            [np.clip(pts[..., 0], self.x_min, self.x_max), np.clip(pts[..., 1], self.y_min, self.y_max)], -1
        )


def rotate90(v) -> np.ndarray:
    """J v = (-v2, v1): counter-clockwise quarter turn, vectorised over leading axes."""
    v = np.asarray(v, dtype=float)
    return np.stack([-v[..., 1], v[..., 0]], -1)


J = np.array([[0.0, -1.0], [1.0, 0.0]])


class VectorField2D:
    """f: Omega -> R^2 with first and second derivatives.

    ``components(x, y)`` must accept broadcastable arrays. ``jacobian`` and
    ``hessian`` are optional analytic derivatives with the same calling
    convention returning ``(..., 2, 2)`` and ``(..., 2, 2, 2)`` arrays, where
    ``H[..., i, j, k] = d^2 f_i / dx_j dx_k``. Missing derivatives fall back
    to central differences.
    """

    def __init__(
        self,
        components: Components,
        domain: Rect,
        jacobian: Optional[Callable] = None,
        hessian: Optional[Callable] = None,
        name: str = "custom",
    ):
        self._components = components
        self.domain = domain
        self._jacobian = jacobian
        self._hessian = hessian
        self.name = name
        self.h_jac = 1e-5 * domain.diagonal
        self.h_hess = 1e-4 * domain.diagonal

    @property
    def jacobian_mode(self) -> str:
        return "analytic" if self._jacobian is not None else "finite-difference"

    @property
    def hessian_mode(self) -> str:
        return "analytic" if self._hessian is not None else "finite-difference"

    def _check(self, pts, pad=0.0):
        pts = np.asarray(pts, dtype=float)
        if pts.shape[-1] != 2:
            raise ValueError("points must have a trailing axis of length 2")
        inside = self.domain.contains(pts, pad)
        if not np.all(inside):
            bad = pts[~inside] if pts.ndim > 1 else pts
            need = " with finite-difference clearance" if pad else ""
            raise DomainError(f"point {np.asarray(bad).reshape(-1, 2)[0].tolist()} outside domain{need}")
        return pts

    def raw(self, pts) -> np.ndarray:
        """f without the domain check; integrators police the domain themselves."""
        pts = np.asarray(pts, dtype=float)
        u, v = self._components(pts[..., 0], pts[..., 1])
        return np.stack(np.broadcast_arrays(u, v), -1)

    def __call__(self, pts) -> np.ndarray:
        return self.raw(self._check(pts))

    eval = __call__

    def raw_jacobian(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if self._jacobian is not None:
            return np.asarray(self._jacobian(pts[..., 0], pts[..., 1]), dtype=float)
        h = self.h_jac
        cols = []
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            cols.append((self.raw(pts + e) - self.raw(pts - e)) / (2 * h))
        return np.stack(cols, -1)

    def jacobian(self, pts) -> np.ndarray:
        pad = 0.0 if self._jacobian is not None else self.h_jac
        return self.raw_jacobian(self._check(pts, pad))

    def raw_hessian(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if self._hessian is not None:
            return np.asarray(self._hessian(pts[..., 0], pts[..., 1]), dtype=float)
        h = self.h_hess
        if self._jacobian is not None:
            out = []
            for k in range(2):
                e = np.zeros(2)
                e[k] = h
                out.append((self.raw_jacobian(pts + e) - self.raw_jacobian(pts - e)) / (2 * h))
            return np.stack(out, -1)
        H = np.empty(pts.shape[:-1] + (2, 2, 2))
        for j in range(2):
            for k in range(2):
                ej = np.zeros(2)
                ek = np.zeros(2)
                ej[j] = h
                ek[k] = h
                H[..., :, j, k] = (
                    self.raw(pts + ej + ek) - self.raw(pts + ej - ek) - self.raw(pts - ej + ek) + self.raw(pts - ej - ek)
                ) / (4 * h * h)
        return H

    def hessian(self, pts) -> np.ndarray:
        pad = 0.0 if self._hessian is not None else 2 * self.h_hess
        return self.raw_hessian(self._check(pts, pad))

    def with_domain(self, domain: Rect) -> "VectorField2D":
        return VectorField2D(self._components, domain, self._jacobian, self._hessian, self.name)


def eval_f(field: VectorField2D, x) -> np.ndarray:
    return field(x)


def eval_jacobian(field: VectorField2D, x) -> np.ndarray:
    return field.jacobian(x)


@dataclass(frozen=True)
class SaddleData:
    a: np.ndarray
    lambda_s: float
    lambda_u: float
    v_s: np.ndarray
    v_u: np.ndarray

    def as_dict(self):
        return {
            "a": self.a.tolist(),
            "lambda_s": self.lambda_s,
            "lambda_u": self.lambda_u,
            "v_s": self.v_s.tolist(),
            "v_u": self.v_u.tolist(),
        }


def _orient(v):
    v = v / np.linalg.norm(v)
    first = v[0] if abs(v[0]) > 1e-14 else v[1]
    return -v if first < 0 else v


def find_saddle(
    field: VectorField2D,
    guess,
    max_iter: int = 50,
    tol_fixedpoint: float = 1e-12,
    tol_eig: float = 1e-8,
) -> SaddleData:
    """Newton iteration on f(a) = 0 followed by an eigen-classification of Df(a)."""
    x = np.array(guess, dtype=float)
    for _ in range(max_iter):
        fx = field.raw(x)
        if np.linalg.norm(fx) < tol_fixedpoint:
            break
        A = field.raw_jacobian(x)
        try:
            x = x - np.linalg.solve(A, fx)
        except np.linalg.LinAlgError as exc:
            raise NoSaddleError(f"singular Jacobian during Newton at {x.tolist()}") from exc
        if not np.all(np.isfinite(x)):
            raise NoSaddleError("Newton iteration diverged")
    else:
        if np.linalg.norm(field.raw(x)) >= tol_fixedpoint:
            raise NoSaddleError(f"Newton did not converge from {list(guess)} in {max_iter} iterations")
    if not field.domain.contains(x):
        raise NoSaddleError(f"fixed point {x.tolist()} lies outside the domain")

    A = field.raw_jacobian(x)
    w, V = np.linalg.eig(A)
    if np.any(np.abs(w.imag) > tol_eig):
        raise NotASaddleError(f"complex eigenvalues {w.tolist()} at {x.tolist()}")
    w = w.real
    V = V.real
    if not (w.min() < 0 < w.max()):
        raise NotASaddleError(f"eigenvalues {w.tolist()} at {x.tolist()} do not have opposite signs")
    i_s, i_u = int(np.argmin(w)), int(np.argmax(w))
    v_s, v_u = _orient(V[:, i_s]), _orient(V[:, i_u])
    for lam, v in ((w[i_s], v_s), (w[i_u], v_u)):
        if np.linalg.norm(A @ v - lam * v) > tol_eig * max(1.0, abs(lam)):
            raise NotASaddleError("eigenvector residual above tolerance")
    return SaddleData(a=x, lambda_s=float(w[i_s]), lambda_u=float(w[i_u]), v_s=v_s, v_u=v_u)


@dataclass(frozen=True)
class TaylorGreenParams:
    U: float = 1.0
    L: float = 1.0

    def __post_init__(self):
        if not (self.U > 0 and self.L > 0):
            raise ValueError("Taylor-Green requires U > 0 and L > 0")


def taylor_green(params: TaylorGreenParams = TaylorGreenParams(), domain: Optional[Rect] = None) -> VectorField2D:
    """Steady cellular flow f = (-pi U sin(pi x/L) cos(pi y/L), pi U cos(pi x/L) sin(pi y/L))."""
    U, L = params.U, params.L
    k = math.pi / L
    if domain is None:
        domain = Rect(0.0, 2 * L, 0.0, L)

    def comps(x, y):
        return -math.pi * U * np.sin(k * x) * np.cos(k * y), math.pi * U * np.cos(k * x) * np.sin(k * y)

    def jac(x, y):
        sx, cx, sy, cy = np.sin(k * x), np.cos(k * x), np.sin(k * y), np.cos(k * y)
        c = math.pi * U * k
        out = np.empty(np.broadcast(x, y).shape + (2, 2))
        out[..., 0, 0] = -c * cx * cy
        out[..., 0, 1] = c * sx * sy
        out[..., 1, 0] = -c * sx * sy
        out[..., 1, 1] = c * cx * cy
        return out

    def hess(x, y):
        sx, cx, sy, cy = np.sin(k * x), np.cos(k * x), np.sin(k * y), np.cos(k * y)
        c = math.pi * U * k * k
        out = np.empty(np.broadcast(x, y).shape + (2, 2, 2))
        out[..., 0, 0, 0] = c * sx * cy
        out[..., 0, 0, 1] = c * cx * sy
        out[..., 0, 1, 0] = c * cx * sy
        out[..., 0, 1, 1] = c * sx * cy
        out[..., 1, 0, 0] = -c * cx * sy
        out[..., 1, 0, 1] = -c * sx * cy
        out[..., 1, 1, 0] = -c * sx * cy
        out[..., 1, 1, 1] = -c * cx * sy
        return out

    return VectorField2D(comps, domain, jac, hess, name="taylor_green")


def expression_field(fx: str, fy: str, domain: Rect) -> VectorField2D:
    """Field defined by two formulas in x and y; derivatives by central differences."""
    ex, ey = Expression(fx, ("x", "y")), Expression(fy, ("x", "y"))

    def comps(x, y):
        return ex(x=x, y=y), ey(x=x, y=y)

    return VectorField2D(comps, domain, name="expression")


def linear_field(A, domain: Rect) -> VectorField2D:
    A = np.asarray(A, dtype=float)

    def comps(x, y):
        return A[0, 0] * x + A[0, 1] * y, A[1, 0] * x + A[1, 1] * y

    def jac(x, y):
        return np.broadcast_to(A, np.broadcast(x, y).shape + (2, 2)).copy()

    def hess(x, y):
        return np.zeros(np.broadcast(x, y).shape + (2, 2, 2))

    return VectorField2D(comps, domain, jac, hess, name="linear")


def velocity_scale(field: VectorField2D, n: int = 64) -> float:
    """Sampled sup |f| over the domain, used to scale near-saddle cutoffs."""
    d = field.domain
    X, Y = np.meshgrid(np.linspace(d.x_min, d.x_max, n), np.linspace(d.y_min, d.y_max, n))
    s = float(np.max(np.linalg.norm(field.raw(np.stack([X, Y], -1)), axis=-1)))
    return s if s > 0 else 1.0
