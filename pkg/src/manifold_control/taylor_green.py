"""Closed-form Taylor-Green scenario: heteroclinic, target manifold and control.

These formulas double as the oracle for the generic pipeline. The stable
case moves the heteroclinic x = L (running from (L, L) down to (L, 0)) to a
time-varying curve; the unstable case is its time reflection, built on the
same heteroclinic viewed as the unstable manifold of (L, L).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .vectorfield import TaylorGreenParams, taylor_green

PI = math.pi


def _atan_exp(z):
    """atan(e^z) without overflow: pi/2 - atan(e^-z) once z is large."""
    z = np.asarray(z, dtype=float)
    with np.errstate(over="ignore"):
        big = PI / 2 - np.arctan(np.exp(-np.maximum(z, 30.0)))
        return np.where(z > 30, big, np.arctan(np.exp(np.minimum(z, 30.0))))


@dataclass(frozen=True)
class TGScenario:
    params: TaylorGreenParams = field(default_factory=TaylorGreenParams)
    eps: float = 0.1
    T_s: float = -1.0
    S: float = -1.0
    kind: str = "stable"

    def __post_init__(self):
        if self.kind == "stable":
            if not (self.T_s < 0 and self.S <= 0):
                raise ValueError("stable scenario needs T_s < 0 and S <= 0")
        elif self.kind == "unstable":
            if not (self.T_s > 0 and self.S >= 0):
                raise ValueError("unstable scenario needs T_u > 0 and an upper parameter bound >= 0")
        else:
            raise ValueError(f"unknown kind {self.kind!r}")

    @property
    def U(self):
        return self.params.U

    @property
    def L(self):
        return self.params.L

    @property
    def sign(self):
        """+1 for the stable target, -1 for its time reflection."""
        return 1.0 if self.kind == "stable" else -1.0

    def field(self, domain=None):
        return taylor_green(self.params, domain)


def stable_preset(eps: float = 0.1) -> TGScenario:
    return TGScenario(TaylorGreenParams(1.0, 1.0), eps, -1.0, -1.0, "stable")


def mirror_preset(eps: float = 0.1) -> TGScenario:
    return TGScenario(TaylorGreenParams(1.0, 1.0), eps, 1.0, 1.0, "unstable")


def tg_heteroclinic(params: TaylorGreenParams, t):
    """(L, (2L/pi) atan(exp(-pi^2 U t / L))), the orbit through (L, L/2) at t = 0."""
    U, L = params.U, params.L
    t = np.asarray(t, dtype=float)
    y = 2 * L / PI * _atan_exp(-PI**2 * U * t / L)
    return np.stack([np.full_like(y, L), y], -1)


def tg_heteroclinic_speed(params: TaylorGreenParams, t):
    """|f| along the heteroclinic: pi U sech(pi^2 U t / L)."""
    z = PI**2 * params.U * np.asarray(t, dtype=float) / params.L
    return PI * params.U / np.cosh(np.minimum(np.abs(z), 700))


def tg_offset(scn: TGScenario, p, t):
    """Horizontal displacement of the target, as a multiple of eps * L."""
    U, L = scn.U, scn.L
    p = np.asarray(p, dtype=float)
    t = np.asarray(t, dtype=float)
    return np.exp(-scn.sign * U * p / L) * np.cos(U * (t - p) / L)


def tg_desired(scn: TGScenario, p, t):
    y = tg_heteroclinic(scn.params, np.asarray(t) - scn.T_s + np.asarray(p))
    x = y[..., 0] + scn.eps * scn.L * tg_offset(scn, p, t)
    return np.stack([x, y[..., 1]], -1)


def tg_desired_dp(scn: TGScenario, p, t):
    U, L = scn.U, scn.L
    p = np.asarray(p, dtype=float)
    t = np.asarray(t, dtype=float)
    q = t - scn.T_s + p
    e = np.exp(-scn.sign * U * p / L)
    dox = -scn.sign * U / L * e * np.cos(U * (t - p) / L) + U / L * e * np.sin(U * (t - p) / L)
    vy = -PI * U * np.sin(PI * tg_heteroclinic(scn.params, q)[..., 1] / L)
    return np.stack([scn.eps * L * dox, vy], -1)


def tg_p_of_y(scn: TGScenario, y, t):
    """Parameter p with y(p, t) = y: -(L/(pi^2 U)) ln tan(pi y / 2L) + T - t."""
    y = np.asarray(y, dtype=float)
    if np.any((y <= 0) | (y >= scn.L)):
        raise DomainError("p(y, t) needs 0 < y < L")
    return -scn.L / (PI**2 * scn.U) * np.log(np.tan(PI * y / (2 * scn.L))) + scn.T_s - np.asarray(t, dtype=float)


def tg_y_of_p(scn: TGScenario, p, t):
    return tg_heteroclinic(scn.params, np.asarray(t) - scn.T_s + np.asarray(p))[..., 1]


def tg_y_max(scn: TGScenario, t):
    """Height of the segment end p = S in the slice at time t (the top of the stable segment)."""
    return tg_y_of_p(scn, scn.S, t)


def tg_manifold_slice(scn: TGScenario, y, t):
    """x on the target curve at height y in the slice at time t."""
    p = tg_p_of_y(scn, y, t)
    return scn.L + scn.eps * scn.L * tg_offset(scn, p, t)


def _log_tan_half(y, L, clip):
    """ln tan(pi y / 2L), evaluated from whichever of y and L - y is smaller.

    ln tan(pi (L - y) / 2L) = -ln tan(pi y / 2L), so both ends of the strip keep
    full relative precision. With ``clip`` both distances are floored at
    1e-15 L. The control grows only like tan(pi y / 2L)^(1/pi^2) at the strip
    edges, so the floor gives a bounded, mirror-symmetric extension for
    trajectories that leave the strip.
    """
    y = np.asarray(y, dtype=float)
    lo = 1e-15 * L
    a, b = y, L - y
    if clip:
        a, b = np.maximum(a, lo), np.maximum(b, lo)
    elif np.any((a <= 0) | (b <= 0)):
        raise DomainError("control needs 0 < y < L")
    with np.errstate(divide="ignore", invalid="ignore"):
        near_top = b < a
        return np.where(near_top, -np.log(np.tan(PI * np.minimum(b, L / 2) / (2 * L))), np.log(np.tan(PI * np.minimum(a, L / 2) / (2 * L))))


def tg_control(scn: TGScenario, x, y, t, clip: bool = False):
    """Full-field control velocity (x-part depends on y alone, plus a term vanishing on x = L).

    Both parts are divergence-free, the y-part being a function of x only.
    """
    U, L = scn.U, scn.L
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    p = -L / (PI**2 * U) * _log_tan_half(y, L, clip) + scn.T_s - t
    with np.errstate(over="ignore"):
        e = np.exp(-scn.sign * U * p / L)
    w = U * (t - p) / L
    gx = -U * e * (np.sin(w) + PI**2 * np.cos(PI * y / L) * np.cos(w))
    gx = np.where(e == 0, 0.0, gx)
    # the unstable case is the image of the stable one under (x, y, t) -> (x, L - y, -t)
    gy = scn.sign * U * np.sin(PI * np.asarray(x, dtype=float) / L) * np.sin(U * t / L)
    return np.stack(np.broadcast_arrays(gx, gy), -1)


def tg_condition(scn: TGScenario, p, t):
    """The on-manifold horizontal control value as a function of (p, t).

    Uses cos(pi y / L) = tanh(pi^2 U q / L) on the heteroclinic, q = t - T + p,
    so no round trip through p(y, t) is needed.
    """
    U, L = scn.U, scn.L
    p = np.asarray(p, dtype=float)
    t = np.asarray(t, dtype=float)
    q = t - scn.T_s + p
    e = np.exp(-scn.sign * U * p / L)
    w = U * (t - p) / L
    return -U * e * (np.sin(w) + PI**2 * np.tanh(PI**2 * U * q / L) * np.cos(w))


def tg_controlled_rhs(scn: TGScenario, clip: bool = True):
    """x' = f(x) + eps g(x, t); y is clipped into (0, L) for the parameter lookup."""
    f = scn.field()

    def rhs(X, t):
        X = np.asarray(X, dtype=float)
        return f.raw(X) + scn.eps * tg_control(scn, X[..., 0], X[..., 1], t, clip=clip)

    return rhs
