"""Continuous model: parameters, coefficient fields and confinement weights.

The density F(v, y) lives on (0, v_F) x (0, inf) and is transported by

    J(v, y) = y (v_E - v) - y_L v            (voltage drift)
    K(y)    = b - y,  b = y_* + c N          (conductance drift)
    a       = a_* + c^2 N                    (conductance diffusion)

where N is the population firing rate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np


class CoefficientBandWarning(UserWarning):
    """Coefficients left the band a_* <= a <= a_ceiling."""


class WeakConnectivityWarning(UserWarning):
    """Connectivity outside the range c < v_F / v_E."""


@dataclass(frozen=True)
class ModelParams:
    v_F: float = 1.0
    v_E: float = 2.0
    y_L: float = 1.0
    a_star: float = 1.0
    y_star: float = 1.0
    c: float = 0.0
    a_ceiling: float | None = None

    def __post_init__(self):
        if not (self.v_F > 0):
            raise ValueError("requires v_F > 0")
        if not (self.v_F < self.v_E):
            raise ValueError("requires v_F < v_E")
        for name in ("y_L", "a_star", "y_star"):
            if not getattr(self, name) > 0:
                raise ValueError(f"requires {name} > 0")
        if not self.c >= 0:
            raise ValueError("requires c >= 0")
        if self.a_ceiling is None:
            object.__setattr__(self, "a_ceiling", 2.0 * (self.a_star + self.y_star) * 1.01)
        if not self.a_ceiling > max(self.a_star, self.y_star):
            raise ValueError("requires a_ceiling > max(a_star, y_star)")

    @property
    def y_F(self) -> float:
        """Conductance at which J(v_F, y) changes sign."""
        return self.y_L * self.v_F / (self.v_E - self.v_F)

    @property
    def weakly_connected(self) -> bool:
        return self.c < self.v_F / self.v_E

    @property
    def rate_ceiling(self) -> float:
        """N* = a_ceiling / (2 (c + c^2)); infinite when uncoupled."""
        s = self.c + self.c**2
        return math.inf if s == 0 else self.a_ceiling / (2.0 * s)


def eval_J(p: ModelParams, v, y):
    return y * (p.v_E - v) - p.y_L * v


@dataclass(frozen=True)
class Coefficients:
    """Frozen conductance coefficients for a given firing rate."""

    N: float
    b: float
    a: float
    in_band: bool

    def drift(self, y):
        return self.b - y


def eval_coeffs(p: ModelParams, N: float, warn: bool = True) -> Coefficients:
    if N < 0:
        raise ValueError(f"firing rate must be nonnegative, got {N}")
    b = p.y_star + p.c * N
    a = p.a_star + p.c**2 * N
    in_band = a <= p.a_ceiling
    if not in_band and warn:
        warnings.warn(
            f"diffusion a = {a:.6g} exceeds a_ceiling = {p.a_ceiling:.6g} (N = {N:.6g})",
            CoefficientBandWarning,
            stacklevel=2,
        )
    return Coefficients(N=float(N), b=b, a=a, in_band=in_band)


def smoothstep5(x):
    """C^2 quintic ramp, 0 for x <= 0 and 1 for x >= 1."""
    x = np.clip(x, 0.0, 1.0)
    return x**3 * (10.0 - 15.0 * x + 6.0 * x**2)


def _ramp_down(p: ModelParams, y, interval):
    lo, hi = interval[0] * p.y_F, interval[1] * p.y_F
    return 1.0 - smoothstep5((y - lo) / (hi - lo))


def cutoff_chi(p: ModelParams, y, interval=(0.5, 1.0)):
    # 1 on [0, y_F/2], 0 on [y_F, inf) by default
    return _ramp_down(p, y, interval)


def cutoff_xi(p: ModelParams, y, interval=(1.0, 2.0)):
    # 1 on [0, y_F], 0 on [2 y_F, inf) by default
    return _ramp_down(p, y, interval)


@dataclass(frozen=True)
class WeightSpec:
    """Admissible confinement weight, optionally twisted near the lateral boundaries.

    ``kind`` is ``"polynomial"`` (omega = <y>^k, k > 1) or ``"exponential"``
    (omega = exp(alpha y), alpha > 0).
    """

    kind: str = "polynomial"
    k: float = 2.0
    alpha: float = 1.0
    twist: bool = False
    # cutoff transition intervals, in units of y_F
    chi_interval: tuple = (0.5, 1.0)
    xi_interval: tuple = (1.0, 2.0)

    def __post_init__(self):
        if self.kind == "polynomial":
            if not self.k > 1:
                raise ValueError(f"polynomial weight requires k > 1, got k = {self.k}")
        elif self.kind == "exponential":
            if not self.alpha > 0:
                raise ValueError(f"exponential weight requires alpha > 0, got alpha = {self.alpha}")
        else:
            raise ValueError(f"unknown weight kind {self.kind!r}")
        (c0, c1), (x0, x1) = self.chi_interval, self.xi_interval
        # J_xi > 0 wherever chi < 1 needs chi_hi <= xi_lo and xi_lo >= 1
        if not (0 < c0 < c1 <= x0 < x1 and x0 >= 1):
            raise ValueError("cutoff intervals must satisfy 0 < chi_lo < chi_hi <= xi_lo < xi_hi, xi_lo >= 1")

    def omega(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "polynomial":
            return (1.0 + y * y) ** (0.5 * self.k)
        return np.exp(self.alpha * y)

    def plain(self) -> "WeightSpec":
        return replace(self, twist=False)

    def twisted(self) -> "WeightSpec":
        return replace(self, twist=True)


def eval_weight(w: WeightSpec, p: ModelParams, v, y, exponent: float = 2.0):
    """Weight at (v, y).

    Plain mode returns omega(y).  Twisted mode returns the weight tuned to the
    L^exponent estimate,

        wt^q = (chi + (1 - chi) (J_xi / y)^(q-1)) w^q,   w = chi + (1 - chi) omega,
        J_xi = xi J(0, y) + (1 - xi) J(v, y),

    with ``exponent = inf`` handled as the pointwise limit q -> inf.
    """
    v = np.asarray(v, dtype=float)
    y = np.asarray(y, dtype=float)
    om = w.omega(y)
    if not w.twist:
        return np.broadcast_to(om, np.broadcast(v, y).shape).copy()
    if exponent < 1:
        raise ValueError("exponent must be >= 1")
    chi = cutoff_chi(p, y, w.chi_interval)
    xi = cutoff_xi(p, y, w.xi_interval)
    base = chi + (1.0 - chi) * om
    jxi = xi * eval_J(p, 0.0, y) + (1.0 - xi) * eval_J(p, v, y)
    # chi < 1 only for y > y_F/2 where J_xi > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(chi < 1.0, jxi / np.where(y > 0, y, 1.0), 1.0)
    if math.isinf(exponent):
        factor = np.where(chi >= 1.0, 1.0, np.where(chi <= 0.0, q, np.maximum(1.0, q)))
    else:
        factor = (chi + (1.0 - chi) * q ** (exponent - 1.0)) ** (1.0 / exponent)
    return np.broadcast_to(factor * base, np.broadcast(v, y).shape).copy()
