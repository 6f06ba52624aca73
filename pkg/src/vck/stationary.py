"""Stationary states for a frozen firing rate and the self-consistent fixed point."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import (
    TRUNCATION_WARN,
    DensityField,
    Grid,
    TruncationWarning,
    assemble_generator,
    firing_rate,
    top_mass_fraction,
)
from .model import ModelParams, WeakConnectivityWarning

CLIP_THRESHOLD = 1e-12


class SingularSystemError(RuntimeError):
    pass


class StationarySolveWarning(UserWarning):
    pass


def _bordered_solve(L: sp.csr_matrix, area: float, row: int) -> np.ndarray:
    n = L.shape[0]
    A = L.tolil(copy=True)
    A[row, :] = np.full(n, area)
    rhs = np.zeros(n)
    rhs[row] = 1.0
    x = spla.spsolve(A.tocsc(), rhs)
    if not np.all(np.isfinite(x)):
        raise SingularSystemError("bordered system is singular")
    return x


def solve_stationary(g: Grid, p: ModelParams, N: float) -> DensityField:
    """Normalized null vector of the generator frozen at firing rate N.

    One generator row is replaced by the mass constraint; the row is that of
    the cell carrying the largest equilibrium mass (found by a first solve).
    Round-off negatives down to -1e-12 are clipped and reported in ``meta``.
    """
    op = assemble_generator(g, p, N)
    L = op.matrix
    area = g.cell_area
    # first pass: row of the cell nearest the drift center at mid voltage
    j0 = int(np.clip(np.searchsorted(g.y, op.coeffs.b), 0, g.n_y - 1))
    guess_row = (g.n_v // 2) * g.n_y + j0
    try:
        x = _bordered_solve(L, area, guess_row)
        row = int(np.argmax(x))
        if row != guess_row:
            x = _bordered_solve(L, area, row)
    except RuntimeError as exc:
        raise SingularSystemError(
            f"bordered solve failed on grid {g.n_v}x{g.n_y}, y_max={g.y_max:.6g}, N={N:.6g}: {exc}"
        ) from exc
    neg = float(max(-x.min(), 0.0))
    if neg > CLIP_THRESHOLD * max(1.0, float(x.max())):
        warnings.warn(
            f"stationary solve produced negative entries down to {-neg:.3g}",
            StationarySolveWarning,
            stacklevel=2,
        )
    x = np.maximum(x, 0.0)
    x /= x.sum() * area
    residual = float(np.abs(L @ x).max())
    M = DensityField(x.reshape(g.shape), g, meta={"N": float(N), "residual": residual, "clipped": neg})
    top = top_mass_fraction(M)
    M.meta["top_mass"] = top
    if top > TRUNCATION_WARN:
        warnings.warn(
            f"{top:.3g} of the stationary mass sits in the top 10% of y-cells",
            TruncationWarning,
            stacklevel=2,
        )
    return M


def inverse_power_stationary(
    g: Grid, p: ModelParams, N: float, shift: float = 1e-3, tol: float = 1e-14, max_iters: int = 200
) -> DensityField:
    """Null vector by shifted inverse iteration; independent of the bordered solve."""
    L = assemble_generator(g, p, N).matrix
    n = L.shape[0]
    lu = spla.splu((L - shift * sp.identity(n)).tocsc())
    x = np.full(n, 1.0 / (n * g.cell_area))
    for _ in range(max_iters):
        y = lu.solve(x)
        y /= y.sum() * g.cell_area
        done = np.abs(y - x).max() <= tol * np.abs(y).max()
        x = y
        if done:
            break
    return DensityField(x.reshape(g.shape), g, meta={"N": float(N)})


def lambda_star(g: Grid, p: ModelParams, N: float) -> float:
    """Firing rate of the stationary state frozen at rate N."""
    if N < 0 or N > p.rate_ceiling:
        raise ValueError(f"N must lie in [0, N*] = [0, {p.rate_ceiling:.6g}], got {N:.6g}")
    out = firing_rate(g, p, solve_stationary(g, p, N))
    if out > p.rate_ceiling:
        warnings.warn(f"Lambda*(N) = {out:.6g} exceeds N* = {p.rate_ceiling:.6g}", stacklevel=2)
    return out


def nonlinear_residual(g: Grid, p: ModelParams, M: DensityField) -> float:
    """max |L_{N(M)} M|, the stationary residual with self-consistent coefficients."""
    N = firing_rate(g, p, M)
    return float(np.abs(assemble_generator(g, p, N).apply(M)).max())


@dataclass
class FixedPointResult:
    N: float
    density: DensityField
    iterations: int
    converged: bool
    log: list = field(default_factory=list)  # (iteration, N, |Lambda*(N) - N|)

    @property
    def residual(self) -> float:
        return self.log[-1][2] if self.log else math.nan


def fixed_point_steady(
    g: Grid,
    p: ModelParams,
    tol: float = 1e-12,
    max_iters: int = 200,
    theta: float = 0.5,
) -> FixedPointResult:
    """Damped iteration N <- (1 - theta) N + theta Lambda*(N) started from N = 0."""
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    if not p.weakly_connected:
        warnings.warn(
            f"c = {p.c:.6g} >= v_F / v_E = {p.v_F / p.v_E:.6g}: outside the weak-connectivity regime",
            WeakConnectivityWarning,
            stacklevel=2,
        )
    N = 0.0
    log = []
    best = None
    for it in range(1, max_iters + 1):
        M = solve_stationary(g, p, N)
        out = firing_rate(g, p, M)
        gap = abs(out - N)
        log.append((it, N, gap))
        if best is None or gap < best[2]:
            best = (N, M, gap, it)
        if gap < tol:
            return FixedPointResult(N, M, it, True, log)
        if p.c == 0:
            # Lambda* is constant and M_N does not depend on N
            M.meta["N"] = out
            log[-1] = (it, out, 0.0)
            return FixedPointResult(out, M, it, True, log)
        N = (1.0 - theta) * N + theta * out
        N = min(max(N, 0.0), p.rate_ceiling)
    N, M, _, it = best
    return FixedPointResult(N, M, it, False, log)
