"""Truncated cell grid, density fields and the discrete VCk generator.

Cells are indexed (i, j) with i along v and j along y; flattened vectors use
``i * n_y + j`` so that the y-operator is block diagonal.

Transport in v is first-order donor cell.  Rows with y_j > y_F have their
outflow at v = v_F re-injected at v = 0 (reset); rows with y_j < y_F have no
flux through either lateral boundary.  Drift-diffusion in y uses exponentially
fitted (Scharfetter-Gummel / Chang-Cooper type) fluxes with zero total flux at
y = 0 and at the artificial top boundary y = y_max.
"""

from __future__ import annotations

import csv
import functools
import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.sparse as sp
from scipy.special import exprel

from .model import Coefficients, ModelParams, eval_coeffs, eval_J

NUDGE = 1e-6
TRUNCATION_WARN = 1e-6


class TruncationWarning(UserWarning):
    """Noticeable mass near the artificial boundary y = y_max."""


@dataclass(frozen=True)
class Grid:
    n_v: int
    n_y: int
    y_max: float
    v_F: float
    y_F: float

    @property
    def dv(self) -> float:
        return self.v_F / self.n_v

    @property
    def dy(self) -> float:
        return self.y_max / self.n_y

    @property
    def cell_area(self) -> float:
        return self.dv * self.dy

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_v, self.n_y)

    @property
    def size(self) -> int:
        return self.n_v * self.n_y

    @property
    def v(self) -> np.ndarray:
        return (np.arange(self.n_v) + 0.5) * self.dv

    @property
    def y(self) -> np.ndarray:
        return (np.arange(self.n_y) + 0.5) * self.dy

    @property
    def v_faces(self) -> np.ndarray:
        return np.arange(self.n_v + 1) * self.dv

    @property
    def y_faces(self) -> np.ndarray:
        return np.arange(self.n_y + 1) * self.dy

    @property
    def j_F(self) -> int:
        """Index of the first y-cell whose center lies above y_F."""
        return int(np.searchsorted(self.y, self.y_F, side="right"))

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.v, self.y, indexing="ij")

    def eps_region(self, eps: float) -> np.ndarray:
        """Mask of whole cells inside {min(v, v_F - v) > eps, y < 1/eps}."""
        vf = self.v_faces
        yf = self.y_faces
        in_v = (vf[:-1] >= eps) & (vf[1:] <= self.v_F - eps)
        in_y = yf[1:] <= 1.0 / eps
        return in_v[:, None] & in_y[None, :]


def build_grid(p: ModelParams, n_v: int = 64, n_y: int = 128, y_max: float = 8.0) -> Grid:
    if n_v < 4 or n_y < 4:
        raise ValueError("requires n_v, n_y >= 4")
    y_F = p.y_F
    if not y_max > 2.0 * y_F:
        raise ValueError(f"requires y_max > 2 y_F = {2.0 * y_F:.6g}, got y_max = {y_max:.6g}")
    dy = y_max / n_y
    k = round(y_F / dy)
    if abs(y_F - k * dy) < 1e-12 * dy:
        y_max *= 1.0 + NUDGE
    if y_max <= p.y_star + 6.0 * np.sqrt(p.a_star):
        warnings.warn(
            f"y_max = {y_max:.6g} is within 6 standard deviations of the conductance drift center",
            TruncationWarning,
            stacklevel=2,
        )
    return Grid(n_v=int(n_v), n_y=int(n_y), y_max=float(y_max), v_F=p.v_F, y_F=y_F)


@dataclass
class DensityField:
    values: np.ndarray
    grid: Grid
    t: float = 0.0
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.shape)

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_area)

    def copy(self) -> "DensityField":
        return DensityField(self.values.copy(), self.grid, self.t, dict(self.meta))

    def normalized(self) -> "DensityField":
        return DensityField(self.values / self.mass, self.grid, self.t, dict(self.meta))


def top_mass_fraction(F: DensityField, fraction: float = 0.1) -> float:
    """Share of mass held by the top ``fraction`` of y-cells."""
    n_top = max(1, int(round(fraction * F.grid.n_y)))
    total = F.values.sum()
    return float(F.values[:, -n_top:].sum() / total) if total > 0 else 0.0


def _values(F) -> np.ndarray:
    return F.values if isinstance(F, DensityField) else np.asarray(F, dtype=float)


def bernoulli(z):
    """B(z) = z / (e^z - 1), with B(0) = 1."""
    return 1.0 / exprel(z)


@functools.lru_cache(maxsize=32)
def transport_operator(g: Grid, p: ModelParams) -> sp.csr_matrix:
    """v-transport with reset coupling; independent of the firing rate."""
    n_v, n_y, dv = g.n_v, g.n_y, g.dv
    y = g.y
    jf = g.j_F
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    J = eval_J(p, g.v_faces[:, None], y[None, :])  # (n_v + 1, n_y)
    Jp = np.maximum(J, 0.0) / dv
    Jm = np.maximum(-J, 0.0) / dv
    jj = np.arange(n_y)
    # interior faces k = 1..n_v-1 between cells k-1 and k
    for k in range(1, n_v):
        left = (k - 1) * n_y + jj
        right = k * n_y + jj
        # flux J+ F_left leaves left, enters right
        add(left, left, -Jp[k])
        add(right, left, Jp[k])
        # flux J- F_right leaves right, enters left
        add(right, right, -Jm[k])
        add(left, right, Jm[k])
    # reset rows: outflow of the last column re-enters the first column
    jr = jj[jf:]
    last = (n_v - 1) * n_y + jr
    first = jr
    out = Jp[n_v, jf:]
    add(last, last, -out)
    add(first, last, out)
    L = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(g.size, g.size),
    ).tocsr()
    L.sum_duplicates()
    return L


def conductance_tridiagonal(g: Grid, coeffs: Coefficients):
    """Lower, diagonal and upper bands of the y drift-diffusion operator on one column."""
    n, dy, a = g.n_y, g.dy, coeffs.a
    yf = g.y_faces[1:-1]
    z = coeffs.drift(yf) * dy / a
    alpha = a / dy**2 * bernoulli(-z)  # F_j -> F_{j+1}
    beta = a / dy**2 * bernoulli(z)  # F_{j+1} -> F_j
    lower = np.zeros(n)
    upper = np.zeros(n)
    diag = np.zeros(n)
    lower[1:] = alpha
    upper[:-1] = beta
    diag[:-1] -= alpha
    diag[1:] -= beta
    return lower, diag, upper


class GeneratorOperator:
    """Discrete generator L = L_v + L_y for a frozen firing rate N.

    Acts on cell averages; ``apply(F)`` returns dF/dt.  Instances are treated
    as immutable; per-time-step factorizations are cached on first use.
    """

    def __init__(self, grid: Grid, params: ModelParams, N: float):
        self.grid = grid
        self.params = params
        self.N = float(N)
        self.coeffs = eval_coeffs(params, self.N)
        self.transport = transport_operator(grid, params)
        self.y_lower, self.y_diag, self.y_upper = conductance_tridiagonal(grid, self.coeffs)
        self._cache: dict = {}

    @functools.cached_property
    def conductance(self) -> sp.csr_matrix:
        n = self.grid.n_y
        T = sp.diags(
            [self.y_lower[1:], self.y_diag, self.y_upper[:-1]], [-1, 0, 1], shape=(n, n)
        )
        return sp.kron(sp.identity(self.grid.n_v), T, format="csr")

    @functools.cached_property
    def matrix(self) -> sp.csr_matrix:
        return (self.transport + self.conductance).tocsr()

    def apply(self, F) -> np.ndarray:
        x = _values(F).ravel()
        return (self.matrix @ x).reshape(self.grid.shape)

    def max_speed(self) -> float:
        """max |J| over the v-faces actually used in the transport."""
        g = self.grid
        return float(np.abs(eval_J(self.params, g.v_faces[:, None], g.y[None, :])).max())

    def imex_dt_bound(self) -> float:
        """Largest dt keeping the explicit transport part nonnegative."""
        rate = -self.transport.diagonal()
        return float(1.0 / rate.max())

    def explicit_dt_bound(self) -> float:
        rate = -self.matrix.diagonal()
        return float(1.0 / rate.max())

    def triplets(self):
        m = self.matrix.tocoo()
        return m.row, m.col, m.data

    def export_triplets(self, path) -> None:
        rows, cols, vals = self.triplets()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "value"])
            for r, c, v in zip(rows, cols, vals):
                w.writerow([int(r), int(c), f"{v:.17g}"])


def assemble_generator(g: Grid, p: ModelParams, N: float) -> GeneratorOperator:
    return GeneratorOperator(g, p, N)


def reset_flux(g: Grid, p: ModelParams, F) -> np.ndarray:
    """Per-row outflow flux J(v_F, y_j) F_{n_v-1, j} on the reset band (zero elsewhere)."""
    vals = _values(F)
    flux = np.zeros(g.n_y)
    jf = g.j_F
    flux[jf:] = eval_J(p, g.v_F, g.y[jf:]) * vals[-1, jf:]
    return flux


def firing_rate(g: Grid, p: ModelParams, F) -> float:
    """Discrete firing rate: total reset flux through v = v_F."""
    return float(reset_flux(g, p, F).sum() * g.dy)


def restrict(F: DensityField, coarse: Grid) -> DensityField:
    """Cell averages of F on a coarser grid whose cells are unions of fine cells."""
    g = F.grid
    rv, ry = g.n_v // coarse.n_v, g.n_y // coarse.n_y
    ok = (
        rv * coarse.n_v == g.n_v
        and ry * coarse.n_y == g.n_y
        and abs(coarse.y_max - g.y_max) <= 1e-12 * g.y_max
        and coarse.v_F == g.v_F
    )
    if not ok:
        raise ValueError("coarse grid must share the domain and divide the fine cell counts")
    vals = F.values.reshape(coarse.n_v, rv, coarse.n_y, ry).mean(axis=(1, 3))
    return DensityField(vals, coarse, F.t, dict(F.meta))


def l1_distance(F: DensityField, G: DensityField) -> float:
    if F.grid != G.grid:
        raise ValueError("fields live on different grids")
    return float(np.abs(F.values - G.values).sum() * F.grid.cell_area)
