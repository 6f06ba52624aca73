"""Constructive Doblin-Harris certificates for finite nonnegative semigroups.

A semigroup is given by one application S_T (a nonnegative matrix acting on
column vectors), a positive conserved functional phi with phi^T S_T = phi^T,
and a lattice norm ||f|| = max_i |f_i| w_i ("sup") or sum_i |f_i| w_i ("l1").
The seminorm is [f]_psi = sum_i |f_i| psi_i.

The certificate combines

* a Lyapunov bound      ||S f|| <= gamma_L ||f|| + K [f]_phi,
* a minorization        S f >= eta g [f]_psi         for f >= 0,
* an interpolation      [f]_phi <= xi ||f|| + Xi [f]_psi,

into a contraction |||S f||| <= gamma |||f||| on the zero-mean subspace for
the blended norm |||f||| = [f]_phi + beta ||f||.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from .grid import Grid, assemble_generator
from .model import ModelParams, WeightSpec, eval_weight

MODES = ("sup", "l1")
DEFAULT_EPS_LADDER = (0.2, 0.1, 0.05)
DEFAULT_BETAS = np.logspace(-6.0, 0.0, 601)


class HarrisFailure(RuntimeError):
    """A hypothesis could not be verified; ``constraint`` names the binding one."""

    def __init__(self, message: str, constraint: str):
        super().__init__(message)
        self.constraint = constraint


@dataclass
class FiniteLatticeSemigroup:
    S: np.ndarray
    phi: np.ndarray
    weights: np.ndarray
    T: float = 1.0
    mode: str = "sup"

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        n = self.S.shape[0]
        if self.S.shape != (n, n) or self.phi.shape != (n,) or self.weights.shape != (n,):
            raise ValueError("S must be square and phi, weights must match its size")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.S.min() < 0:
            raise ValueError(f"S has negative entries (min {self.S.min():.3g})")
        if self.phi.min() <= 0 or self.weights.min() <= 0:
            raise ValueError("phi and weights must be strictly positive")
        drift = np.abs(self.phi @ self.S - self.phi).max() / self.phi.max()
        if drift > 1e-12:
            raise ValueError(f"S is not conservative for phi (relative defect {drift:.3g})")

    @property
    def size(self) -> int:
        return self.S.shape[0]

    def norm(self, f) -> float:
        a = np.abs(f) * self.weights
        return float(a.max() if self.mode == "sup" else a.sum())

    def seminorm(self, f, psi=None) -> float:
        psi = self.phi if psi is None else psi
        return float(np.abs(f) @ psi)

    def mean(self, f) -> float:
        return float(self.phi @ f)

    @property
    def c_phi(self) -> float:
        """sup [f]_phi / ||f||."""
        r = self.phi / self.weights
        return float(r.max() if self.mode == "l1" else r.sum())

    @property
    def norm_ratio(self) -> float:
        """sup ||f|| / [f]_phi."""
        return float((self.weights / self.phi).max())


def _sup_excess(sg: FiniteLatticeSemigroup, K: float) -> float:
    A = sg.weights[:, None] * sg.S - K * sg.phi[None, :]
    return float((np.maximum(A, 0.0) / sg.weights[None, :]).sum(axis=1).max())


@dataclass
class LyapunovConstants:
    gamma_L: float
    K: float


def lyapunov_constants(sg: FiniteLatticeSemigroup, gamma_L: float = 0.5) -> LyapunovConstants:
    """Smallest K with ||S f|| <= gamma_L ||f|| + K [f]_phi for all f.

    For the l1 norm the sharp constant is a maximum over columns of S; for
    the sup norm it is the root of a per-row piecewise-linear condition.
    Fails when K is so large that the bound says nothing beyond the norm
    equivalence ||f|| <= R [f]_phi, i.e. K >= (1 - gamma_L) R.
    """
    if not 0 < gamma_L < 1:
        raise ValueError("gamma_L must lie in (0, 1)")
    if sg.mode == "l1":
        col = sg.weights @ sg.S
        K = max(0.0, float(((col - gamma_L * sg.weights) / sg.phi).max()))
    else:
        hi = float((sg.weights[:, None] * sg.S / sg.phi[None, :]).max())
        lo = 0.0
        if _sup_excess(sg, lo) <= gamma_L:
            hi = lo
        else:
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if _sup_excess(sg, mid) <= gamma_L:
                    hi = mid
                else:
                    lo = mid
                if hi - lo <= 1e-15 * hi:
                    break
        K = hi
    if K >= (1.0 - gamma_L) * sg.norm_ratio * (1.0 - 1e-9):
        raise HarrisFailure(
            f"no dissipation at gamma_L = {gamma_L}: K = {K:.6g} only restates norm equivalence",
            "lyapunov",
        )
    return LyapunovConstants(gamma_L, K)


@dataclass
class Minorization:
    eta: float
    g: np.ndarray  # normalized so that <phi, g> = 1


def minorization_constants(sg: FiniteLatticeSemigroup, psi) -> Minorization:
    """Largest eta g with S_ij >= eta g_i psi_j on supp(psi)."""
    psi = np.asarray(psi, dtype=float)
    if psi.min() < 0 or not psi.any():
        raise ValueError("psi must be nonnegative and nonzero")
    supp = psi > 0
    raw = (sg.S[:, supp] / psi[supp][None, :]).min(axis=1)
    eta = float(sg.phi @ raw)
    if not eta > 0:
        raise HarrisFailure("minorized profile vanishes: insufficient mixing over supp(psi)", "minorization")
    return Minorization(eta, raw / eta)


def interpolation_constant(sg: FiniteLatticeSemigroup, psi, Xi: float = 1.0) -> float:
    """Smallest xi with [f]_phi <= xi ||f|| + Xi [f]_psi, by per-coordinate maximization."""
    r = np.maximum(sg.phi - Xi * np.asarray(psi, dtype=float), 0.0) / sg.weights
    return float(r.max() if sg.mode == "l1" else r.sum())


def smallest_Xi(sg: FiniteLatticeSemigroup, psi, xi_max: float) -> float | None:
    """Smallest Xi with interpolation_constant(sg, psi, Xi) <= xi_max, or None."""
    psi = np.asarray(psi, dtype=float)
    supp = psi > 0
    hi = float((sg.phi[supp] / psi[supp]).max())
    if interpolation_constant(sg, psi, hi) > xi_max:
        return None
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if interpolation_constant(sg, psi, mid) <= xi_max:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-14 * hi:
            break
    return hi


@dataclass
class HarrisCertificate:
    gamma_L: float
    K: float
    eta: float
    g: np.ndarray = field(repr=False)
    psi: np.ndarray = field(repr=False)
    eps: float
    xi: float
    Xi: float
    A: float
    c_2A: float
    gamma_H: float
    beta: float
    gamma: float
    T: float
    C: float

    @property
    def lambda2(self) -> float:
        return math.log(self.gamma) / self.T

    def blended_norm(self, sg: FiniteLatticeSemigroup, f) -> float:
        return sg.seminorm(f) + self.beta * sg.norm(f)

    def to_record(self) -> dict:
        rec = {k: v for k, v in asdict(self).items() if k not in ("g", "psi")}
        rec["lambda2"] = self.lambda2
        return rec

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            for k, v in self.to_record().items():
                fh.write(f"{k} = {v:.17g}\n")


def contraction_factor(gamma_L: float, K: float, gamma_H: float, A: float, beta: float) -> float:
    """Factor gamma in |||S f||| <= gamma |||f||| on zero-mean f.

    Where ||f|| <= A [f]_phi the coupling bound [S f] <= gamma_H [f] applies;
    elsewhere [S f] <= [f] and the Lyapunov bound pays for the rest.
    """
    inside = max(gamma_H + beta * K, gamma_L)
    outside = (1.0 + beta * (K + A * gamma_L)) / (1.0 + A * beta)
    return max(inside, outside)


def certify(
    sg: FiniteLatticeSemigroup,
    psi_family,
    Xi: float | None = None,
    gamma_L_targets=(0.25, 0.5, 0.75),
    A_factors=(1.05, 1.25, 1.5, 2.0, 3.0, 5.0),
    betas=DEFAULT_BETAS,
) -> HarrisCertificate:
    """Build the contraction certificate, returning the smallest gamma found.

    ``psi_family`` is a sequence of (eps, psi) pairs ordered by decreasing eps;
    for each (gamma_L, A) the first eps with 2 A xi_eps <= 1/2 is used.  With
    ``Xi=None`` each Xi_eps is the smallest value meeting that condition;
    otherwise Xi is fixed and xi_eps follows from it.
    """
    psi_family = [(float(e), np.asarray(psi, dtype=float)) for e, psi in psi_family]
    if not psi_family:
        raise ValueError("psi_family is empty")
    best = None
    reasons = []
    minor_cache: dict[float, Minorization] = {}
    for gL in gamma_L_targets:
        try:
            lyap = lyapunov_constants(sg, gL)
        except HarrisFailure as exc:
            reasons.append((exc.constraint, str(exc)))
            continue
        A_min = lyap.K / (1.0 - gL)
        for fac in A_factors:
            A = fac * A_min
            chosen = None
            for eps, psi in psi_family:
                X = smallest_Xi(sg, psi, 0.25 / A) if Xi is None else Xi
                if X is None:
                    continue
                xi = interpolation_constant(sg, psi, X)
                if 2.0 * A * xi <= 0.5:
                    chosen = (eps, psi, xi, X)
                    break
            if chosen is None:
                reasons.append(("interpolation", f"no eps in ladder gives 2 A xi <= 1/2 (A = {A:.4g})"))
                continue
            eps, psi, xi, X = chosen
            mz = minor_cache.get(eps)
            if mz is None:
                mz = minor_cache[eps] = minorization_constants(sg, psi)
            A2 = 2.0 * A
            # conditional positivity for f >= 0 with ||f|| <= 2A [f]_phi; two
            # sound routes, the second avoids the factor c_phi
            c_2A = mz.eta / X * max(1.0 / (2.0 * sg.c_phi * A2), 1.0 - xi * A2)
            gamma_H = 1.0 - c_2A * float(sg.phi @ mz.g)
            gammas = np.array([contraction_factor(gL, lyap.K, gamma_H, A, b) for b in betas])
            k = int(np.argmin(gammas))
            gamma = float(gammas[k])
            if not gamma < 1.0:
                reasons.append(("contraction", f"gamma = {gamma:.6g} >= 1 (A = {A:.4g})"))
                continue
            if best is None or gamma < best.gamma:
                beta = float(betas[k])
                C = (sg.c_phi + beta) / beta
                best = HarrisCertificate(
                    gamma_L=gL, K=lyap.K, eta=mz.eta, g=mz.g, psi=psi, eps=eps, xi=xi, Xi=X,
                    A=A, c_2A=c_2A, gamma_H=gamma_H, beta=beta, gamma=gamma, T=sg.T, C=C,
                )
    if best is None:
        constraint = reasons[-1][0] if reasons else "unknown"
        msgs = dict.fromkeys(f"{c}: {m}" for c, m in reasons)
        raise HarrisFailure("no certificate: " + "; ".join(msgs), constraint)
    return best


@dataclass
class ValidationReport:
    passed: bool
    worst_margin: float
    rows: list  # (trial, n, lhs, rhs, margin)
    witness: np.ndarray | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "n", "lhs", "rhs", "margin"])
            for trial, n, lhs, rhs, margin in self.rows:
                w.writerow([trial, n, f"{lhs:.17g}", f"{rhs:.17g}", f"{margin:.17g}"])


def random_zero_mean(sg: FiniteLatticeSemigroup, rng: np.random.Generator) -> np.ndarray:
    f = rng.standard_normal(sg.size)
    return f - (sg.phi @ f) / (sg.phi @ sg.phi) * sg.phi


def validate_certificate(
    sg: FiniteLatticeSemigroup,
    cert: HarrisCertificate,
    trials: int = 100,
    n_max: int = 50,
    seed: int = 0,
    rtol: float = 1e-12,
) -> ValidationReport:
    """Check |||S^n f||| <= gamma^n |||f||| and ||S^n f|| <= C gamma^n ||f|| on random zero-mean f.

    Margins are rhs - lhs; ``rtol`` absorbs floating-point round-off only.
    """
    rng = np.random.default_rng(seed)
    rows = []
    worst = math.inf
    witness = None
    for trial in range(trials):
        f = random_zero_mean(sg, rng)
        b0 = cert.blended_norm(sg, f)
        n0 = sg.norm(f)
        x = f
        for n in range(1, n_max + 1):
            x = sg.S @ x
            lhs = cert.blended_norm(sg, x)
            rhs = cert.gamma**n * b0
            margin = rhs - lhs
            rows.append((trial, n, lhs, rhs, margin))
            m2 = cert.C * cert.gamma**n * n0 - sg.norm(x)
            scale = max(rhs, 1e-300)
            rel = min(margin / scale, m2 / max(cert.C * cert.gamma**n * n0, 1e-300))
            if rel < worst:
                worst = rel
                if rel < -rtol:
                    witness = f
    return ValidationReport(worst >= -rtol, worst, rows, witness)


def matrix_exponential(L, T: float) -> np.ndarray:
    """exp(T L) by scaling and squaring with Pade approximants."""
    dense = L.toarray() if hasattr(L, "toarray") else np.asarray(L, dtype=float)
    return scipy.linalg.expm(T * dense)


def vck_semigroup(
    g: Grid,
    p: ModelParams,
    N: float,
    T: float,
    weight: WeightSpec | None = None,
    exponent: float = math.inf,
    mode: str = "sup",
) -> FiniteLatticeSemigroup:
    """Discrete VCk semigroup exp(T L) on cell averages.

    phi is the cell measure (mass functional); the norm weights are the
    (twisted) confinement weight, times the cell measure in l1 mode.
    """
    L = assemble_generator(g, p, N).matrix
    S = matrix_exponential(L, T)
    # round-off below 1e-14 relative is the only source of negative entries
    floor = -1e-14 * np.abs(S).max()
    if S.min() < floor:
        raise ValueError(f"matrix exponential lost positivity (min {S.min():.3g})")
    S = np.maximum(S, 0.0)
    phi = np.full(g.size, g.cell_area)
    # restore exact conservativity after clipping: rescale columns
    S *= phi / (phi @ S)
    w = weight or WeightSpec(twist=True)
    V, Y = g.mesh()
    om = eval_weight(w, p, V, Y, exponent).ravel()
    weights = om * g.cell_area if mode == "l1" else om
    return FiniteLatticeSemigroup(S, phi, weights, T, mode)


def eps_family(g: Grid, ladder=DEFAULT_EPS_LADDER, S0=None):
    """(eps, psi) pairs with psi the cell measure restricted to the eps-region.

    With ``S0 = S_{T0}`` the functional is pulled back, psi <- S0^T psi, so that
    the minorization reads S_T f >= eta g [S_{T0} f]_psi for f >= 0.
    """
    out = []
    for eps in ladder:
        mask = g.eps_region(eps).ravel()
        if mask.any():
            psi = mask * g.cell_area
            out.append((eps, psi if S0 is None else S0.T @ psi))
    return out


def certify_vck(
    g: Grid,
    p: ModelParams,
    N: float,
    T: float = 2.0,
    ladder=DEFAULT_EPS_LADDER,
    weight: WeightSpec | None = None,
    mode: str = "sup",
    T0: float | None = None,
):
    """Certificate for the discrete VCk semigroup frozen at rate N.

    The pull-back time T0 defaults to T, which reuses S_T itself.
    """
    sg = vck_semigroup(g, p, N, T, weight=weight, mode=mode)
    T0 = T if T0 is None else T0
    if T0 == 0:
        S0 = None
    elif T0 == T:
        S0 = sg.S
    else:
        S0 = matrix_exponential(assemble_generator(g, p, N).matrix, T0)
    return sg, certify(sg, eps_family(g, ladder, S0))
