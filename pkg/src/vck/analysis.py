"""Diagnostics: weighted norms, decay fits, smoothing curves, Harnack ratios, growth bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .evolve import Trajectory, _check_dt, _stepper, default_dt
from .grid import DensityField, Grid, assemble_generator
from .model import ModelParams, WeightSpec, eval_weight
from .stationary import fixed_point_steady

NORM_EXPONENTS = (1, 2, math.inf)
MAX_DENSE_CELLS = 24 * 24


class DecayUnderflowError(ValueError):
    """Too few samples above round-off to fit a decay rate."""


def _exponent(p) -> float:
    q = math.inf if p in ("inf", "Inf", math.inf) else float(p)
    if q not in NORM_EXPONENTS:
        raise ValueError(f"norm exponent must be one of 1, 2, inf; got {p!r}")
    return q


def weight_field(g: Grid, w: WeightSpec | None, p: float = 1.0, params: ModelParams | None = None):
    """Weight at cell centers; ``None`` is the unweighted path.

    A twisted weight is tuned to the norm exponent and needs the model parameters.
    """
    if w is None:
        return np.ones(g.shape)
    if w.twist and params is None:
        raise ValueError("twisted weights need the model parameters")
    V, Y = g.mesh()
    if w.twist:
        return eval_weight(w, params, V, Y, p)
    return np.broadcast_to(w.omega(g.y)[None, :], g.shape).copy()


def _lp(values: np.ndarray, area: float, p: float) -> float:
    a = np.abs(values)
    if math.isinf(p):
        return float(a.max())
    if p == 1:
        return float(a.sum() * area)
    return float(math.sqrt((a * a).sum() * area))


@dataclass
class NormReport:
    p: float
    weight: WeightSpec | None
    value: float


def weighted_norm(F, p, w: WeightSpec | None = None, params: ModelParams | None = None) -> NormReport:
    """Midpoint-rule L^p norm of F * weight with the cell measure."""
    q = _exponent(p)
    vals = F.values if isinstance(F, DensityField) else np.asarray(F, dtype=float)
    g = F.grid
    return NormReport(q, w, _lp(vals * weight_field(g, w, q, params), g.cell_area, q))


# ---------------------------------------------------------------- decay fits


@dataclass
class DecayFit:
    rate: float
    prefactor: float
    r2: float
    n_used: int
    times: np.ndarray = field(repr=False)
    norms: np.ndarray = field(repr=False)


def fit_log_linear(x, y):
    """OLS fit y ~ intercept + slope x; returns (slope, intercept, r2)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (intercept + slope * x)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 0.0
    return float(slope), float(intercept), r2


def fit_decay(times, norms, tail: float = 0.6, floor: float = 0.0) -> DecayFit:
    """Fit log norm = log C + rate t over the last ``tail`` fraction of samples."""
    times = np.asarray(times, dtype=float)
    norms = np.asarray(norms, dtype=float)
    start = int(math.floor(len(times) * (1.0 - tail)))
    t, n = times[start:], norms[start:]
    keep = n > max(floor, 100.0 * np.finfo(float).eps)
    if keep.sum() < 5:
        raise DecayUnderflowError(f"only {int(keep.sum())} samples above round-off in the fit window")
    slope, intercept, r2 = fit_log_linear(t[keep], np.log(n[keep]))
    return DecayFit(slope, math.exp(intercept), r2, int(keep.sum()), times, norms)


def fit_decay_rate(
    traj: Trajectory,
    reference: DensityField,
    p=1,
    w: WeightSpec | None = None,
    params: ModelParams | None = None,
    tail: float = 0.6,
) -> DecayFit:
    """Exponential rate of ||F_t - reference|| along a stored trajectory."""
    if len(traj) < 10:
        raise ValueError("need at least 10 snapshots")
    q = _exponent(p)
    g = traj.grid
    wf = weight_field(g, w, q, params)
    diffs = traj.states - reference.values[None]
    norms = np.array([_lp(d * wf, g.cell_area, q) for d in diffs])
    scale = _lp(reference.values * wf, g.cell_area, q)
    return fit_decay(traj.times, norms, tail, floor=100.0 * np.finfo(float).eps * scale)


def spectral_gap(g: Grid, p: ModelParams, N: float) -> float:
    """Second-largest real part of the generator spectrum by dense eigensolve."""
    if g.size > MAX_DENSE_CELLS:
        raise ValueError(f"dense eigensolve limited to {MAX_DENSE_CELLS} cells, grid has {g.size}")
    L = assemble_generator(g, p, N).matrix.toarray()
    re = np.sort(np.linalg.eigvals(L).real)[::-1]
    return float(re[1])


def random_smooth_density(g: Grid, rng: np.random.Generator, n_bumps: int = 3, y_scale: float = 3.0):
    """Unit-mass sum of Gaussian bumps, defined in continuum coordinates.

    The same generator state yields the same continuum function on every grid.
    """
    V, Y = g.mesh()
    F = np.zeros(g.shape)
    for _ in range(n_bumps):
        v0 = rng.uniform(0.15, 0.85) * g.v_F
        y0 = rng.uniform(0.1, 1.0) * y_scale
        sv = rng.uniform(0.08, 0.2) * g.v_F
        sy = rng.uniform(0.2, 0.6)
        F += rng.uniform(0.5, 1.5) * np.exp(-0.5 * (((V - v0) / sv) ** 2 + ((Y - y0) / sy) ** 2))
    return DensityField(F, g).normalized()


def zero_mean_perturbation(M: DensityField, rng: np.random.Generator, amplitude: float = 0.2):
    """M + amplitude (M h - <M h> M) with smooth |h| <= 1; stays nonnegative for amplitude <= 1/2."""
    g = M.grid
    V, Y = g.mesh()
    kv, ky = rng.integers(1, 4, size=2)
    ph = rng.uniform(0, 2 * np.pi, size=2)
    h = np.cos(kv * np.pi * V / g.v_F + ph[0]) * np.cos(ky * np.pi * Y / 4.0 + ph[1])
    Mh = M.values * h
    f = Mh - Mh.sum() * g.cell_area / M.mass * M.values
    return DensityField(M.values + amplitude * f, g)


@dataclass
class StabilityReport:
    N: float
    fit: DecayFit
    gap: float | None

    @property
    def relative_error(self) -> float | None:
        return None if self.gap is None else abs(self.fit.rate - self.gap) / abs(self.gap)


def stability_study(
    g: Grid,
    p: ModelParams,
    t_end: float = 8.0,
    amplitude: float = 0.2,
    seed: int = 0,
    norm_p=1,
    n_samples: int = 200,
    dt: float | None = None,
) -> StabilityReport:
    """Decay of a zero-mean perturbation of the steady state, with the eigen oracle when affordable.

    The perturbation evolves under the generator frozen at the steady firing
    rate (the linearization at c = 0; an approximation for c > 0).
    """
    fp = fixed_point_steady(g, p)
    M = fp.density
    F0 = zero_mean_perturbation(M, np.random.default_rng(seed), amplitude)
    times = np.linspace(0.0, t_end, n_samples + 1)
    states = sample_evolution(g, p, fp.N, F0, times, dt)
    traj = Trajectory(g, times, states)
    fit = fit_decay_rate(traj, M, norm_p)
    gap = spectral_gap(g, p, fp.N) if g.size <= MAX_DENSE_CELLS else None
    return StabilityReport(fp.N, fit, gap)


# ---------------------------------------------------------- sampled evolution


def sample_evolution(g: Grid, p: ModelParams, N: float, F0, times, dt: float | None = None, scheme: str = "imex"):
    """States of the frozen-rate linear dynamics at the requested (sorted) times.

    Each sample is the state at the step nearest to the requested time.
    ``F0`` may carry trailing batch axes, shape (n_v, n_y, k).
    """
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("sample times must be sorted and nonnegative")
    op = assemble_generator(g, p, N)
    dt = dt if dt is not None else default_dt(g, p)
    st = _stepper(op, dt, scheme)
    _check_dt(op, dt, scheme)
    x = np.asarray(F0.values if isinstance(F0, DensityField) else F0, dtype=float).copy()
    out = np.empty((len(times),) + x.shape)
    k = 0
    for i, t in enumerate(times):
        target = int(round(t / dt))
        while k < target:
            x = st(x)
            k += 1
        out[i] = x
    return out


# ------------------------------------------------------------------ smoothing


@dataclass
class SmoothingCurve:
    times: np.ndarray
    ratios: np.ndarray
    ceiling: float
    nu: float
    r2: float
    window: tuple  # (start, stop) indices of the fitted samples


def single_cell_density(g: Grid, cell: tuple[int, int]) -> DensityField:
    F = np.zeros(g.shape)
    F[cell] = 1.0 / g.cell_area
    return DensityField(F, g)


def smoothing_curve(
    g: Grid,
    p: ModelParams,
    F0: DensityField,
    times,
    w: WeightSpec | None = None,
    N: float = 0.0,
    dt: float | None = None,
) -> SmoothingCurve:
    """||F_t||_{L^inf_w} / ||F_0||_{L^1_w} along the frozen-rate linear flow, with a power-law fit.

    The fit window starts once the ratio has dropped below a quarter of the
    grid ceiling 1/(dv dy) and ends once it is within a factor 2 of its last
    value (equilibration); nu = -slope in log-log coordinates.
    """
    w = w or WeightSpec(kind="exponential", alpha=1.0)
    if w.kind != "exponential":
        raise ValueError("smoothing estimates use an exponential weight")
    times = np.asarray(times, dtype=float)
    if times[0] <= 0:
        raise ValueError("sample times must be positive")
    states = sample_evolution(g, p, N, F0, times, dt)
    wf = weight_field(g, w)
    denom = _lp(F0.values * wf, g.cell_area, 1)
    ratios = np.array([np.abs(s * wf).max() for s in states]) / denom
    ceiling = 1.0 / g.cell_area
    start = int(np.argmax(ratios <= ceiling / 4.0))
    near_final = np.nonzero(ratios <= 2.0 * ratios[-1])[0]
    stop = int(near_final[0]) if near_final.size else len(ratios)
    if ratios[start] > ceiling / 4.0 or stop - start < 3:
        return SmoothingCurve(times, ratios, ceiling, math.nan, math.nan, (start, stop))
    slope, _, r2 = fit_log_linear(np.log(times[start:stop]), np.log(ratios[start:stop]))
    return SmoothingCurve(times, ratios, ceiling, -slope, r2, (start, stop))


# -------------------------------------------------------------------- Harnack


@dataclass
class HarnackResult:
    ratio: float
    sup: float
    inf: float
    offending: list  # (i, j) cells of O_eps where F_T vanishes


def harnack_ratio(traj: Trajectory, eps: float, T0: float, T: float) -> HarnackResult:
    """sup over O_eps of F_{T0} divided by inf over O_eps of F_T."""
    if not T > T0 > 0:
        raise ValueError("requires T > T0 > 0")
    g = traj.grid
    mask = g.eps_region(eps)
    if not mask.any():
        raise ValueError(f"O_eps is empty on this grid for eps = {eps}")
    a = traj.at(T0).values[mask]
    b = traj.at(T).values[mask]
    sup, inf = float(a.max()), float(b.min())
    if inf <= 0:
        cells = np.argwhere(mask)
        bad = [tuple(int(k) for k in c) for c, val in zip(cells, b) if val <= 0]
        return HarnackResult(math.inf, sup, inf, bad)
    return HarnackResult(sup / inf, sup, inf, [])


# --------------------------------------------------------------- growth bound


@dataclass
class GrowthBound:
    kappa: float
    per_exponent: dict  # p -> kappa_p
    times: np.ndarray


def growth_bound_certificate(
    g: Grid,
    p: ModelParams,
    w: WeightSpec | None = None,
    trials: int = 5,
    times=(0.25, 0.5, 1.0, 1.5, 2.0),
    N: float | None = None,
    seed: int = 0,
    exponents=NORM_EXPONENTS,
) -> GrowthBound:
    """kappa = max over trials, times and p of (1/t) log(||F_t|| / ||F_0||) in the twisted L^p norms.

    The flow is the linear one frozen at rate N, by default the steady rate.
    """
    w = w or WeightSpec(twist=True)
    if N is None:
        N = fixed_point_steady(g, p).N
    rng = np.random.default_rng(seed)
    times = np.asarray(times, dtype=float)
    wfs = {q: weight_field(g, w, q, p) for q in exponents}
    F0 = np.stack([random_smooth_density(g, rng).values for _ in range(trials)], axis=-1)
    states = sample_evolution(g, p, N, F0, np.concatenate([[0.0], times]))
    per = {}
    for q, wf in wfs.items():
        norms = np.array(
            [[_lp(s[..., k] * wf, g.cell_area, q) for k in range(trials)] for s in states]
        )
        per[q] = float((np.log(norms[1:] / norms[0]) / times[:, None]).max())
    kappa = max(per.values())
    if not math.isfinite(kappa):
        raise ArithmeticError("growth bound is not finite")
    return GrowthBound(kappa, per, times)
