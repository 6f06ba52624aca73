"""Time integration of the linear and nonlinear VCk dynamics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg.lapack
import scipy.sparse as sp

from .grid import (
    DensityField,
    GeneratorOperator,
    Grid,
    assemble_generator,
    firing_rate,
    transport_operator,
)
from .model import ModelParams, WeightSpec, eval_J

SCHEMES = ("explicit", "imex")


class TimeStepError(ValueError):
    """Requested time step violates the positivity bound of the scheme."""


class BlowUpError(RuntimeError):
    def __init__(self, t: float, norm: float, ceiling: float):
        super().__init__(f"blow-up at t = {t:.6g}: sup norm {norm:.6g} exceeds {ceiling:.6g}")
        self.t = t
        self.norm = norm
        self.ceiling = ceiling


class SmallnessWarning(UserWarning):
    """Initial datum outside the small-connectivity regime."""


@dataclass
class EvolveConfig:
    dt: float | None = None
    t_end: float = 1.0
    scheme: str = "imex"
    cfl_safety: float = 0.5
    picard_max_iters: int = 50
    picard_tol: float = 1e-10
    snapshot_every: int = 1
    blowup_factor: float = 1e6
    smallness_eta: float | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not 0 < self.cfl_safety <= 1:
            raise ValueError("cfl_safety must lie in (0, 1]")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_end >= 0:
            raise ValueError("t_end must be nonnegative")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")

    def resolve_dt(self, g: Grid, p: ModelParams) -> float:
        return self.dt if self.dt is not None else default_dt(g, p, self.cfl_safety)

    def n_steps(self, dt: float) -> int:
        return int(math.ceil(self.t_end / dt - 1e-9))

    def step_plan(self, g: Grid, p: ModelParams) -> tuple[float, int]:
        """(dt, n) with n dt = t_end; the resolved step is shrunk to land on t_end."""
        dt = self.resolve_dt(g, p)
        n = self.n_steps(dt)
        return (self.t_end / n if n else dt), n


def max_speed(g: Grid, p: ModelParams) -> float:
    return float(np.abs(eval_J(p, g.v_faces[:, None], g.y[None, :])).max())


def default_dt(g: Grid, p: ModelParams, cfl_safety: float = 0.5) -> float:
    return cfl_safety * g.dv / max_speed(g, p)


@dataclass
class FiringTrace:
    times: np.ndarray
    rates: np.ndarray
    injected: np.ndarray
    extracted: np.ndarray

    @property
    def cumulative_imbalance(self) -> float:
        return float(abs(self.injected.sum() - self.extracted.sum()))


@dataclass
class Trajectory:
    grid: Grid
    times: np.ndarray
    states: np.ndarray  # (n_snapshots, n_v, n_y)
    masses: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.times)

    def field(self, k: int) -> DensityField:
        return DensityField(self.states[k], self.grid, float(self.times[k]))

    @property
    def final(self) -> DensityField:
        return self.field(-1)

    def at(self, t: float) -> DensityField:
        """Snapshot nearest to time t."""
        return self.field(int(np.argmin(np.abs(self.times - t))))


def _check_dt(op: GeneratorOperator, dt: float, scheme: str, cfl_safety: float = 1.0) -> None:
    if scheme == "imex":
        bound = op.imex_dt_bound()
        label = "transport CFL bound dv / max|J|"
    elif scheme == "explicit":
        bound = op.explicit_dt_bound()
        label = "explicit positivity bound 1 / max|diag L|"
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    limit = cfl_safety * bound
    if dt > limit * (1.0 + 1e-12):
        raise TimeStepError(f"dt = {dt:.6g} exceeds the {label} times cfl_safety = {limit:.6g}")


class _Stepper:
    """Cached per-(operator, dt) update matrices."""

    def __init__(self, op: GeneratorOperator, dt: float, scheme: str):
        self.dt = dt
        self.scheme = scheme
        n = op.grid.size
        if scheme == "explicit":
            self.E = (sp.identity(n, format="csr") + dt * op.matrix).tocsr()
        else:
            self.E = (sp.identity(n, format="csr") + dt * op.transport).tocsr()
            # LU factors of the tridiagonal I - dt T_y, shared by every v-column;
            # an M-matrix, so no pivoting occurs and nonnegative data stay nonnegative
            dl = -dt * op.y_lower[1:]
            du = -dt * op.y_upper[:-1]
            d = 1.0 - dt * op.y_diag
            *self.lu, info = scipy.linalg.lapack.dgttrf(dl, d, du)
            if info != 0:
                raise np.linalg.LinAlgError(f"tridiagonal factorization failed (info = {info})")
        self.shape = op.grid.shape

    def __call__(self, x: np.ndarray) -> np.ndarray:
        # trailing axes beyond (n_v, n_y) are independent copies
        batch = x.shape[2:]
        z = (self.E @ x.reshape(self.E.shape[0], -1)).reshape(self.shape + batch)
        if self.scheme == "explicit":
            return z
        # solve along y for all v-columns (and batch copies) at once
        zt = np.moveaxis(z, 1, 0).reshape(z.shape[1], -1)
        sol, info = scipy.linalg.lapack.dgttrs(*self.lu, zt)
        if info != 0:
            raise np.linalg.LinAlgError(f"tridiagonal solve failed (info = {info})")
        return np.ascontiguousarray(np.moveaxis(sol.reshape((z.shape[1], z.shape[0]) + batch), 0, 1))


def _stepper(op: GeneratorOperator, dt: float, scheme: str) -> _Stepper:
    key = (dt, scheme)
    st = op._cache.get(key)
    if st is None:
        st = op._cache[key] = _Stepper(op, dt, scheme)
    return st


def step(op: GeneratorOperator, F, dt: float, scheme: str = "imex", cfl_safety: float = 1.0):
    """Advance one time step.

    ``explicit`` is forward Euler on the full generator.  ``imex`` is forward
    Euler on the transport-plus-reset part followed by backward Euler on the
    y drift-diffusion part.  Returns a DensityField when given one, else an
    array.
    """
    _check_dt(op, dt, scheme, cfl_safety)
    if isinstance(F, DensityField):
        return DensityField(_stepper(op, dt, scheme)(F.values), F.grid, F.t + dt)
    return _stepper(op, dt, scheme)(np.asarray(F, dtype=float))


def _as_field(g: Grid, F0) -> DensityField:
    if isinstance(F0, DensityField):
        return F0
    return DensityField(np.asarray(F0, dtype=float), g)


def _rate_sequence(N_traj, n_steps: int) -> np.ndarray:
    arr = np.asarray(N_traj, dtype=float)
    if arr.ndim == 0:
        return np.full(n_steps, float(arr))
    if len(arr) < n_steps:
        raise ValueError(f"firing-rate trace has {len(arr)} samples, need {n_steps}")
    return arr[:n_steps]


class _Integrator:
    """Shared loop: snapshots, firing trace, blow-up guard."""

    def __init__(self, g: Grid, p: ModelParams, F0, cfg: EvolveConfig):
        self.g, self.p, self.cfg = g, p, cfg
        self.F0 = _as_field(g, F0)
        self.dt, self.n = cfg.step_plan(g, p)
        self.ceiling = cfg.blowup_factor * float(np.abs(self.F0.values).max())
        self._ops: dict[tuple, GeneratorOperator] = {}
        self.inflow_coeff = _inflow_coefficients(g, p)

    def operator(self, N: float) -> GeneratorOperator:
        # operators depend on N only through (b, a); c = 0 reuses one operator
        key = (self.p.y_star + self.p.c * N, self.p.a_star + self.p.c**2 * N)
        op = self._ops.get(key)
        if op is None:
            if len(self._ops) > 8:
                self._ops.clear()
            op = self._ops[key] = assemble_generator(self.g, self.p, N)
            _check_dt(op, self.dt, self.cfg.scheme, self.cfg.cfl_safety)
        return op

    def run(self, rate_for_step):
        g, p, dt = self.g, self.p, self.dt
        x = self.F0.values.copy()
        t0 = self.F0.t
        every = self.cfg.snapshot_every
        times, states = [t0], [x.copy()]
        out_rates = np.empty(self.n + 1)
        injected = np.zeros(self.n)
        extracted = np.zeros(self.n)
        for k in range(self.n):
            out = firing_rate(g, p, x)
            out_rates[k] = out
            N = rate_for_step(k, out)
            op = self.operator(N)
            st = _stepper(op, dt, self.cfg.scheme)
            extracted[k] = dt * out
            injected[k] = dt * float((self.inflow_coeff * x[-1, g.j_F:]).sum()) * g.dv * g.dy
            x = st(x)
            sup = float(np.abs(x).max())
            if not sup <= self.ceiling:
                raise BlowUpError(t0 + (k + 1) * dt, sup, self.ceiling)
            if (k + 1) % every == 0 or k + 1 == self.n:
                times.append(t0 + (k + 1) * dt)
                states.append(x.copy())
        out_rates[self.n] = firing_rate(g, p, x)
        step_times = t0 + dt * np.arange(self.n + 1)
        traj = Trajectory(g, np.array(times), np.array(states))
        traj.masses = traj.states.sum(axis=(1, 2)) * g.cell_area
        trace = FiringTrace(step_times, out_rates, injected, extracted)
        return traj, trace


def _inflow_coefficients(g: Grid, p: ModelParams) -> np.ndarray:
    # reset inflow entries actually assembled into the first v-column
    first = np.arange(g.j_F, g.n_y)
    last = (g.n_v - 1) * g.n_y + first
    return np.asarray(transport_operator(g, p)[first, last]).ravel()


def run_linear(g: Grid, p: ModelParams, N_traj, F0, cfg: EvolveConfig):
    """Integrate the linear equation driven by a prescribed firing-rate trace.

    ``N_traj`` is a constant or one value per step.  The returned FiringTrace
    holds the output firing rate of the solution, one sample per step plus
    the final state.
    """
    it = _Integrator(g, p, F0, cfg)
    rates = _rate_sequence(N_traj, it.n)
    if p.c > 0 and (rates.min() < 0 or rates.max() > p.rate_ceiling):
        raise ValueError(f"input firing rate must lie in [0, N*] = [0, {p.rate_ceiling:.6g}]")
    return it.run(lambda k, out: float(rates[k]))


def smallness_level(p: ModelParams, F0: DensityField, weight: WeightSpec | None = None) -> float:
    """(c + c^2) ||F0||_{L^inf_omega}."""
    w = weight or WeightSpec()
    om = w.omega(F0.grid.y)[None, :]
    return (p.c + p.c**2) * float(np.abs(F0.values * om).max())


def _warn_smallness(p: ModelParams, F0: DensityField, cfg: EvolveConfig) -> None:
    eta = cfg.smallness_eta if cfg.smallness_eta is not None else 0.5 * p.a_ceiling
    level = smallness_level(p, F0)
    if level >= eta:
        warnings.warn(
            f"(c + c^2) ||F0||_Linf_w = {level:.6g} is not below the smallness threshold {eta:.6g}",
            SmallnessWarning,
            stacklevel=3,
        )


def run_nonlinear(g: Grid, p: ModelParams, F0, cfg: EvolveConfig):
    """Self-consistent dynamics with the firing rate lagged by one step."""
    it = _Integrator(g, p, F0, cfg)
    _warn_smallness(p, it.F0, cfg)
    return it.run(lambda k, out: out)


@dataclass
class PicardResult:
    trace: FiringTrace
    trajectory: Trajectory
    iterations: int
    converged: bool
    history: list = field(default_factory=list)

    @property
    def diverged(self) -> bool:
        return not self.converged


def picard_iterate(g: Grid, p: ModelParams, F0, cfg: EvolveConfig) -> PicardResult:
    """Fixed point of the map input trace -> output firing trace of the linear run.

    Starts from the constant trace equal to the initial firing rate.  The
    iteration count is the index m of the first iterate N^(m) reproduced by
    the map within ``cfg.picard_tol`` in sup norm.
    """
    F0 = _as_field(g, F0)
    _warn_smallness(p, F0, cfg)
    dt, n = cfg.step_plan(g, p)
    current = np.full(n, firing_rate(g, p, F0))
    traj, trace = run_linear(g, p, current, F0, cfg)
    history = []
    best = (math.inf, traj, trace, 0)
    for m in range(1, cfg.picard_max_iters + 1):
        current = trace.rates[:n]
        traj, trace = run_linear(g, p, current, F0, cfg)
        diff = float(np.abs(trace.rates[:n] - current).max()) if n else 0.0
        history.append(diff)
        if diff < best[0]:
            best = (diff, traj, trace, m)
        if diff < cfg.picard_tol:
            return PicardResult(trace, traj, m, True, history)
    _, traj, trace, m = best
    return PicardResult(trace, traj, m, False, history)


def propagate(op: GeneratorOperator, F, t: float, dt: float, scheme: str = "imex") -> np.ndarray:
    """Apply ceil(t / dt) steps of the linear scheme, with dt shrunk to land on t exactly."""
    n = max(1, int(math.ceil(t / dt - 1e-9)))
    h = t / n
    _check_dt(op, h, scheme)
    st = _stepper(op, h, scheme)
    x = np.asarray(F.values if isinstance(F, DensityField) else F, dtype=float).reshape(op.grid.shape)
    for _ in range(n):
        x = st(x)
    return x


def extrapolated_propagate(
    op: GeneratorOperator, F, t: float, dt: float, levels: int = 4, scheme: str = "imex"
) -> np.ndarray:
    """Richardson extrapolation of ``propagate`` over dt, dt/2, ..., dt/2^(levels-1).

    The first-order splitting error admits an expansion in powers of dt, so
    each tableau column removes one more order.  Positivity is not preserved.
    """
    rows = [propagate(op, F, t, dt / 2**k, scheme) for k in range(levels)]
    for order in range(1, levels):
        f = 2.0**order
        rows = [(f * rows[k + 1] - rows[k]) / (f - 1.0) for k in range(len(rows) - 1)]
    return rows[0]
