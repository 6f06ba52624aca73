"""Monte Carlo simulation of the integrate-and-fire network behind the kinetic closure.

Each neuron carries a voltage v in [0, v_F) and a conductance y >= 0:

    dv/dt = -y_L v + y (v_E - v),        reset v <- 0 when v reaches v_F,
    dy/dt = -y + (jumps).

Two jump sources drive y.  External Poisson input has jump size h and rate
nu with nu h = y_* and nu h^2 / 2 = a_*, so the generator of y matches the
drift y_* - y and diffusion a_* to second order.  Network input: every spike
reaches each neuron independently with probability 1 / (2 n) and adds 2 c,
so a neuron sees jumps of size 2 c at rate N / 2 when the population fires at
rate N per neuron.  That contributes drift c N and diffusion c^2 N, which is
the closure b = y_* + c N, a = a_* + c^2 N.

Conductances follow dy/dt = -y exactly between jumps.  Voltages use explicit
Euler, and threshold crossings are resolved at step granularity.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import DensityField, Grid
from .model import ModelParams, eval_J


class StepTooLargeError(ValueError):
    """The time step lets too many neurons spike, or jump, per step."""


@dataclass(frozen=True)
class Calibration:
    nu_ext: float
    h: float
    net_jump: float
    net_prob_factor: float = 0.5  # per-spike delivery probability times n

    @classmethod
    def from_params(cls, p: ModelParams) -> "Calibration":
        return cls(nu_ext=p.y_star**2 / (2.0 * p.a_star), h=2.0 * p.a_star / p.y_star, net_jump=2.0 * p.c)

    @property
    def drift(self) -> float:
        return self.nu_ext * self.h

    @property
    def diffusion(self) -> float:
        return 0.5 * self.nu_ext * self.h**2


@dataclass
class NetworkResult:
    params: ModelParams
    n_neurons: int
    dt: float
    t_end: float
    seed: int
    v: np.ndarray
    y: np.ndarray
    spike_times: np.ndarray
    spike_ids: np.ndarray
    density_grid: Grid | None = None
    window: tuple | None = None
    counts: np.ndarray | None = field(default=None, repr=False)
    n_samples: int = 0
    dropped: int = 0  # samples with y beyond the histogram grid
    n_resets: int = 0

    @property
    def n_spikes(self) -> int:
        return len(self.spike_times)

    def firing_rate(self, window=None) -> float:
        """Spikes per neuron per unit time over the window (default: whole run)."""
        t0, t1 = window if window is not None else (0.0, self.t_end)
        if not t1 > t0:
            raise ValueError("empty window")
        k = np.count_nonzero((self.spike_times >= t0) & (self.spike_times < t1))
        return k / (self.n_neurons * (t1 - t0))

    def rate_standard_error(self, window=None) -> float:
        t0, t1 = window if window is not None else (0.0, self.t_end)
        k = np.count_nonzero((self.spike_times >= t0) & (self.spike_times < t1))
        return math.sqrt(max(k, 1)) / (self.n_neurons * (t1 - t0))

    def write_spike_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "neuron"])
            for t, j in zip(self.spike_times, self.spike_ids):
                w.writerow([f"{t:.17g}", int(j)])


def initial_state(p: ModelParams, n: int, rng: np.random.Generator):
    v = rng.uniform(0.0, p.v_F, n)
    y = np.abs(p.y_star + math.sqrt(p.a_star) * rng.standard_normal(n))
    return v, y


def simulate_network(
    p: ModelParams,
    n_neurons: int,
    dt: float,
    t_end: float,
    seed: int = 0,
    calibration: Calibration | None = None,
    density_grid: Grid | None = None,
    window: tuple | None = None,
    sample_every: int = 10,
    state=None,
    external: bool = True,
) -> NetworkResult:
    """Simulate the network; optionally accumulate a (v, y) histogram over ``window``.

    ``state = (v, y)`` overrides the random initial condition; ``external=False``
    switches the Poisson input off.
    """
    if n_neurons < 1 or not dt > 0 or not t_end > 0:
        raise ValueError("requires n_neurons >= 1, dt > 0, t_end > 0")
    cal = calibration or Calibration.from_params(p)
    rng = np.random.default_rng(seed)
    n = int(n_neurons)
    if state is None:
        v, y = initial_state(p, n, rng)
    else:
        v = np.array(state[0], dtype=float)
        y = np.array(state[1], dtype=float)
    if external and cal.nu_ext * dt > 0.5:
        raise StepTooLargeError(f"external jump probability per step {cal.nu_ext * dt:.3g} exceeds 0.5")
    nxt = None
    if external:
        nxt = rng.exponential(1.0 / cal.nu_ext, n)
    n_steps = int(math.ceil(t_end / dt - 1e-9))
    decay = math.exp(-dt)
    times_log, ids_log = [], []
    counts = None
    if density_grid is not None:
        if window is None or not window[1] > window[0]:
            raise ValueError("a density grid needs a nonempty window")
        counts = np.zeros(density_grid.shape)
    n_samples = dropped = n_resets = 0
    q = cal.net_prob_factor / n
    for k in range(n_steps):
        t_next = (k + 1) * dt
        # voltage: explicit Euler with the conductance at the start of the step
        v += dt * eval_J(p, v, y)
        np.maximum(v, 0.0, out=v)
        y *= decay
        if external:
            # Poisson arrivals in (t, t_next], each decayed exactly to t_next
            hit = np.nonzero(nxt <= t_next)[0]
            while hit.size:
                y[hit] += cal.h * np.exp(nxt[hit] - t_next)
                nxt[hit] += rng.exponential(1.0 / cal.nu_ext, hit.size)
                hit = hit[nxt[hit] <= t_next]
        fired = np.nonzero(v >= p.v_F)[0]
        if fired.size:
            if fired.size > 0.5 * n:
                raise StepTooLargeError(f"{fired.size} of {n} neurons spiked in one step; reduce dt")
            v[fired] = 0.0
            n_resets += fired.size
            times_log.append(np.full(fired.size, t_next))
            ids_log.append(fired)
            if cal.net_jump > 0:
                m = rng.binomial(fired.size * n, q)
                if m:
                    np.add.at(y, rng.integers(0, n, m), cal.net_jump)
        assert y.min() >= 0.0, "negative conductance"
        if counts is not None and window[0] <= t_next < window[1] and k % sample_every == 0:
            g = density_grid
            iv = np.minimum((v / g.dv).astype(np.int64), g.n_v - 1)
            jy = (y / g.dy).astype(np.int64)
            ok = jy < g.n_y
            dropped += int(n - ok.sum())
            np.add.at(counts, (iv[ok], jy[ok]), 1.0)
            n_samples += 1
    st = np.concatenate(times_log) if times_log else np.zeros(0)
    si = np.concatenate(ids_log) if ids_log else np.zeros(0, dtype=np.int64)
    return NetworkResult(
        p, n, dt, n_steps * dt, seed, v, y, st, si, density_grid, window, counts, n_samples, dropped, n_resets
    )


def empirical_density(result: NetworkResult, g: Grid | None = None, window=None) -> DensityField:
    """Time-averaged (v, y) histogram over the recorded window, with unit mass on the grid."""
    g = g or result.density_grid
    if result.counts is None or g != result.density_grid:
        raise ValueError("no histogram was recorded on this grid; pass density_grid to simulate_network")
    if window is not None and tuple(window) != tuple(result.window):
        raise ValueError(f"histogram was recorded over {result.window}, not {window}")
    total = result.counts.sum()
    if result.n_samples == 0 or total == 0:
        raise ValueError("empty window: no samples recorded")
    F = result.counts / (total * g.cell_area)
    meta = {"window": result.window, "samples": result.n_samples, "dropped_fraction": result.dropped / (result.dropped + total)}
    return DensityField(F, g, t=float(result.window[1]), meta=meta)
