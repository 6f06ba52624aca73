import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import quiet_grid
from vck.analysis import (
    DecayUnderflowError,
    fit_decay,
    fit_decay_rate,
    growth_bound_certificate,
    harnack_ratio,
    random_smooth_density,
    sample_evolution,
    single_cell_density,
    smoothing_curve,
    stability_study,
    weighted_norm,
)
from vck.evolve import Trajectory
from vck.grid import DensityField
from vck.model import ModelParams, WeightSpec
from vck.stationary import fixed_point_steady

EXP = WeightSpec(kind="exponential", alpha=1.0)


def _trajectory(g, p, F0, times, N=0.0):
    times = np.asarray(times, dtype=float)
    return Trajectory(g, times, sample_evolution(g, p, N, F0, times))


# ---------------------------------------------------------------- norms


@pytest.mark.parametrize("q", [1, 2, math.inf])
def test_norm_of_zero(q, small_grid):
    assert weighted_norm(DensityField(np.zeros(small_grid.shape), small_grid), q).value == 0.0


def test_norm_single_cell(small_grid):
    g = small_grid
    F = single_cell_density(g, (3, 4))
    assert weighted_norm(F, 1).value == pytest.approx(1.0, rel=1e-14)
    assert weighted_norm(F, 2).value == pytest.approx(1.0 / math.sqrt(g.cell_area), rel=1e-14)
    assert weighted_norm(F, "inf").value == pytest.approx(1.0 / g.cell_area, rel=1e-14)
    w = weighted_norm(F, 1, EXP).value
    assert w == pytest.approx(math.exp(g.y[4]), rel=1e-14)


def test_norm_matches_naive_sum():
    g = quiet_grid(ModelParams(), 4, 4, 8.0)
    vals = np.arange(16.0).reshape(4, 4) - 7.5
    F = DensityField(vals, g)
    dA = g.cell_area
    w = np.exp(g.y)[None, :]
    assert weighted_norm(F, 1, EXP).value == pytest.approx(sum(abs(x) for x in (vals * w).ravel()) * dA, rel=1e-14)
    assert weighted_norm(F, 2).value == pytest.approx(math.sqrt(sum(x * x for x in vals.ravel()) * dA), rel=1e-14)


def test_norm_rejects_bad_exponent(small_grid):
    with pytest.raises(ValueError):
        weighted_norm(single_cell_density(small_grid, (0, 0)), 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, math.inf]), st.floats(1e-3, 5), st.booleans())
def test_norm_triangle_and_homogeneity(seed, q, lam, negate):
    lam = -lam if negate else lam
    g = quiet_grid(ModelParams(), 8, 8)
    r = np.random.default_rng(seed)
    F = DensityField(r.standard_normal(g.shape), g)
    G = DensityField(r.standard_normal(g.shape), g)
    n = lambda X: weighted_norm(X, q, EXP).value  # noqa: E731
    assert n(DensityField(F.values + G.values, g)) <= (n(F) + n(G)) * (1 + 1e-12)
    assert n(DensityField(lam * F.values, g)) == pytest.approx(abs(lam) * n(F), rel=1e-12)


# ---------------------------------------------------------------- decay fits


def test_fit_decay_synthetic():
    t = np.linspace(0, 5, 60)
    fit = fit_decay(t, 3.0 * np.exp(-1.7 * t))
    assert abs(fit.rate + 1.7) < 1e-6
    assert fit.prefactor == pytest.approx(3.0, rel=1e-6)
    assert fit.r2 > 1 - 1e-12


def test_fit_decay_underflow(small_grid):
    F = random_smooth_density(small_grid, np.random.default_rng(0))
    traj = Trajectory(small_grid, np.linspace(0, 1, 20), np.repeat(F.values[None], 20, axis=0))
    with pytest.raises(DecayUnderflowError):
        fit_decay_rate(traj, F)


def test_stability_rate_matches_gap_16x16():
    g = quiet_grid(ModelParams(), 16, 16)
    rep = stability_study(g, ModelParams(), t_end=8.0)
    assert rep.fit.rate < 0
    assert rep.relative_error < 0.05
    assert rep.fit.r2 > 0.99


# ---------------------------------------------------------------- smoothing


def test_smoothing_starts_at_ceiling_and_decreases():
    p = ModelParams()
    g = quiet_grid(p, 32, 64)
    cell = (16, 8)
    F0 = single_cell_density(g, cell)
    times = np.geomspace(1e-4, 1.0, 25)
    curve = smoothing_curve(g, p, F0, times)
    # before the first step the ratio is the single-cell ceiling times the weight ratio
    assert curve.ratios[0] == pytest.approx(curve.ceiling, rel=1e-12)
    early = curve.ratios[times <= 1e-1]
    assert np.all(np.diff(early) <= 1e-12 * early[0])


def test_smoothing_ratio_scale_invariant():
    p = ModelParams()
    g = quiet_grid(p, 16, 32)
    F0 = random_smooth_density(g, np.random.default_rng(3))
    times = np.geomspace(1e-2, 1.0, 8)
    a = smoothing_curve(g, p, F0, times).ratios
    b = smoothing_curve(g, p, DensityField(7.0 * F0.values, g), times).ratios
    assert np.allclose(a, b, rtol=1e-12)


def test_smoothing_rejects_polynomial_weight(small_grid, params):
    with pytest.raises(ValueError):
        smoothing_curve(small_grid, params, single_cell_density(small_grid, (0, 0)), [0.1], w=WeightSpec())


# ------------------------------------------------------------------ Harnack


def test_harnack_of_stationary_state():
    p = ModelParams()
    g = quiet_grid(p, 16, 32)
    fp = fixed_point_steady(g, p)
    traj = _trajectory(g, p, fp.density, [0.0, 0.5, 1.0, 2.0], fp.N)
    r = harnack_ratio(traj, 0.2, 0.5, 1.0)
    M = fp.density.values[g.eps_region(0.2)]
    assert r.ratio == pytest.approx(M.max() / M.min(), rel=1e-8)


def test_harnack_dirac_finite_and_monotone():
    p = ModelParams()
    g = quiet_grid(p, 32, 64)
    F0 = single_cell_density(g, (16, 8))
    traj = _trajectory(g, p, F0, [0.0, 0.5, 1.0, 2.0, 3.0])
    ratios = [harnack_ratio(traj, 0.2, 0.5, T).ratio for T in (1.0, 2.0, 3.0)]
    assert all(math.isfinite(r) and r > 0 for r in ratios)
    assert ratios[0] >= ratios[1] >= ratios[2]


def test_harnack_scaling_invariant():
    p = ModelParams()
    g = quiet_grid(p, 16, 32)
    F0 = random_smooth_density(g, np.random.default_rng(1))
    a = harnack_ratio(_trajectory(g, p, F0, [0.0, 0.5, 1.0]), 0.2, 0.5, 1.0).ratio
    b = harnack_ratio(_trajectory(g, p, DensityField(5 * F0.values, g), [0.0, 0.5, 1.0]), 0.2, 0.5, 1.0).ratio
    assert a == pytest.approx(b, rel=1e-12)


def test_harnack_infinite_before_support_spreads():
    p = ModelParams()
    g = quiet_grid(p, 32, 64)
    F0 = single_cell_density(g, (16, 8))
    traj = _trajectory(g, p, F0, [0.0, 1e-3, 2e-3])
    r = harnack_ratio(traj, 0.2, 1e-3, 2e-3)
    assert math.isinf(r.ratio)
    assert len(r.offending) > 0
    with pytest.raises(ValueError):
        harnack_ratio(traj, 0.2, 2e-3, 1e-3)


# ------------------------------------------------------------- growth bound


def test_growth_bound_finite():
    p = ModelParams()
    g = quiet_grid(p, 16, 32)
    gb = growth_bound_certificate(g, p, trials=3, exponents=(1,))
    assert math.isfinite(gb.kappa)
    assert gb.kappa == gb.per_exponent[1]
    # mass is conserved and the twisted weight is bounded above and below,
    # so the L^1 ratio cannot decay faster than the weight contrast allows
    assert gb.kappa > -1.0


def test_growth_bound_continuous_in_c():
    g = quiet_grid(ModelParams(), 16, 32)
    k = [growth_bound_certificate(g, ModelParams(c=c), trials=3).kappa for c in (0.0, 0.01, 0.02)]
    assert abs(k[1] - k[0]) < 0.5 * abs(k[0]) + 0.05
    assert abs(k[2] - k[1]) < 0.5 * abs(k[1]) + 0.05
