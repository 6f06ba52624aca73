import warnings

import numpy as np
import pytest

from conftest import quiet_grid
from vck.analysis import random_smooth_density
from vck.evolve import (
    BlowUpError,
    EvolveConfig,
    SmallnessWarning,
    TimeStepError,
    default_dt,
    extrapolated_propagate,
    picard_iterate,
    propagate,
    run_linear,
    run_nonlinear,
    step,
)
from vck.grid import DensityField, assemble_generator, firing_rate
from vck.harris import matrix_exponential
from vck.model import ModelParams, WeightSpec
from vck.stationary import fixed_point_steady, solve_stationary


@pytest.fixture
def F0(small_grid):
    return random_smooth_density(small_grid, np.random.default_rng(3))


def test_stationary_profile_is_fixed_by_step(params, small_grid):
    M = solve_stationary(small_grid, params, 0.0)
    op = assemble_generator(small_grid, params, 0.0)
    dt = default_dt(small_grid, params)
    for scheme in ("imex", "explicit"):
        h = dt if scheme == "imex" else 0.9 * op.explicit_dt_bound()
        out = step(op, M, h, scheme)
        assert np.abs(out.values - M.values).max() < 1e-10 * np.abs(M.values).max()
        assert out.t == pytest.approx(h)


@pytest.mark.parametrize("scheme", ["imex", "explicit"])
def test_step_conserves_mass_and_positivity(scheme, F0, small_grid):
    p = ModelParams(c=0.1)
    op = assemble_generator(small_grid, p, 1.3)
    dt = op.imex_dt_bound() if scheme == "imex" else op.explicit_dt_bound()
    x = F0.values
    for _ in range(50):
        y = step(op, x, dt, scheme)
        assert abs(y.sum() - x.sum()) <= 1e-12 * x.sum()
        assert y.min() >= 0.0
        x = y


def test_step_rejects_large_dt(params, small_grid, F0):
    op = assemble_generator(small_grid, params, 0.0)
    with pytest.raises(TimeStepError, match="transport CFL bound"):
        step(op, F0, 1.01 * op.imex_dt_bound(), "imex")
    with pytest.raises(TimeStepError, match="explicit positivity bound"):
        step(op, F0, 1.01 * op.explicit_dt_bound(), "explicit")
    with pytest.raises(TimeStepError):
        run_linear(small_grid, params, 0.0, F0, EvolveConfig(dt=1.0, t_end=1.0))


def test_batched_step_matches_single(params, small_grid, F0):
    op = assemble_generator(small_grid, params, 0.0)
    dt = default_dt(small_grid, params)
    other = np.flipud(F0.values)
    batch = np.stack([F0.values, other], axis=-1)
    out = step(op, batch, dt)
    assert np.array_equal(out[..., 0], step(op, F0.values, dt))
    assert np.array_equal(out[..., 1], step(op, other, dt))


def test_config_validation():
    with pytest.raises(ValueError):
        EvolveConfig(scheme="rk4")
    with pytest.raises(ValueError):
        EvolveConfig(cfl_safety=1.5)
    with pytest.raises(ValueError):
        EvolveConfig(dt=-1.0)
    assert EvolveConfig(t_end=1.0).n_steps(0.1) == 10


def test_uncoupled_output_independent_of_input_trace(params, small_grid, F0):
    cfg = EvolveConfig(t_end=0.2)
    _, n = cfg.step_plan(small_grid, params)
    _, a = run_linear(small_grid, params, 0.0, F0, cfg)
    _, b = run_linear(small_grid, params, np.linspace(0, 10, n), F0, cfg)
    assert np.array_equal(a.rates, b.rates)


def test_run_linear_from_stationary_is_constant(small_grid):
    p = ModelParams(c=0.05)
    M = solve_stationary(small_grid, p, 1.0)
    traj, _ = run_linear(small_grid, p, 1.0, M, EvolveConfig(t_end=0.5))
    assert np.abs(traj.states - M.values[None]).max() < 1e-9


def test_mass_drift_over_thousand_steps(params, small_grid, F0):
    dt = default_dt(small_grid, params)
    traj, trace = run_linear(small_grid, params, 0.0, F0, EvolveConfig(dt=dt, t_end=1000 * dt))
    assert len(trace.rates) == 1001
    assert abs(traj.masses[-1] - traj.masses[0]) < 1e-9 * traj.masses[0]
    # reset bookkeeping: injected equals extracted step by step
    assert trace.cumulative_imbalance < 1e-12


def test_nonlinear_uncoupled_equals_linear(params, small_grid, F0):
    cfg = EvolveConfig(t_end=0.3)
    a, ta = run_linear(small_grid, params, 0.0, F0, cfg)
    b, tb = run_nonlinear(small_grid, params, F0, cfg)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(ta.rates, tb.rates)


def test_nonlinear_rate_bounded_by_weighted_sup(small_grid, F0):
    # N(F) <= C3 ||F||_{Linf_w} with C3 = sum over the reset band of J(v_F, y) / w(y) dy
    p = ModelParams(c=0.05)
    g = small_grid
    traj, trace = run_nonlinear(g, p, F0, EvolveConfig(t_end=1.0))
    w = WeightSpec().omega(g.y)
    from vck.model import eval_J

    C3 = float((eval_J(p, g.v_F, g.y[g.j_F:]) / w[g.j_F:]).sum() * g.dy)
    sup_w = np.array([np.abs(s * w[None, :]).max() for s in traj.states])
    C2 = sup_w.max() / sup_w[0]
    assert np.isfinite(C2)
    assert trace.rates.max() <= C3 * C2 * sup_w[0] * (1 + 1e-12)


def test_nonlinear_long_run_reaches_fixed_point(small_grid, F0):
    p = ModelParams(c=0.05)
    fp = fixed_point_steady(small_grid, p)
    _, trace = run_nonlinear(small_grid, p, F0, EvolveConfig(t_end=25.0, snapshot_every=1000))
    assert abs(trace.rates[-1] - fp.N) < 1e-6


def test_blowup_guard(params, small_grid, F0):
    with pytest.raises(BlowUpError):
        run_linear(small_grid, params, 0.0, F0, EvolveConfig(t_end=0.1, blowup_factor=1e-9))


def test_smallness_warning(small_grid, F0):
    p = ModelParams(c=0.3)
    with pytest.warns(SmallnessWarning):
        run_nonlinear(small_grid, p, F0, EvolveConfig(t_end=0.01, smallness_eta=1e-3))


def test_picard_uncoupled_one_iteration(params, small_grid, F0):
    res = picard_iterate(small_grid, params, F0, EvolveConfig(t_end=0.3))
    assert res.converged and res.iterations == 1


def test_picard_agrees_with_lagged_scheme(small_grid, F0):
    p = ModelParams(c=0.05)
    cfg = EvolveConfig(t_end=0.5)
    res = picard_iterate(small_grid, p, F0, cfg)
    _, lag = run_nonlinear(small_grid, p, F0, cfg)
    dt, _ = cfg.step_plan(small_grid, p)
    assert res.converged
    # the lagged scheme differs from the fixed point by O(dt)
    diff = np.abs(res.trace.rates - lag.rates).max()
    assert diff < 50 * dt * np.abs(lag.rates).max()


def test_picard_iterations_decrease_with_c(small_grid, F0):
    its = [picard_iterate(small_grid, ModelParams(c=c), F0, EvolveConfig(t_end=0.5)).iterations for c in (0.2, 0.1, 0.05)]
    assert its[0] >= its[1] >= its[2]


def test_semigroup_property(params, small_grid, F0):
    op = assemble_generator(small_grid, params, 0.0)
    dt = default_dt(small_grid, params)
    a = propagate(op, propagate(op, F0, 30 * dt, dt), 20 * dt, dt)
    b = propagate(op, F0, 50 * dt, dt)
    assert np.abs(a - b).max() <= 10 * 50 * 1e-12 * np.abs(b).max()


def test_extrapolation_converges_to_exponential(params):
    g = quiet_grid(params, 12, 12)
    op = assemble_generator(g, params, 1.0)
    F = random_smooth_density(g, np.random.default_rng(0))
    ref = (matrix_exponential(op.matrix, 0.5) @ F.values.ravel()).reshape(g.shape)
    dt = default_dt(g, params)
    errs = [np.abs(extrapolated_propagate(op, F, 0.5, dt, k) - ref).max() for k in (1, 2, 3, 4)]
    assert errs[0] > errs[1] > errs[2] > errs[3]
    assert errs[3] < 1e-8


def test_trajectory_accessors(params, small_grid, F0):
    traj, _ = run_linear(small_grid, params, 0.0, F0, EvolveConfig(t_end=0.2, snapshot_every=10))
    assert traj.times[0] == 0.0 and traj.times[-1] == pytest.approx(0.2, rel=1e-9)
    assert isinstance(traj.final, DensityField)
    assert traj.at(0.0).values is not None and len(traj) == len(traj.states)
    assert firing_rate(small_grid, params, traj.final) >= 0
