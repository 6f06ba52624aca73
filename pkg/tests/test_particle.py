import numpy as np
import pytest

from conftest import quiet_grid
from vck.model import ModelParams
from vck.particle import Calibration, StepTooLargeError, empirical_density, simulate_network


def test_calibration_example():
    cal = Calibration.from_params(ModelParams(y_star=1.0, a_star=0.5, c=0.1))
    assert cal.nu_ext == pytest.approx(1.0)
    assert cal.h == pytest.approx(1.0)
    assert cal.drift == pytest.approx(1.0)
    assert cal.diffusion == pytest.approx(0.5)
    assert cal.net_jump == pytest.approx(0.2)


def test_no_input_no_spikes():
    p = ModelParams(c=0.1)
    n = 50
    res = simulate_network(p, n, 1e-3, 2.0, state=(np.full(n, 0.2), np.zeros(n)), external=False)
    assert res.n_spikes == 0
    assert np.all(res.y == 0)


def test_resets_match_spikes_and_ordering():
    p = ModelParams(y_star=2.0, a_star=0.1, c=0.05)
    res = simulate_network(p, 500, 1e-3, 2.0, seed=1)
    assert res.n_spikes > 0
    assert res.n_resets == res.n_spikes
    assert np.all(np.diff(res.spike_times) >= 0)
    assert res.v.min() >= 0 and res.v.max() < p.v_F
    assert res.y.min() >= 0


def test_empirical_density_mass_and_errors():
    p = ModelParams(y_star=2.0, a_star=0.1)
    g = quiet_grid(p, 8, 8, 6.0)
    res = simulate_network(p, 300, 1e-3, 1.0, seed=2, density_grid=g, window=(0.5, 1.0))
    F = empirical_density(res)
    dropped = F.meta["dropped_fraction"]
    assert F.mass == pytest.approx(1.0, rel=1e-12)
    assert 0 <= dropped < 0.05
    with pytest.raises(ValueError):
        empirical_density(res, window=(0.0, 0.5))
    with pytest.raises(ValueError):
        empirical_density(simulate_network(p, 10, 1e-3, 0.1))
    with pytest.raises(ValueError):
        simulate_network(p, 10, 1e-3, 0.1, density_grid=g, window=(0.2, 0.1))
    late = simulate_network(p, 10, 1e-3, 0.1, density_grid=g, window=(5.0, 6.0))
    with pytest.raises(ValueError):
        empirical_density(late)


def test_seeds_agree_within_standard_error():
    p = ModelParams(y_star=2.0, a_star=0.1, c=0.05)
    w = (2.0, 6.0)
    a = simulate_network(p, 2000, 1e-3, 6.0, seed=10)
    b = simulate_network(p, 2000, 1e-3, 6.0, seed=11)
    se = np.hypot(a.rate_standard_error(w), b.rate_standard_error(w))
    assert abs(a.firing_rate(w) - b.firing_rate(w)) < 3 * se


def test_conductance_mean_matches_drift():
    # E y -> y_* + c N in the stationary regime
    p = ModelParams(y_star=2.0, a_star=0.1, c=0.05)
    res = simulate_network(p, 4000, 1e-3, 8.0, seed=3)
    N = res.firing_rate((4.0, 8.0))
    b = p.y_star + p.c * N
    assert res.y.mean() == pytest.approx(b, rel=0.03)


def test_step_too_large():
    p = ModelParams(y_star=2.0, a_star=0.01)  # nu_ext = 200
    with pytest.raises(StepTooLargeError):
        simulate_network(p, 10, 1e-2, 1.0)
    with pytest.raises(ValueError):
        simulate_network(p, 0, 1e-3, 1.0)


def test_spike_log(tmp_path):
    p = ModelParams(y_star=2.0, a_star=0.1)
    res = simulate_network(p, 50, 1e-3, 1.0, seed=4)
    res.write_spike_log(tmp_path / "spikes.csv")
    lines = (tmp_path / "spikes.csv").read_text().splitlines()
    assert lines[0] == "time,neuron" and len(lines) == res.n_spikes + 1


def test_rate_fluctuations_shrink_with_n():
    p = ModelParams(y_star=2.0, a_star=0.1, c=0.05)
    w = (1.0, 3.0)
    spread = []
    for n in (200, 3200):
        rates = [simulate_network(p, n, 1e-3, 3.0, seed=s).firing_rate(w) for s in range(4)]
        spread.append(np.std(rates))
    assert spread[1] < spread[0]
