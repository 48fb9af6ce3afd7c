import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridpredict.errors import BadRange, RateMismatch, ValidationError, ZeroSignal
from gridpredict.grid import PowerGraph, classify_load_buses, default_network
from gridpredict.simulator import (
    MAGNITUDE_CLASSES,
    MeasurementSeries,
    Scenario,
    SwingNetwork,
    SwingParams,
    add_measurement_noise,
    default_params,
    empirical_snr_db,
    generate_grid,
    generate_scenarios,
    lhs_sample,
    sample_pmu,
    simulate_batch,
    simulate_scenarios,
    simulate_swing,
)

G9 = default_network()
P9 = default_params(G9)


def _two_machine(M, B, D=0.0):
    g = PowerGraph.from_lists([(1, "G"), (2, "G")], [(1, 2)])
    p = SwingParams(inertia=np.array([M, np.inf]), damping=np.array([D, 0.0]),
                    susceptance=np.array([B]), base_load=np.zeros(0))
    return g, p


def test_no_events_stays_nominal():
    tr = simulate_swing(G9, P9, [], 5.0)
    f = tr.bus_frequencies()
    assert np.max(np.abs(f - 60.0)) < 1e-9
    v = tr.bus_voltages()
    np.testing.assert_allclose(v, np.broadcast_to(v[0], v.shape), atol=1e-12)


def test_infinite_bus_period():
    M, B = 0.1, 5.0
    g, p = _two_machine(M, B)
    tr = simulate_swing(g, p, [], 3.0, initial_offset=np.array([1e-3, 0.0]))
    d = tr.delta[:, 0]
    # downward zero crossings of the angle, linearly interpolated
    idx = np.flatnonzero((d[:-1] > 0) & (d[1:] <= 0))
    t = tr.times
    cross = t[idx] + d[idx] / (d[idx] - d[idx + 1]) * tr.dt
    period = np.mean(np.diff(cross))
    assert period == pytest.approx(2 * np.pi * np.sqrt(M / B), rel=0.01)


def test_energy_conserved_without_damping():
    params = SwingParams(inertia=P9.inertia, damping=np.zeros(3), susceptance=P9.susceptance,
                         base_load=P9.base_load, dispatch=P9.dispatch, v0=P9.v0)
    net = SwingNetwork(G9, params)
    tr = simulate_batch(net, [[]], 10.0, initial_offset=np.array([0.05, -0.03, 0.0]))[0]
    H = net.energy(tr.delta, tr.omega)
    assert np.max(np.abs(H - H[0])) / abs(H[0]) <= 1e-6


def test_frequencies_settle_by_60s():
    sc = generate_scenarios(G9, 2, "High", 1, seed=3)[0]
    tr = simulate_swing(G9, P9, sc.events, 60.0)
    f_end = tr.bus_frequencies(slice(-1, None))[0]
    assert np.max(np.abs(f_end - 60.0)) < 1e-3
    assert np.max(np.abs(tr.bus_frequencies(slice(0, 2000)) - 60.0)) > 1e-3


def test_dt_bound():
    with pytest.raises(ValidationError):
        simulate_swing(G9, P9, [], 1.0, dt=2e-3)


def test_lhs_examples():
    s = lhs_sample(1, 1, [(2.0, 3.0)], 0)
    assert s.shape == (1, 1) and 2.0 <= s[0, 0] < 3.0
    q = lhs_sample(4, 1, [(0.0, 1.0)], 5)[:, 0]
    assert sorted(np.floor(q * 4).astype(int)) == [0, 1, 2, 3]
    np.testing.assert_array_equal(lhs_sample(7, 3, [(0, 1)] * 3, 9), lhs_sample(7, 3, [(0, 1)] * 3, 9))
    with pytest.raises(BadRange):
        lhs_sample(3, 1, [(1.0, 1.0)], 0)
    with pytest.raises(BadRange):
        lhs_sample(0, 1, [(0.0, 1.0)], 0)


@given(st.integers(1, 60), st.integers(1, 5), st.integers(0, 2**32 - 1),
       st.floats(-5, 5), st.floats(0.01, 10))
def test_lhs_stratification(n, d, seed, lo, width):
    s = lhs_sample(n, d, [(lo, lo + width)] * d, seed)
    assert s.shape == (n, d)
    u = (s - lo) / width
    for j in range(d):
        strata = np.clip(np.floor(u[:, j] * n).astype(int), 0, n - 1)
        assert sorted(strata) == list(range(n))


def test_generate_scenarios_construction():
    buses = classify_load_buses(G9, 2)
    assert len(buses) == 3
    scs = generate_scenarios(G9, 2, "Medium", 5, seed=1)
    assert len(scs) == 5
    for s in scs:
        assert len(s.events) == 3 and [e.bus for e in s.events] == buses
        assert all(e.width == 0.25 and e.start_time == 0.0 for e in s.events)
    assert len({s.seed for s in scs}) == 5


def test_magnitude_classes_separate():
    for case in (1, 5):
        low = [abs(e.magnitude) for s in generate_scenarios(G9, case, "Low", 8, 2) for e in s.events]
        high = [abs(e.magnitude) for s in generate_scenarios(G9, case, "High", 8, 2) for e in s.events]
        assert max(low) < min(high)
        lo, hi = MAGNITUDE_CLASSES["Low"]
        assert all(lo * 3.0 <= m <= hi * 3.0 for m in low)


def test_generate_grid_splits():
    scs = generate_grid(G9, 3, seed=0, n_train=1)
    assert len(scs) == 45
    assert sum(s.split == "train" for s in scs) == 15
    assert len({s.name for s in scs}) == 45
    with pytest.raises(ValidationError):
        generate_grid(G9, 2, 0, n_train=3)


def test_scenario_roundtrip():
    sc = generate_scenarios(G9, 1, "Low", 1, 4)[0]
    assert Scenario.from_dict(sc.to_dict()) == sc


def test_sample_pmu():
    tr = simulate_swing(G9, P9, [], 10.0)
    s = sample_pmu(tr, 50.0, 10.0)
    assert len(s) == 500 and s.values.shape == (500, 18)
    np.testing.assert_allclose(np.diff(s.times), 0.02)
    assert s.times[0] == 0.0
    full = sample_pmu(tr, 1000.0)
    assert len(full) == tr.delta.shape[0]
    np.testing.assert_array_equal(full.frequencies, tr.bus_frequencies())
    with pytest.raises(RateMismatch):
        sample_pmu(tr, 300.0)


def _series(values):
    values = np.asarray(values, dtype=float)
    T = values.shape[0]
    labels = tuple(f"freq_{i + 1}" for i in range(values.shape[1]))
    return MeasurementSeries(50.0, np.arange(T) / 50.0, values, labels)


def test_noise_std_unit_rms():
    T = 2000
    x = np.tile([1.0, -1.0], T // 2)[:, None]  # mean 0, unit RMS deviation
    noisy = add_measurement_noise(_series(x), 85.0, 0)
    noise = noisy.values - x
    assert np.std(noise) == pytest.approx(10 ** (-85 / 20), rel=1e-9)
    assert 10 ** (-85 / 20) == pytest.approx(5.623e-5, rel=1e-4)
    assert abs(noise.mean()) < 1e-15


def test_noise_none_and_constant():
    s = _series(np.random.default_rng(0).normal(size=(10, 2)))
    assert add_measurement_noise(s, None, 0) is s
    with pytest.raises(ZeroSignal):
        add_measurement_noise(_series(np.full((10, 2), 60.0)), 85.0, 0)


@given(st.integers(500, 1500), st.floats(20, 100), st.integers(0, 1000))
@settings(max_examples=25)
def test_noise_snr_calibrated(T, snr, seed):
    rng = np.random.default_rng(seed)
    x = 60.0 + np.cumsum(rng.normal(size=(T, 3)), axis=0) * 1e-3
    noisy = add_measurement_noise(_series(x), snr, seed)
    assert np.all(np.abs(empirical_snr_db(x, noisy.values) - snr) <= 0.5)


def test_simulation_deterministic_and_batch_independent():
    scs = generate_scenarios(G9, 5, "High", 3, seed=11)
    a = simulate_scenarios(G9, P9, scs, 2.0)
    b = simulate_scenarios(G9, P9, scs[1:2], 2.0)
    c = simulate_scenarios(G9, P9, scs, 2.0, chunk=1)
    for x, y in zip(a, c):
        np.testing.assert_array_equal(x.values, y.values)
    np.testing.assert_array_equal(a[1].values, b[0].values)
    clean = simulate_scenarios(G9, P9, scs[:1], 2.0, noisy=False)[0]
    assert not np.array_equal(clean.values, a[0].values)
    assert np.all(np.abs(empirical_snr_db(clean.values, a[0].values) - 85.0) < 0.5)


def test_series_layout():
    s = simulate_scenarios(G9, P9, generate_scenarios(G9, 1, "Low", 1, 0), 14.0)[0]
    assert len(s) == 700 and s.bus_ids == G9.bus_ids
    assert s.channel_labels[0] == "freq_1" and s.channel_labels[9] == "vmag_1"
    assert np.max(np.abs(s.frequencies - 60.0)) > 1e-4
