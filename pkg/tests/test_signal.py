import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from neuroforce.signal import (ForceTrace, MuSpikeTrain, exp_kernel_rate, read_force_csv,
                               read_spike_csv, rectified_targets, rmse, validate_train,
                               window_counts, write_force_csv, write_spike_csv)


def brute_rate(spikes, tau, t):
    """Direct kernel sum at each instant, no recursion."""
    spikes = np.asarray(spikes)
    out = np.zeros(len(t))
    for k, tk in enumerate(t):
        d = tk - spikes[spikes <= tk]
        out[k] = np.sum(np.exp(-d / tau)) / tau
    return out


def train(times, mu=0, grid=1):
    return MuSpikeTrain(mu, grid, "index", 1, np.asarray(times, dtype=float))


class TestValidate:
    def test_four_hz_accepted(self):
        res = validate_train(train(np.linspace(0.1, 24.9, 100)), 25.0)
        assert res.accepted and res.reason == "ok"
        assert res.mean_rate == 4.0

    def test_one_hz_rejected(self):
        res = validate_train(train(np.arange(25) + 0.5), 25.0)
        assert not res.accepted and res.reason == "rate_too_low"

    def test_out_of_range(self):
        times = np.append(np.linspace(0.1, 24.0, 100), 26.0)
        assert validate_train(train(times), 25.0).reason == "out_of_range"

    def test_non_monotonic(self):
        times = np.linspace(0.1, 24.0, 100)
        times[10] = times[9]
        assert validate_train(train(times), 25.0).reason == "non_monotonic"

    def test_rate_too_high(self):
        assert validate_train(train(np.linspace(0, 25, 1300)), 25.0).reason == "rate_too_high"


class TestExpKernel:
    def test_single_spike_closed_form(self):
        r = exp_kernel_rate([0.0], 0.2, 1000.0, 1.0)
        assert r.values[200] == pytest.approx(5 * math.exp(-1), abs=1e-9)
        assert r.values[200] == pytest.approx(1.8393972058572117, abs=1e-9)

    def test_empty(self):
        r = exp_kernel_rate([], 0.2, 100.0, 25.0)
        assert r.values.shape == (2500,) and not r.values.any()

    def test_causal(self):
        r = exp_kernel_rate([0.5], 0.2, 100.0, 1.0)
        assert not r.values[:50].any()
        assert r.values[50] == pytest.approx(5.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        spikes = np.sort(rng.uniform(0, 5, 80))
        r = exp_kernel_rate(spikes, 0.2, 100.0, 5.0)
        np.testing.assert_allclose(r.values, brute_rate(spikes, 0.2, r.times), rtol=1e-10, atol=1e-12)

    def test_regular_train_time_average(self):
        spikes = np.arange(0.0, 25.0, 0.1)
        r = exp_kernel_rate(spikes, 0.2, 1000.0, 25.0)
        sel = r.times >= 5.0
        assert np.mean(r.values[sel]) == pytest.approx(10.0, rel=0.01)

    def test_kernel_integrates_to_one(self):
        tau = 0.2
        integral, _ = quad(lambda t: brute_rate([0.0], tau, [t])[0], 0, 10 * tau, limit=200)
        assert integral == pytest.approx(1.0, rel=1e-3)
        r = exp_kernel_rate([0.0], tau, 10000.0, 10 * tau)
        assert np.trapezoid(r.values, r.times) == pytest.approx(1.0, rel=1e-3)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0, 3, allow_nan=False), max_size=30),
           st.lists(st.floats(0, 3, allow_nan=False), max_size=30))
    def test_linearity(self, a, b):
        ra = exp_kernel_rate(sorted(a), 0.2, 100.0, 3.0).values
        rb = exp_kernel_rate(sorted(b), 0.2, 100.0, 3.0).values
        rab = exp_kernel_rate(sorted(a + b), 0.2, 100.0, 3.0).values
        np.testing.assert_allclose(rab, ra + rb, rtol=1e-9, atol=1e-9)

    def test_rejects_bad_tau(self):
        with pytest.raises(ValueError):
            exp_kernel_rate([0.1], 0.0, 100.0, 1.0)


class TestWindowCounts:
    def test_window_count_for_trial(self):
        wc = window_counts([train([])], 0.1, 0.05, 25.0)
        assert wc.n_windows == 499 == math.floor(24.9 / 0.05 + 1e-9) + 1

    def test_membership(self):
        wc = window_counts([train([0.07])], 0.1, 0.05, 25.0)
        assert list(np.flatnonzero(wc.counts[:, 0])) == [0, 1]

    def test_empty_all_zero(self):
        wc = window_counts([train([]), train([])], 0.1, 0.05, 2.0)
        assert wc.counts.shape == (39, 2) and not wc.counts.any()

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            window_counts([train([])], 0.1, 0.0, 1.0)
        with pytest.raises(ValueError):
            window_counts([train([])], 2.0, 0.5, 1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(0.0, 9.99, allow_nan=False), min_size=1, max_size=50, unique=True))
    def test_against_membership_oracle(self, times):
        times = np.sort(times)
        wc = window_counts([train(times)], 0.1, 0.05, 10.0)
        for w in range(0, wc.n_windows, 37):
            lo, hi = w * 0.05, w * 0.05 + 0.1
            assert wc.counts[w, 0] == sum(lo <= t < hi for t in times)

    def test_each_interior_spike_in_two_windows(self):
        rng = np.random.default_rng(0)
        times = np.sort(rng.uniform(1.0, 9.0, 40))
        times = times[np.abs(np.mod(times, 0.05)) > 1e-6]
        wc = window_counts([train(times)], 0.1, 0.05, 10.0)
        assert wc.counts.sum() == 2 * times.size


class TestRmse:
    def test_identity(self):
        f = ForceTrace(100.0, np.sin(np.arange(100)))
        assert rmse(f, f) == 0.0

    def test_offset(self):
        f = ForceTrace(100.0, np.sin(np.arange(100)))
        assert rmse(ForceTrace(100.0, f.samples + 3), f) == pytest.approx(3.0)

    def test_hand_computed(self):
        assert rmse(ForceTrace(1.0, [0, 0, 0, 0]), ForceTrace(1.0, [3, -3, 3, -3])) == 3.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            rmse(ForceTrace(1.0, [0, 0, 0]), ForceTrace(1.0, [0, 0]))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=20),
           st.floats(0.1, 10))
    def test_symmetry_and_scaling(self, values, scale):
        a = ForceTrace(10.0, values)
        b = ForceTrace(10.0, np.roll(values, 1))
        assert rmse(a, b) == pytest.approx(rmse(b, a))
        sa, sb = ForceTrace(10.0, a.samples * scale), ForceTrace(10.0, b.samples * scale)
        assert rmse(sa, sb) == pytest.approx(scale * rmse(a, b), rel=1e-9, abs=1e-9)


class TestRectify:
    def test_example(self):
        flex, ext = rectified_targets(ForceTrace(1.0, [10, -20, 0]))
        assert list(flex.samples) == [10, 0, 0]
        assert list(ext.samples) == [0, 20, 0]

    def test_all_positive(self):
        _, ext = rectified_targets(ForceTrace(1.0, [1, 2, 3]))
        assert not ext.samples.any()

    def test_triangular(self):
        from neuroforce.synth import TrialSpec, triangular_profile
        force = triangular_profile(TrialSpec())
        flex, ext = rectified_targets(force)
        assert flex.samples.max() == pytest.approx(30) and ext.samples.max() == pytest.approx(30)
        assert not np.any((flex.samples > 0) & (ext.samples > 0))
        np.testing.assert_array_equal(flex.samples, np.maximum(force.samples, 0))

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=50))
    def test_reconstruction_exact(self, values):
        flex, ext = rectified_targets(ForceTrace(1.0, values))
        assert np.array_equal(flex.samples - ext.samples, np.asarray(values, dtype=float))
        assert (flex.samples >= 0).all() and (ext.samples >= 0).all()


def test_csv_roundtrip(tmp_path):
    trains = [MuSpikeTrain(3, 1, "ring", 1, [0.1, 0.2]), MuSpikeTrain(7, 4, "ring", 1, [0.15])]
    write_spike_csv(tmp_path / "s.csv", trains)
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "mu_id,grid,finger,trial,time_s"
    back = read_spike_csv(tmp_path / "s.csv")
    assert [(t.mu_id, t.grid, list(t.spike_times)) for t in back] == [(3, 1, [0.1, 0.2]), (7, 4, [0.15])]

    f = ForceTrace(100.0, np.linspace(-30, 30, 50))
    write_force_csv(tmp_path / "f.csv", f)
    g = read_force_csv(tmp_path / "f.csv")
    assert g.sample_rate == 100.0
    np.testing.assert_allclose(g.samples, f.samples, atol=1e-9)


def test_force_csv_rejects_large(tmp_path):
    (tmp_path / "f.csv").write_text("time_s,force_pct_mvc\n0,0\n0.01,150\n")
    with pytest.raises(ValueError):
        read_force_csv(tmp_path / "f.csv")
