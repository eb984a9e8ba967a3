import numpy as np
import pytest

from neuroforce.signal import ForceTrace, validate_train, write_spike_csv
from neuroforce.synth import (MuProfile, TrialSpec, directional_drive, synth_finger_task,
                              synth_mu_population, synth_spike_trains, triangular_force,
                              triangular_profile)


class TestTriangularProfile:
    def test_amplitude_and_endpoints(self):
        spec = TrialSpec(duration=25, peak=30, n_ramps=2)
        f = triangular_profile(spec)
        assert f.samples.max() == pytest.approx(30, abs=0.1)
        assert f.samples.min() == pytest.approx(-30, abs=0.1)
        assert triangular_force(0.0, spec) == 0.0
        assert triangular_force(25.0, spec) == 0.0
        assert len(f) == 2500

    def test_exact_extrema_on_analytic_profile(self):
        spec = TrialSpec(duration=25, peak=30, n_ramps=2)
        t = np.linspace(0, 25, 100001)
        v = triangular_force(t, spec)
        assert v.max() == pytest.approx(30) and v.min() == pytest.approx(-30)

    def test_zero_peak(self):
        assert not triangular_profile(TrialSpec(peak=0)).samples.any()

    def test_apex_of_two_second_triangle(self):
        spec = TrialSpec(duration=4, n_ramps=1)
        assert triangular_force(1.0, spec) == pytest.approx(30.0)
        assert triangular_force(3.0, spec) == pytest.approx(-30.0)
        # piecewise-linear midpoint of the rising flank
        assert triangular_force(0.5, spec) == pytest.approx(15.0)


class TestPopulation:
    def test_partition(self):
        p = synth_mu_population(20, 6, seed=7)
        assert len(p) == 26
        assert sum(x.grid in (1, 2) for x in p) == 20
        assert sum(x.grid in (3, 4) for x in p) == 6
        assert all(0 <= x.recruitment_threshold < 25 for x in p)

    def test_deterministic(self):
        assert synth_mu_population(20, 6, seed=7) == synth_mu_population(20, 6, seed=7)
        assert synth_mu_population(20, 6, seed=7) != synth_mu_population(20, 6, seed=8)

    def test_empty(self):
        assert synth_mu_population(0, 0, seed=3) == []

    def test_direction_bias_ranges(self):
        p = synth_mu_population(50, 50, seed=1)
        flex = [x.direction_bias for x in p if x.is_flexion]
        ext = [x.direction_bias for x in p if not x.is_flexion]
        assert np.mean(flex) == pytest.approx(0.2, abs=0.03)
        assert np.mean(ext) == pytest.approx(0.05, abs=0.03)


def constant(value, duration=25.0, fs=100.0):
    return ForceTrace(fs, np.full(int(duration * fs), value))


class TestSpikeTrains:
    def test_below_recruitment_silent(self):
        p = MuProfile(0, 1, recruitment_threshold=10.0)
        assert synth_spike_trains([p], constant(5.0), seed=1)[0].n_spikes == 0

    def test_regular_train_at_min_rate(self):
        p = MuProfile(0, 1, recruitment_threshold=0.0, min_rate=10.0, jitter_cv=0.0)
        tr = synth_spike_trains([p], constant(1e-9), seed=4)[0]
        assert 245 <= tr.n_spikes <= 255
        isi = np.diff(tr.spike_times)
        np.testing.assert_allclose(isi, 0.1, atol=1e-6)

    def test_extension_unit_fires_only_in_extension(self):
        spec = TrialSpec()
        force = triangular_profile(spec)
        p = MuProfile(0, 3, recruitment_threshold=8.0, direction_bias=0.0)
        tr = synth_spike_trains([p], force, seed=2)[0]
        assert tr.n_spikes > 0
        assert np.all(triangular_force(tr.spike_times, spec) < -8.0)

    def test_monotone_in_drive(self):
        p = MuProfile(0, 1, recruitment_threshold=5.0, jitter_cv=0.0)
        counts = [synth_spike_trains([p], constant(d), seed=0)[0].n_spikes
                  for d in (6, 8, 12, 16, 24, 30)]
        assert counts == sorted(counts)

    def test_strictly_increasing_and_in_range(self):
        task = synth_finger_task("thumb")
        for trial, trains in task.trains.items():
            for tr in trains:
                assert np.all(np.diff(tr.spike_times) > 0)
                assert tr.spike_times.min() >= 0 and tr.spike_times.max() <= 25.0

    def test_drive_combines_directions(self):
        p = MuProfile(0, 1, recruitment_threshold=0.0, direction_bias=0.2)
        d = directional_drive(p, np.array([10.0, -10.0]))
        np.testing.assert_allclose(d, [10.0, 2.0])


class TestFingerTask:
    def test_all_trains_validate(self):
        for finger in ("thumb", "index", "middle", "ring", "little"):
            task = synth_finger_task(finger)
            for trains in task.trains.values():
                for tr in trains:
                    assert validate_train(tr, task.duration).accepted, (finger, tr.mu_id)

    def test_trials_share_profiles_but_differ(self):
        task = synth_finger_task("index")
        assert task.trials == [1, 2, 3]
        a, b = task.trains[1][0].spike_times, task.trains[2][0].spike_times
        assert not np.array_equal(a, b)
        assert abs(a.size - b.size) < 0.2 * a.size

    def test_byte_identical_csv(self, tmp_path):
        for name in ("a.csv", "b.csv"):
            task = synth_finger_task("ring", spec=TrialSpec(seed=11))
            write_spike_csv(tmp_path / name, task.trains[1])
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
