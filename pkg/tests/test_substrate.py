import numpy as np
import pytest

from neuroforce.substrate import (AMPA, GABA_A, GABA_B, MISMATCH_FIELDS, NMDA, Chip, Connectivity,
                                  CoreConfig, EventStream, FanInExceeded, KExceeded, Network,
                                  SubstrateError, SynapseParams, SynapseTable, apply_mismatch,
                                  compile_connectivity, merge_event_streams, simulate)
from neuroforce.substrate.io import (dump_substrate_config, parse_substrate_config,
                                     write_output_spikes)


def regular_inputs(n, rate, duration, seed=0):
    rng = np.random.default_rng(seed)
    return [np.arange(rng.uniform(0, 1 / rate), duration, 1 / rate) for _ in range(n)]


def one_to_all(n_in, n_out, count=1, syn_type=AMPA):
    pre, post = np.meshgrid(np.arange(n_in), np.arange(n_out), indexing="ij")
    size = n_in * n_out
    return SynapseTable(pre.ravel(), post.ravel(), np.full(size, syn_type), np.full(size, count))


def drive(n_syn, rate=30.0, duration=3.0, dt=1e-4, core=None, seed=0):
    core = core or CoreConfig(0, 1, mismatch_sigma=0.0)
    trains = regular_inputs(n_syn, rate, duration, seed)
    res = simulate([core], one_to_all(n_syn, core.n_neurons), merge_event_streams(trains),
                   duration, dt, n_inputs=n_syn)
    return res


class TestMismatch:
    def test_sigma_zero_is_nominal(self):
        core = CoreConfig(0, 10, mismatch_sigma=0.0)
        real = apply_mismatch(core)
        for name in MISMATCH_FIELDS:
            assert np.all(real.params[name] == getattr(core.neuron, name))
        assert np.all(real.gain == core.synapse.gain_array())

    def test_statistics(self):
        core = CoreConfig(0, 256, mismatch_sigma=0.1, seed=5)
        reals = [apply_mismatch(CoreConfig(c, 250, mismatch_sigma=0.1, seed=5)) for c in range(4)]
        for name in MISMATCH_FIELDS:
            values = np.concatenate([r.params[name] for r in reals])
            nominal = getattr(core.neuron, name)
            assert values.size == 1000
            assert abs(values.mean() / nominal - 1) < 0.01
            assert abs(values.std() / (0.1 * nominal) - 1) < 0.15

    def test_deterministic_and_size_independent(self):
        a = apply_mismatch(CoreConfig(1, 20, seed=9))
        b = apply_mismatch(CoreConfig(1, 20, seed=9))
        c = apply_mismatch(CoreConfig(1, 5, seed=9))
        for name in MISMATCH_FIELDS:
            assert np.array_equal(a.params[name], b.params[name])
            assert np.array_equal(a.params[name][:5], c.params[name])

    def test_truncation(self):
        real = apply_mismatch(CoreConfig(0, 200, mismatch_sigma=0.4, seed=1))
        for name in MISMATCH_FIELDS:
            ratio = real.params[name] / real.params[name].mean()
            assert np.all(np.abs(real.params[name] / getattr(CoreConfig().neuron, name) - 1) < 0.5)
            assert ratio.std() > 0


class TestCompile:
    def test_definitional(self):
        table = compile_connectivity(Connectivity([[2, -1]]), AMPA, GABA_B)
        assert table.rows() == [(0, 0, "AMPA", 2), (0, 1, "GABA_B", 1)]

    def test_zero_matrix(self):
        assert len(compile_connectivity(Connectivity(np.zeros((4, 3))))) == 0

    def test_fan_in(self):
        W = np.zeros((30, 2), dtype=int)
        W[:21, 1] = 3
        W[21:23, 1] = 1  # 65 synapses on neuron 1
        with pytest.raises(FanInExceeded) as exc:
            compile_connectivity(Connectivity(W, k=3, fan_in_limit=64))
        assert exc.value.neuron == 1
        W[22, 1] = 0
        assert compile_connectivity(Connectivity(W, k=3, fan_in_limit=64)).count.sum() == 64

    def test_k_exceeded(self):
        with pytest.raises(KExceeded):
            compile_connectivity(Connectivity([[4]], k=3))

    def test_type_choice(self):
        t = compile_connectivity(Connectivity([[1, -2]]), NMDA, GABA_A)
        assert t.rows() == [(0, 0, "NMDA", 1), (0, 1, "GABA_A", 2)]
        with pytest.raises(ValueError):
            compile_connectivity(Connectivity([[1]]), GABA_A, GABA_B)


class TestMerge:
    def test_merge(self):
        ev = merge_event_streams([np.array([0.1, 0.3]), np.array([0.2])])
        assert [(e.time, e.source) for e in ev] == [(0.1, 0), (0.2, 1), (0.3, 0)]

    def test_empty(self):
        assert len(merge_event_streams([])) == 0

    def test_tie_rule(self):
        ev = merge_event_streams([np.array([]), np.array([0.5]), np.array([0.5])])
        assert [e.source for e in ev] == [1, 2]
        ev = merge_event_streams([np.array([]), np.array([0.5]), np.array([0.5])][::-1])
        assert [e.source for e in ev] == [0, 1]


class TestSimulate:
    def test_zero_input_fixed_point(self):
        core = CoreConfig(0, 4, mismatch_sigma=0.1, seed=3)
        res = simulate([core], None, None, 2.0, 1e-4, n_inputs=0, trace_neuron=2)
        assert res.counts.sum() == 0
        assert np.ptp(res.v_trace) <= 1e-9
        # rest sits just above E_L because the exponential term is positive there
        assert 0 < res.v_trace[0] - core.neuron.E_L < 0.01

    def test_regular_spiking_and_step_refinement(self):
        # one input at 1 kHz: a dense, constant excitatory drive
        coarse = drive(1, rate=1000.0, duration=4.0, dt=1e-4).spikes[0]
        fine = drive(1, rate=1000.0, duration=4.0, dt=2e-5).spikes[0]
        assert coarse.size > 50
        isi = np.diff(coarse[coarse > 1.0])
        assert isi.std() / isi.mean() < 0.05
        assert abs(coarse.size - fine.size) <= 0.02 * fine.size

    def test_fi_curve_monotone(self):
        counts = [drive(n, duration=3.0).spikes[0].size for n in range(5, 55, 5)]
        assert counts == sorted(counts)
        assert counts[-1] > counts[0]

    def test_rate_calibration(self):
        # 30 synapses at 30 Hz -> about 30 Hz
        s = drive(30, duration=6.0).spikes[0]
        assert 25 <= np.count_nonzero(s > 1.0) / 5.0 <= 35

    def test_refractory_respected(self):
        core = CoreConfig(0, 10, mismatch_sigma=0.2, seed=1,
                          synapse=SynapseParams(charge=3.0))
        res = drive(60, rate=50.0, duration=2.0, core=core)
        refr = apply_mismatch(core).params["refractory"]
        for j, s in enumerate(res.spikes):
            assert s.size > 10
            assert np.diff(s).min() >= refr[j] - 1e-12

    def test_deterministic(self):
        core = CoreConfig(0, 5, seed=2, noise_current_sigma=0.5)
        trains = regular_inputs(20, 20.0, 2.0)
        ev = merge_event_streams(trains)
        a = simulate([core], one_to_all(20, 5), ev, 2.0, 1e-4, noise_seed=7, n_inputs=20)
        b = simulate([core], one_to_all(20, 5), ev, 2.0, 1e-4, noise_seed=7, n_inputs=20)
        c = simulate([core], one_to_all(20, 5), ev, 2.0, 1e-4, noise_seed=8, n_inputs=20)
        assert all(np.array_equal(x, y) for x, y in zip(a.spikes, b.spikes))
        assert any(not np.array_equal(x, y) for x, y in zip(a.spikes, c.spikes))

    def test_mismatch_differentiates_neurons(self):
        core = CoreConfig(0, 20, seed=4)
        res = drive(30, duration=3.0, core=core)
        assert len(set(res.counts.tolist())) > 1

    def test_excitation_and_inhibition_monotone(self):
        core = CoreConfig(0, 1, seed=6)
        trains = regular_inputs(25, 25.0, 4.0, seed=3)
        ev = merge_event_streams(trains)
        W = np.ones((25, 1), dtype=int)
        base = simulate([core], compile_connectivity(Connectivity(W)), ev, 4.0, n_inputs=25)
        for i in (0, 7, 19):
            more = W.copy()
            more[i] += 1
            res = simulate([core], compile_connectivity(Connectivity(more)), ev, 4.0, n_inputs=25)
            assert res.counts[0] >= base.counts[0]
            less = W.copy()
            less[i] = -1
            res = simulate([core], compile_connectivity(Connectivity(less)), ev, 4.0, n_inputs=25)
            assert res.counts[0] <= base.counts[0]

    def test_synapse_types_signs(self):
        core = CoreConfig(0, 1, mismatch_sigma=0.0)
        trains = regular_inputs(40, 30.0, 2.0)
        ev = merge_event_streams(trains)
        counts = {}
        for t in (AMPA, NMDA, GABA_A, GABA_B):
            counts[t] = simulate([core], one_to_all(40, 1, syn_type=t), ev, 2.0,
                                 n_inputs=40).counts[0]
        assert counts[AMPA] > 0 and counts[NMDA] > 0
        assert counts[GABA_A] == counts[GABA_B] == 0

    def test_recurrent_inhibition(self):
        cores = [CoreConfig(0, 2, mismatch_sigma=0.0), CoreConfig(1, 2, mismatch_sigma=0.0)]
        trains = regular_inputs(40, 30.0, 2.0)
        ff = one_to_all(40, 4)
        ev = merge_event_streams(trains)
        plain = simulate(cores, ff, ev, 2.0, n_inputs=40)
        rec = SynapseTable(np.array([2, 2, 3, 3]), np.array([0, 1, 0, 1]),
                           np.full(4, GABA_B), np.full(4, 5))
        inhibited = simulate(cores, ff, ev, 2.0, n_inputs=40, recurrent=rec)
        assert np.all(inhibited.counts[:2] < plain.counts[:2])
        assert np.array_equal(inhibited.counts[2:], plain.counts[2:])

    def test_rejects_unsorted_events(self):
        ev = EventStream(np.array([0.2, 0.1]), np.array([0, 0]))
        with pytest.raises(ValueError):
            simulate([CoreConfig()], one_to_all(1, 20), ev, 1.0, n_inputs=1)

    def test_rejects_large_dt(self):
        with pytest.raises(ValueError):
            simulate([CoreConfig()], None, None, 1.0, dt=1e-3, n_inputs=0)

    def test_divergence_reported(self):
        core = CoreConfig(0, 1, mismatch_sigma=0.0,
                          synapse=SynapseParams(gain={"AMPA": 1e308}))
        ev = merge_event_streams([np.array([0.01, 0.0101, 0.0102])])
        with pytest.raises(SubstrateError):
            simulate([core], one_to_all(1, 1, count=3), ev, 0.1, n_inputs=1)


class TestChip:
    def test_requires_connectivity(self):
        chip = Chip([CoreConfig(0, 2)])
        with pytest.raises(SubstrateError):
            chip.run(EventStream(np.zeros(0), np.zeros(0, dtype=int)), 1.0)

    def test_run_matches_simulate(self):
        core = CoreConfig(0, 3, seed=1)
        W = Connectivity(np.full((10, 3), 3))
        chip = Chip([core])
        chip.apply(Network([core], 10, compile_connectivity(W)))
        ev = merge_event_streams(regular_inputs(10, 30.0, 2.0))
        a = chip.run(ev, 2.0)
        b = simulate([core], compile_connectivity(W), ev, 2.0, n_inputs=10)
        assert all(np.array_equal(x, y) for x, y in zip(a.spikes, b.spikes))


def test_config_roundtrip():
    cores = [CoreConfig(0, 20, seed=3, noise_current_sigma=0.7), CoreConfig(2, 8, mismatch_sigma=0.0)]
    text = dump_substrate_config(cores, 5e-5)
    assert "core.2.neuron.tau_w = 0.1" in text
    back, dt = parse_substrate_config(text)
    assert back == cores and dt == 5e-5


def test_partial_config_uses_defaults():
    cores, dt = parse_substrate_config("core.1.n_neurons = 4\ncore.1.neuron.b = 0.2\n")
    assert cores[0].core_id == 1 and cores[0].neuron.b == 0.2 and cores[0].neuron.g_L == 0.05
    assert dt == 1e-4


def test_output_spike_csv_is_byte_stable(tmp_path):
    core = CoreConfig(0, 4, seed=1, noise_current_sigma=0.3)
    ev = merge_event_streams(regular_inputs(30, 30.0, 2.0))
    for name in ("a.csv", "b.csv"):
        res = simulate([core], one_to_all(30, 4), ev, 2.0, noise_seed=3, n_inputs=30)
        write_output_spikes(tmp_path / name, res)
    text = (tmp_path / "a.csv").read_text()
    assert text.startswith("neuron_id,time_s\n") and len(text.splitlines()) > 10
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
