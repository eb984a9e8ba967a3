"""Emulated mixed-signal substrate: cores, mismatch, synapses, AER input, simulation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from ..signal import MuSpikeTrain
from ._kernel import run_adex

SYNAPSE_TYPES = ("AMPA", "NMDA", "GABA_A", "GABA_B")
AMPA, NMDA, GABA_A, GABA_B = range(4)
SIGNS = np.array([1.0, 1.0, -1.0, -1.0])
MAX_NEURONS_PER_CORE = 256
N_CORES = 4
MAX_DT = 0.5e-3
DEFAULT_K = 6
DEFAULT_FAN_IN = 64
# membrane noise is defined at this step; other steps rescale it so the
# diffusion per unit time is independent of dt
NOISE_REF_DT = 1e-4


class SubstrateError(RuntimeError):
    pass


class FanInExceeded(ValueError):
    def __init__(self, neuron: int, fan_in: int, limit: int):
        super().__init__(f"fan_in_exceeded: neuron {neuron} has fan-in {fan_in} > {limit}")
        self.neuron = neuron


class KExceeded(ValueError):
    pass


@dataclass
class NeuronParams:
    """AdExp parameters in normalized units.

    Conductances are per millisecond so ``C / g_L`` is the membrane time
    constant in ms; ``tau_w`` and ``refractory`` are in seconds.
    """

    C: float = 1.0
    g_L: float = 0.05
    E_L: float = 0.0
    V_T: float = 1.0
    Delta_T: float = 0.2
    V_peak: float = 2.0
    V_reset: float = 0.0
    a: float = 0.0
    b: float = 0.1
    tau_w: float = 0.1
    refractory: float = 0.002

    def __post_init__(self):
        if self.Delta_T <= 0:
            raise ValueError("Delta_T must be positive")
        if not self.V_reset < self.V_peak:
            raise ValueError("V_reset must be below V_peak")
        if self.tau_w <= 0:
            raise ValueError("tau_w must be positive")
        if self.refractory < 0:
            raise ValueError("refractory must be >= 0")
        if self.C <= 0 or self.g_L <= 0:
            raise ValueError("C and g_L must be positive")


NEURON_FIELDS = tuple(f.name for f in fields(NeuronParams))
MISMATCH_FIELDS = ("C", "g_L", "V_T", "Delta_T", "b", "tau_w", "refractory")
# parameter index of a synapse-type gain in the mismatch stream
_GAIN_INDEX_BASE = 100


@dataclass
class SynapseParams:
    """Per-type time constant (s) and gain (current per unit synapse state).

    Gains default to ``charge / tau`` so one synapse of any type delivers the
    same charge per event; types then differ only in temporal profile. The
    default charge makes a nominal neuron fire at roughly the summed input
    rate divided by 30, i.e. 30 synapses driven at 30 Hz give ~30 Hz.
    """

    tau: dict[str, float] = field(default_factory=lambda: {
        "AMPA": 0.005, "NMDA": 0.05, "GABA_A": 0.005, "GABA_B": 0.05})
    gain: dict[str, float] = field(default_factory=dict)
    charge: float = 0.4

    def __post_init__(self):
        for name in SYNAPSE_TYPES:
            if self.tau.get(name, 0) <= 0:
                raise ValueError(f"tau[{name}] must be positive")
            self.gain.setdefault(name, self.charge / (self.tau[name] * 1e3))
            if self.gain[name] <= 0:
                raise ValueError(f"gain[{name}] must be positive")

    def tau_array(self) -> np.ndarray:
        return np.array([self.tau[n] for n in SYNAPSE_TYPES])

    def gain_array(self) -> np.ndarray:
        return np.array([self.gain[n] for n in SYNAPSE_TYPES])


@dataclass
class CoreConfig:
    core_id: int = 0
    n_neurons: int = 20
    neuron: NeuronParams = field(default_factory=NeuronParams)
    synapse: SynapseParams = field(default_factory=SynapseParams)
    mismatch_sigma: float = 0.1
    noise_current_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.core_id < N_CORES:
            raise ValueError(f"core_id must be in 0..{N_CORES - 1}")
        if not 1 <= self.n_neurons <= MAX_NEURONS_PER_CORE:
            raise ValueError(f"n_neurons must be in 1..{MAX_NEURONS_PER_CORE}")
        if self.mismatch_sigma < 0:
            raise ValueError("mismatch_sigma must be >= 0")


@dataclass
class CoreRealization:
    """Per-neuron parameters of one core after device mismatch."""

    core_id: int
    params: dict[str, np.ndarray]  # name -> [n_neurons]
    gain: np.ndarray               # [n_neurons, 4]
    syn_tau: np.ndarray            # [4]
    noise_sigma: float

    @property
    def n_neurons(self) -> int:
        return int(self.gain.shape[0])

    def neuron(self, j: int) -> NeuronParams:
        return NeuronParams(**{k: float(v[j]) for k, v in self.params.items()})


def _mismatch_factor(seed: int, core_id: int, neuron: int, index: int, sigma: float) -> float:
    if sigma == 0:
        return 1.0
    rng = np.random.default_rng(np.random.SeedSequence([seed, core_id, neuron, index]))
    while True:
        eps = rng.normal(0.0, sigma)
        if -0.5 < eps < 0.5:
            return 1.0 + eps


def apply_mismatch(core: CoreConfig) -> CoreRealization:
    """Draw the core's per-neuron parameters; sigma 0 returns the nominal values.

    Every factor depends only on (seed, core_id, neuron, parameter index), so
    a neuron's realization does not change when the core is resized.
    """
    n = core.n_neurons
    nominal = {name: getattr(core.neuron, name) for name in NEURON_FIELDS}
    params = {name: np.full(n, float(v)) for name, v in nominal.items()}
    gain = np.tile(core.synapse.gain_array(), (n, 1))
    for j in range(n):
        for name in MISMATCH_FIELDS:
            idx = NEURON_FIELDS.index(name)
            params[name][j] = nominal[name] * _mismatch_factor(core.seed, core.core_id, j, idx,
                                                               core.mismatch_sigma)
        for q in range(4):
            gain[j, q] *= _mismatch_factor(core.seed, core.core_id, j, _GAIN_INDEX_BASE + q,
                                           core.mismatch_sigma)
    return CoreRealization(core.core_id, params, gain, core.synapse.tau_array(),
                           core.noise_current_sigma)


@dataclass
class Connectivity:
    """Signed integer synapse counts ``W[input, output]`` bounded by ``k``."""

    W: np.ndarray
    k: int = DEFAULT_K
    fan_in_limit: int = DEFAULT_FAN_IN

    def __post_init__(self):
        W = np.asarray(self.W)
        if W.ndim != 2:
            raise ValueError("W must be two-dimensional")
        if not np.all(np.equal(np.mod(W, 1), 0)):
            raise ValueError("W must hold integers")
        self.W = W.astype(np.int64)

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape

    def fan_in(self) -> np.ndarray:
        return np.abs(self.W).sum(axis=0)

    def check(self) -> None:
        if np.any(np.abs(self.W) > self.k):
            raise KExceeded(f"k_exceeded: |W| max {np.abs(self.W).max()} > k={self.k}")
        fan = self.fan_in()
        bad = np.flatnonzero(fan > self.fan_in_limit)
        if bad.size:
            raise FanInExceeded(int(bad[0]), int(fan[bad[0]]), self.fan_in_limit)


@dataclass
class SynapseTable:
    """One row per (pre, post, type) with a positive synapse count."""

    pre: np.ndarray
    post: np.ndarray
    syn_type: np.ndarray
    count: np.ndarray

    @classmethod
    def empty(cls) -> "SynapseTable":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), z.copy())

    def __len__(self) -> int:
        return int(self.pre.size)

    def concat(self, other: "SynapseTable") -> "SynapseTable":
        return SynapseTable(*(np.concatenate((getattr(self, f), getattr(other, f)))
                              for f in ("pre", "post", "syn_type", "count")))

    def shifted(self, pre: int = 0, post: int = 0) -> "SynapseTable":
        return SynapseTable(self.pre + pre, self.post + post, self.syn_type.copy(), self.count.copy())

    def rows(self) -> list[tuple[int, int, str, int]]:
        return [(int(p), int(q), SYNAPSE_TYPES[int(t)], int(c))
                for p, q, t, c in zip(self.pre, self.post, self.syn_type, self.count)]


def compile_connectivity(conn: Connectivity, exc_type: int = AMPA,
                         inh_type: int = GABA_B) -> SynapseTable:
    """Translate signed counts into excitatory/inhibitory synapse instances."""
    if exc_type not in (AMPA, NMDA):
        raise ValueError("exc_type must be AMPA or NMDA")
    if inh_type not in (GABA_A, GABA_B):
        raise ValueError("inh_type must be GABA_A or GABA_B")
    conn.check()
    pre, post = np.nonzero(conn.W)
    vals = conn.W[pre, post]
    types = np.where(vals > 0, exc_type, inh_type).astype(np.int64)
    return SynapseTable(pre.astype(np.int64), post.astype(np.int64), types, np.abs(vals))


@dataclass(frozen=True)
class AddressEvent:
    time: float
    source: int


@dataclass
class EventStream:
    """Time-sorted address events held as parallel arrays."""

    times: np.ndarray
    sources: np.ndarray

    def __len__(self) -> int:
        return int(self.times.size)

    def __iter__(self):
        for t, s in zip(self.times, self.sources):
            yield AddressEvent(float(t), int(s))

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.times) >= 0))


def merge_event_streams(trains: Sequence[MuSpikeTrain] | Sequence[np.ndarray]) -> EventStream:
    """Merge per-input trains into one stream; source id is the list position.

    Ties in time resolve to the lower source id first.
    """
    times, sources = [], []
    for src, tr in enumerate(trains):
        t = tr.spike_times if isinstance(tr, MuSpikeTrain) else np.asarray(tr, dtype=np.float64)
        times.append(t)
        sources.append(np.full(t.size, src, dtype=np.int64))
    if not times:
        return EventStream(np.zeros(0), np.zeros(0, dtype=np.int64))
    t = np.concatenate(times)
    s = np.concatenate(sources)
    order = np.lexsort((s, t))
    return EventStream(t[order], s[order])


@dataclass
class Network:
    """Cores plus synapses: input->neuron and neuron->neuron (global neuron ids).

    Global neuron ids number the neurons of ``cores`` consecutively in list
    order.
    """

    cores: list[CoreConfig]
    n_inputs: int
    input_synapses: SynapseTable = field(default_factory=SynapseTable.empty)
    recurrent_synapses: SynapseTable = field(default_factory=SynapseTable.empty)

    @property
    def n_neurons(self) -> int:
        return sum(c.n_neurons for c in self.cores)

    def core_offset(self, core_id: int) -> int:
        off = 0
        for c in self.cores:
            if c.core_id == core_id:
                return off
            off += c.n_neurons
        raise KeyError(f"core {core_id} not in network")

    def core_slice(self, core_id: int) -> slice:
        off = self.core_offset(core_id)
        n = next(c.n_neurons for c in self.cores if c.core_id == core_id)
        return slice(off, off + n)


@dataclass
class SimResult:
    spikes: list[np.ndarray]   # per global neuron, sorted spike times (s)
    duration: float
    dt: float
    v_trace: np.ndarray | None = None

    @property
    def counts(self) -> np.ndarray:
        return np.array([s.size for s in self.spikes])


def resting_state(p: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Zero-input fixed point (V*, w*) of each neuron.

    The exponential term is positive at E_L, so rest sits slightly above
    E_L; falls back to E_L where no rest point exists below V_T.
    """
    n = p["C"].size
    V0 = p["E_L"].copy()
    for j in range(n):
        gl, el, vt, dT, a = (p[k][j] for k in ("g_L", "E_L", "V_T", "Delta_T", "a"))

        def f(v):
            return -(gl + a) * (v - el) + gl * dT * math.exp((v - vt) / dT)

        if vt > el and f(vt) < 0:
            V0[j] = brentq(f, el, vt, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    return V0, p["a"] * (V0 - p["E_L"])


def _dense_counts(table: SynapseTable, n_pre: int, n_post: int) -> np.ndarray:
    dense = np.zeros((n_pre, n_post, 4))
    np.add.at(dense, (table.pre, table.post, table.syn_type), table.count.astype(np.float64))
    return dense


def simulate(cores: Sequence[CoreConfig] | Network, synapses: SynapseTable | None = None,
             events: EventStream | None = None, duration: float = 1.0, dt: float = 1e-4,
             noise_seed: int = 0, recurrent: SynapseTable | None = None,
             n_inputs: int | None = None, realizations: Sequence[CoreRealization] | None = None,
             trace_neuron: int = -1) -> SimResult:
    """Fixed-step exponential-Euler simulation of all neurons in ``cores``.

    Leak, adaptation and synaptic decays are integrated exactly over each
    step with the exponential spike term and inputs held constant. An event
    at time t is delivered at the start of step ``floor(t / dt)``; a spike
    emitted during step k is stamped ``(k + 1) * dt`` and reaches its targets
    at the start of step k + 1. Neurons start at their zero-input rest.
    """
    if isinstance(cores, Network):
        net = cores
        cores, synapses, recurrent, n_inputs = net.cores, net.input_synapses, net.recurrent_synapses, net.n_inputs
    cores = list(cores)
    if not 0 < dt <= MAX_DT:
        raise ValueError(f"dt must be in (0, {MAX_DT}]")
    events = events if events is not None else EventStream(np.zeros(0), np.zeros(0, dtype=np.int64))
    if not events.is_sorted():
        raise ValueError("events must be sorted by time")
    synapses = synapses if synapses is not None else SynapseTable.empty()
    if n_inputs is None:
        n_inputs = int(max(synapses.pre.max(initial=-1), events.sources.max(initial=-1)) + 1)
    reals = list(realizations) if realizations is not None else [apply_mismatch(c) for c in cores]
    N = sum(r.n_neurons for r in reals)
    if len(synapses) and (synapses.post.max() >= N or synapses.pre.max() >= n_inputs):
        raise ValueError("synapse table references missing neurons or inputs")

    params = {name: np.concatenate([r.params[name] for r in reals]) for name in NEURON_FIELDS}
    gain = np.concatenate([r.gain for r in reals])
    syn_decay = np.concatenate([np.tile(np.exp(-dt / r.syn_tau), (r.n_neurons, 1)) for r in reals])
    noise = np.concatenate([np.full(r.n_neurons, r.noise_sigma) for r in reals])
    noise = noise * math.sqrt(NOISE_REF_DT / dt)
    refr_steps = np.ceil(params["refractory"] / dt - 1e-9).astype(np.int64)

    n_steps = int(round(duration / dt))
    ev_step = np.floor(events.times / dt + 1e-9).astype(np.int64)
    keep = (ev_step >= 0) & (ev_step < n_steps)
    ev_step, ev_src = ev_step[keep], events.sources[keep].astype(np.int64)
    in_counts = _dense_counts(synapses, n_inputs, N)
    rec = recurrent if recurrent is not None and len(recurrent) else None
    rec_counts = _dense_counts(rec, N, N) if rec is not None else np.zeros((0, 0, 4))

    dt_ms = dt * 1e3
    spk_n, spk_k, _, status, v_final, v_trace = run_adex(
        n_steps, dt_ms,
        params["C"], params["g_L"], params["E_L"], params["V_T"], params["Delta_T"],
        params["V_peak"], params["V_reset"], params["a"], params["b"],
        params["tau_w"] * 1e3, refr_steps,
        gain, SIGNS, syn_decay, ev_step, ev_src, in_counts, rec_counts,
        noise, np.uint32(noise_seed % (2 ** 32)), trace_neuron, *resting_state(params))
    if status != 0:
        bad = np.flatnonzero(~np.isfinite(v_final))
        raise SubstrateError(f"non-finite neuron state during simulation (dt={dt}, "
                             f"neurons {bad.tolist()[:10]})")
    times = spk_k * dt
    spikes = [np.sort(times[spk_n == j]) for j in range(N)]
    return SimResult(spikes, n_steps * dt, dt, v_trace if trace_neuron >= 0 else None)


class Chip:
    """Stateful handle mirroring the device workflow: configure, apply, stream.

    Biases (core configs) and their mismatch realization are fixed at
    construction; only synapses change afterwards.
    """

    def __init__(self, cores: Sequence[CoreConfig], dt: float = 1e-4):
        self.cores = list(cores)
        ids = [c.core_id for c in self.cores]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate core ids")
        self.dt = dt
        self.realizations = [apply_mismatch(c) for c in self.cores]
        self.network: Network | None = None

    def core(self, core_id: int) -> CoreConfig:
        return next(c for c in self.cores if c.core_id == core_id)

    def with_noise(self, sigma: float) -> "Chip":
        """Same chip and mismatch, different membrane noise level."""
        chip = Chip.__new__(Chip)
        chip.cores = [replace(c, noise_current_sigma=sigma) for c in self.cores]
        chip.dt = self.dt
        chip.realizations = [replace(r, noise_sigma=sigma) for r in self.realizations]
        chip.network = self.network
        return chip

    def apply(self, network: Network) -> None:
        if [c.core_id for c in network.cores] != [c.core_id for c in self.cores]:
            raise ValueError("network cores do not match chip cores")
        self.network = network

    def run(self, events: EventStream, duration: float, noise_seed: int = 0,
            trace_neuron: int = -1) -> SimResult:
        if self.network is None:
            raise SubstrateError("no connectivity applied")
        net = self.network
        return simulate(self.cores, net.input_synapses, events, duration, self.dt, noise_seed,
                        recurrent=net.recurrent_synapses, n_inputs=net.n_inputs,
                        realizations=self.realizations, trace_neuron=trace_neuron)
