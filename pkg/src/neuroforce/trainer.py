"""Computer-in-the-loop training of integer synapse counts.

Each epoch streams the MU spikes through the emulated chip with the current
integer connectivity, reads back population rates, takes one gradient step
on real-valued shadow weights using a rate-linearized surrogate, and draws
new integer counts from the shadow weights by stochastic rounding.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .signal import ForceTrace, MuSpikeTrain, exp_kernel_rate, n_samples, resample
from .substrate.core import (AMPA, DEFAULT_K, GABA_B, Chip, Connectivity, CoreConfig, EventStream, Network,
                             SynapseTable, compile_connectivity, merge_event_streams, simulate)
from .synth import EXTENSION_GRIDS, FLEXION_GRIDS

log = logging.getLogger(__name__)

RATE_TAU = 0.2
RATE_FS = 100.0
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


def stochastic_round(w_prime, k: int, rng: np.random.Generator):
    """Round up with probability equal to the fractional part, then clamp to [-k, k].

    Accepts a scalar or an array; returns the same kind (int / int64 array).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    w = np.asarray(w_prime, dtype=np.float64)
    lo = np.floor(w)
    up = (w - lo) > rng.random(w.shape)
    out = np.clip(lo + up, -k, k).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def population_mean_rate(rates: np.ndarray) -> np.ndarray:
    return rates.mean(axis=0)


def surrogate_forward(shadow_W: np.ndarray, input_rates: np.ndarray, alpha: float) -> np.ndarray:
    """Linearized population rate: (alpha / m_out) * sum_ij w_ij x_i(t)."""
    m_out = shadow_W.shape[1]
    return (alpha / m_out) * (shadow_W.sum(axis=1) @ input_rates)


def surrogate_loss_and_grad(recorded_rates: np.ndarray, input_rates: np.ndarray,
                            target: np.ndarray, shadow_W: np.ndarray,
                            alpha: float) -> tuple[float, np.ndarray]:
    """MSE of the recorded population rate and its surrogate gradient.

    recorded_rates: [m_out, T]; input_rates: [n_mu, T]; target: [T].
    The gradient entry for (i, j) is mean_t 2 e(t) (alpha / m_out) x_i(t)
    and is therefore the same for every output j.
    """
    recorded_rates = np.asarray(recorded_rates, dtype=np.float64)
    input_rates = np.asarray(input_rates, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n_mu, m_out = shadow_W.shape
    if recorded_rates.shape != (m_out, target.size) or input_rates.shape != (n_mu, target.size):
        raise ValueError(f"grid mismatch: recorded {recorded_rates.shape}, inputs "
                         f"{input_rates.shape}, target {target.shape}, W {shadow_W.shape}")
    err = population_mean_rate(recorded_rates) - target
    mse = float(np.mean(err ** 2))
    if not np.isfinite(mse):
        raise TrainingError("non-finite loss")
    g = 2.0 * (alpha / m_out) * (input_rates @ err) / target.size
    return mse, np.repeat(g[:, None], m_out, axis=1)


@dataclass
class PopulationSpec:
    name: str
    core_id: int
    m_out: int = 20
    input_grids: tuple[int, ...] = ()

    def __post_init__(self):
        if self.name not in ("flexion", "extension"):
            raise ValueError("population name must be 'flexion' or 'extension'")
        allowed = FLEXION_GRIDS if self.name == "flexion" else EXTENSION_GRIDS
        if not self.input_grids:
            self.input_grids = allowed
        self.input_grids = tuple(self.input_grids)
        if not set(self.input_grids) <= set(allowed):
            raise ValueError(f"{self.name} inputs must come from grids {allowed}")
        if self.m_out < 1:
            raise ValueError("m_out must be >= 1")

    def select(self, trains: Sequence[MuSpikeTrain]) -> list[MuSpikeTrain]:
        return sorted((t for t in trains if t.grid in self.input_grids), key=lambda t: t.mu_id)


@dataclass
class TrainerState:
    shadow_W: np.ndarray
    W: np.ndarray
    learning_rate: float
    k: int
    rng_seed: int
    alpha: float
    epoch: int = 0
    loss_history: list[tuple[int, float]] = field(default_factory=list)
    fan_in_limit: int = 64

    def copy(self) -> "TrainerState":
        return copy.deepcopy(self)

    def connectivity(self) -> Connectivity:
        return Connectivity(self.W, self.k, self.fan_in_limit)


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def noise_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def enforce_fan_in(W: np.ndarray, limit: int) -> np.ndarray:
    """Shrink the largest-magnitude entries of over-full columns toward zero."""
    W = W.copy()
    for j in range(W.shape[1]):
        while np.abs(W[:, j]).sum() > limit:
            i = int(np.argmax(np.abs(W[:, j])))
            W[i, j] -= np.sign(W[i, j])
    return W


def init_state(n_mu: int, m_out: int, seed: int, learning_rate: float = 0.5, k: int = DEFAULT_K,
               alpha: float = 1.0 / 30.0, fan_in_limit: int = 64) -> TrainerState:
    """Weakly excitatory start: shadow ~ U(0, 1), first integer draw from it."""
    shadow = _rng(seed, 0xA11).uniform(0.0, 1.0, (n_mu, m_out))
    W = enforce_fan_in(stochastic_round(shadow, k, _rng(seed, 0xA12)), fan_in_limit)
    return TrainerState(shadow, W, learning_rate, k, seed, alpha, fan_in_limit=fan_in_limit)


@dataclass
class PopulationData:
    """Inputs and target of one population, pre-sampled on the rate grid."""

    events: EventStream
    input_rates: np.ndarray  # [n_mu, T]
    target: np.ndarray       # [T]
    duration: float
    mu_ids: list[int]

    @property
    def n_mu(self) -> int:
        return len(self.mu_ids)


def prepare_population(population: PopulationSpec, trains: Sequence[MuSpikeTrain],
                       target: ForceTrace, duration: float) -> PopulationData:
    sel = population.select(trains)
    if not sel:
        raise TrainingError(f"{population.name} population has no input MUs")
    T = n_samples(RATE_FS, duration)
    grid = np.arange(T) / RATE_FS
    x = np.stack([exp_kernel_rate(t.spike_times, RATE_TAU, RATE_FS, duration).values for t in sel])
    return PopulationData(merge_event_streams(sel), x, resample(target, grid), duration,
                          [t.mu_id for t in sel])


def feedforward_network(core: CoreConfig, W: Connectivity) -> Network:
    return Network([core], W.shape[0], compile_connectivity(W, AMPA, GABA_B), SynapseTable.empty())


def record_rates(spikes: Sequence[np.ndarray], duration: float) -> np.ndarray:
    return np.stack([exp_kernel_rate(s, RATE_TAU, RATE_FS, duration).values for s in spikes])


def train_epoch(state: TrainerState, population: PopulationSpec, data: PopulationData,
                chip: Chip) -> TrainerState:
    """Run one epoch; returns a new state and leaves ``state`` untouched.

    The chip must already hold ``state.W`` (``Chip.apply``); on return it
    holds the new integer matrix. If anything fails the chip keeps the old
    connectivity and the exception propagates.
    """
    nseed = noise_seed(state.rng_seed, state.epoch, 2)
    result = chip.run(data.events, data.duration, nseed)
    rates = record_rates(result.spikes, data.duration)
    mse, grad = surrogate_loss_and_grad(rates, data.input_rates, data.target, state.shadow_W,
                                        state.alpha)
    new = state.copy()
    new.shadow_W = np.clip(state.shadow_W - state.learning_rate * grad, -state.k, state.k)
    W = stochastic_round(new.shadow_W, state.k, _rng(state.rng_seed, state.epoch, 1))
    new.W = enforce_fan_in(W, state.fan_in_limit)
    new.loss_history.append((state.epoch, mse))
    new.epoch = state.epoch + 1
    chip.apply(feedforward_network(chip.core(population.core_id), new.connectivity()))
    log.debug("%s epoch %d mse %.3f", population.name, state.epoch, mse)
    return new


def calibrate_alpha(core: CoreConfig, dt: float = 1e-4, base: int = 30, delta: int = 10,
                    rate: float = 30.0, duration: float = 6.0, settle: float = 1.0) -> float:
    """Measure output-rate gain per synapse per input Hz on a nominal neuron.

    Drives one mismatch-free, noise-free neuron with ``base`` and
    ``base + delta`` regular inputs at ``rate`` Hz and returns the slope.
    """
    probe = CoreConfig(core.core_id, 1, core.neuron, core.synapse, 0.0, 0.0, core.seed)
    out = []
    for n in (base, base + delta):
        phases = (np.arange(n) + 0.5) / (n * rate)
        trains = [np.arange(p, duration, 1.0 / rate) for p in phases]
        table = SynapseTable(np.arange(n), np.zeros(n, dtype=np.int64),
                             np.full(n, AMPA, dtype=np.int64), np.ones(n, dtype=np.int64))
        res = simulate([probe], table, merge_event_streams(trains), duration, dt, n_inputs=n)
        s = res.spikes[0]
        out.append(np.count_nonzero(s >= settle) / (duration - settle))
    alpha = (out[1] - out[0]) / (delta * rate)
    if alpha <= 0:
        raise TrainingError(f"calibration probe found no rate gain ({out})")
    return float(alpha)


@dataclass
class TrainedPopulation:
    spec: PopulationSpec
    state: TrainerState
    mu_ids: list[int]
    history: list[TrainerState] = field(default_factory=list)

    @property
    def W(self) -> np.ndarray:
        return self.state.W

    @property
    def losses(self) -> list[float]:
        return [m for _, m in self.state.loss_history]


def train_population(population: PopulationSpec, trains: Sequence[MuSpikeTrain],
                     target: ForceTrace, duration: float, core: CoreConfig, epochs: int = 30,
                     seed: int = 0, learning_rate: float = 0.5, k: int = DEFAULT_K,
                     alpha: float | None = None, fan_in_limit: int = 64, dt: float = 1e-4,
                     checkpoint_dir: str | Path | None = None,
                     keep_history: bool = False) -> TrainedPopulation:
    if core.n_neurons != population.m_out:
        raise ValueError("core size must equal population m_out")
    data = prepare_population(population, trains, target, duration)
    if alpha is None:
        alpha = calibrate_alpha(core, dt)
    state = init_state(data.n_mu, population.m_out, seed, learning_rate, k, alpha, fan_in_limit)
    chip = Chip([core], dt)
    chip.apply(feedforward_network(core, state.connectivity()))
    history = [state] if keep_history else []
    for _ in range(epochs):
        state = train_epoch(state, population, data, chip)
        if keep_history:
            history.append(state)
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / f"{population.name}_epoch{state.epoch:03d}.npz",
                            state)
    return TrainedPopulation(population, state, data.mu_ids, history)


@dataclass
class TrainedDecoder:
    flexion: TrainedPopulation
    extension: TrainedPopulation

    @property
    def W_flex(self) -> np.ndarray:
        return self.flexion.W

    @property
    def W_ext(self) -> np.ndarray:
        return self.extension.W


def train_decoder(trains: Sequence[MuSpikeTrain], force: ForceTrace, duration: float,
                  flexion: PopulationSpec, extension: PopulationSpec,
                  cores: dict[int, CoreConfig], epochs: int = 30, seed: int = 0,
                  **kwargs) -> TrainedDecoder:
    """Train both populations independently against their rectified targets."""
    from .signal import rectified_targets

    flex_target, ext_target = rectified_targets(force)
    out = []
    for idx, (pop, target) in enumerate(((flexion, flex_target), (extension, ext_target))):
        out.append(train_population(pop, trains, target, duration, cores[pop.core_id], epochs,
                                    seed=noise_seed(seed, idx), **kwargs))
    return TrainedDecoder(*out)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path: str | Path, state: TrainerState) -> None:
    """Versioned ``.npz`` bundle; resuming from it replays bit-exactly."""
    hist = np.array(state.loss_history, dtype=np.float64).reshape(-1, 2)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, version=CHECKPOINT_VERSION, shadow_W=state.shadow_W, W=state.W,
                 learning_rate=state.learning_rate, k=state.k, rng_seed=np.uint64(state.rng_seed),
                 alpha=state.alpha, epoch=state.epoch, loss_history=hist,
                 fan_in_limit=state.fan_in_limit)


def load_checkpoint(path: str | Path) -> TrainerState:
    with np.load(path) as z:
        if int(z["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(z['version'])}")
        hist = [(int(e), float(m)) for e, m in z["loss_history"]]
        return TrainerState(z["shadow_W"].copy(), z["W"].astype(np.int64), float(z["learning_rate"]),
                            int(z["k"]), int(z["rng_seed"]), float(z["alpha"]), int(z["epoch"]),
                            hist, int(z["fan_in_limit"]))
