"""Synthetic finger-force trials: triangular force profiles and MU spike trains.

Motor units follow a size-principle rate code: silent below a recruitment
threshold, then a linear rise from ``min_rate`` at threshold to
``peak_rate`` at the profile peak. Spike times come from a renewal process
run in operational time (the integral of the rate), so a constant rate with
zero jitter gives a perfectly regular train.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .signal import FINGERS, MAX_RATE_HZ, ForceTrace, MuSpikeTrain, n_samples

FLEXION_GRIDS = (1, 2)
EXTENSION_GRIDS = (3, 4)

# expected mean rate a profile must reach before it is accepted; sits above
# the 2 Hz validation floor so renewal noise cannot push a train below it
_MIN_EXPECTED_RATE = 2.5


@dataclass
class TrialSpec:
    duration: float = 25.0
    peak: float = 30.0
    sample_rate: float = 100.0
    n_ramps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not 0 <= self.peak <= 100:
            raise ValueError("peak must be in [0, 100]")
        if self.n_ramps < 1:
            raise ValueError("n_ramps must be >= 1")


@dataclass
class MuProfile:
    mu_id: int
    grid: int
    recruitment_threshold: float
    min_rate: float = 8.0
    peak_rate: float = 35.0
    direction_bias: float = 0.0
    jitter_cv: float = 0.15

    def __post_init__(self):
        if self.grid not in (1, 2, 3, 4):
            raise ValueError(f"grid must be in 1..4, got {self.grid}")
        if not 2.0 <= self.min_rate < self.peak_rate <= MAX_RATE_HZ:
            raise ValueError("need 2 <= min_rate < peak_rate <= 50")
        if self.recruitment_threshold < 0:
            raise ValueError("recruitment_threshold must be >= 0")
        if not 0.0 <= self.direction_bias <= 1.0:
            raise ValueError("direction_bias must be in [0, 1]")

    @property
    def is_flexion(self) -> bool:
        return self.grid in FLEXION_GRIDS


def triangular_force(t: np.ndarray | float, spec: TrialSpec) -> np.ndarray:
    """Evaluate the alternating flexion/extension triangle profile at ``t``.

    Each of the ``n_ramps`` cycles is a positive triangle followed by a
    negative one, each lasting half a cycle.
    """
    t = np.asarray(t, dtype=np.float64)
    cycle = spec.duration / spec.n_ramps
    half = cycle / 2
    phase = np.mod(t, cycle)
    in_ext = phase >= half
    local = np.where(in_ext, phase - half, phase)
    tri = spec.peak * (1.0 - np.abs(2.0 * local / half - 1.0))
    return np.where(in_ext, -tri, tri)


def triangular_profile(spec: TrialSpec) -> ForceTrace:
    n = n_samples(spec.sample_rate, spec.duration)
    t = np.arange(n) / spec.sample_rate
    return ForceTrace(spec.sample_rate, triangular_force(t, spec))


def synth_mu_population(n_flexion: int, n_extension: int, seed: int,
                        max_threshold: float = 25.0) -> list[MuProfile]:
    """Draw MU profiles: flexion units on grids 1-2, extension units on grids 3-4.

    Flexion units respond weakly to extension (bias around 0.2); extension
    units are nearly direction-selective (bias around 0.05).
    """
    if n_flexion < 0 or n_extension < 0:
        raise ValueError("counts must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    profiles = []
    for i in range(n_flexion + n_extension):
        flex = i < n_flexion
        grids = FLEXION_GRIDS if flex else EXTENSION_GRIDS
        grid = int(grids[rng.integers(2)])
        bias = rng.uniform(0.15, 0.25) if flex else rng.uniform(0.0, 0.1)
        threshold = rng.uniform(0.0, max_threshold)
        profiles.append(MuProfile(mu_id=i, grid=grid, recruitment_threshold=float(threshold),
                                  direction_bias=float(bias)))
    return profiles


def directional_drive(profile: MuProfile, force: np.ndarray) -> np.ndarray:
    own = np.maximum(force, 0.0) if profile.is_flexion else np.maximum(-force, 0.0)
    other = np.maximum(-force, 0.0) if profile.is_flexion else np.maximum(force, 0.0)
    return own + profile.direction_bias * other


def rate_from_drive(profile: MuProfile, drive: np.ndarray, peak: float = 30.0) -> np.ndarray:
    th = profile.recruitment_threshold
    span = max(peak - th, 1e-12)
    lam = profile.min_rate + (profile.peak_rate - profile.min_rate) * (drive - th) / span
    lam = np.minimum(lam, MAX_RATE_HZ)
    return np.where(drive > th, lam, 0.0)


def expected_mean_rate(profile: MuProfile, force: ForceTrace, peak: float = 30.0) -> float:
    return float(np.mean(rate_from_drive(profile, directional_drive(profile, force.samples), peak)))


def _interval_rates(profile: MuProfile, force: ForceTrace, peak: float) -> np.ndarray:
    # an interval between samples fires only if both endpoints are above threshold,
    # so spikes never land where the (linearly interpolated) drive is sub-threshold
    lam = rate_from_drive(profile, directional_drive(profile, force.samples), peak)
    both = (lam[:-1] > 0) & (lam[1:] > 0)
    return np.where(both, 0.5 * (lam[:-1] + lam[1:]), 0.0)


def _renewal_times(rates: np.ndarray, dt: float, jitter_cv: float,
                   rng: np.random.Generator) -> np.ndarray:
    cum = np.concatenate(([0.0], np.cumsum(rates * dt)))
    total = cum[-1]
    if total <= 0:
        return np.zeros(0)
    if jitter_cv > 0:
        s2 = np.log1p(jitter_cv ** 2)
        draw = lambda n: rng.lognormal(-s2 / 2, np.sqrt(s2), n)  # noqa: E731
    else:
        draw = lambda n: np.ones(n)  # noqa: E731
    # random initial phase decorrelates units that share a rate profile
    phase = rng.uniform(0.0, 1.0)
    n_guess = int(total * 1.5) + 16
    marks = np.cumsum(draw(n_guess))
    marks = marks - marks[0] * (1.0 - phase)
    while marks[-1] < total:
        marks = np.concatenate((marks, marks[-1] + np.cumsum(draw(n_guess))))
    marks = marks[(marks > 0) & (marks <= total)]
    k = np.searchsorted(cum, marks, side="left") - 1
    k = np.clip(k, 0, rates.size - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        times = k * dt + (marks - cum[k]) / rates[k]
    times = times[np.isfinite(times)]
    return np.unique(times)


def synth_spike_trains(profiles: list[MuProfile], force: ForceTrace, seed: int,
                       finger: str = "index", trial: int = 1,
                       peak: float = 30.0) -> list[MuSpikeTrain]:
    if force.sample_rate < 50:
        raise ValueError("force must be sampled at >= 50 Hz")
    dt = 1.0 / force.sample_rate
    out = []
    for p in profiles:
        rng = np.random.default_rng(np.random.SeedSequence([seed, p.mu_id]))
        times = _renewal_times(_interval_rates(p, force, peak), dt, p.jitter_cv, rng)
        times = times[(times >= 0.0) & (times <= force.duration)] + force.t0
        out.append(MuSpikeTrain(p.mu_id, p.grid, finger, trial, times))
    return out


@dataclass
class FingerTask:
    """All trials of one finger: shared MU profiles, per-trial force and spikes."""

    finger: str
    duration: float
    profiles: list[MuProfile] = field(default_factory=list)
    forces: dict[int, ForceTrace] = field(default_factory=dict)
    trains: dict[int, list[MuSpikeTrain]] = field(default_factory=dict)

    @property
    def trials(self) -> list[int]:
        return sorted(self.forces)


def synth_finger_task(finger: str = "index", n_flexion: int = 20, n_extension: int = 6,
                      spec: TrialSpec | None = None, n_trials: int = 3,
                      jitter_cv: float | None = None) -> FingerTask:
    """Generate ``n_trials`` trials that share MU profiles and differ in spike noise.

    Profiles whose expected mean rate over the trial would fall below the
    physiological floor get their recruitment threshold redrawn lower.
    """
    spec = spec or TrialSpec()
    fidx = FINGERS.index(finger)
    profiles = synth_mu_population(n_flexion, n_extension, seed=spec.seed * 8 + fidx)
    force = triangular_profile(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, fidx, 0xFACE]))
    for p in profiles:
        if jitter_cv is not None:
            p.jitter_cv = jitter_cv
        while expected_mean_rate(p, force, spec.peak) < _MIN_EXPECTED_RATE:
            p.recruitment_threshold = float(rng.uniform(0.0, p.recruitment_threshold))
    task = FingerTask(finger, spec.duration, profiles)
    for trial in range(1, n_trials + 1):
        seed = int(np.random.SeedSequence([spec.seed, fidx, trial]).generate_state(1)[0])
        task.forces[trial] = force
        task.trains[trial] = synth_spike_trains(profiles, force, seed, finger, trial, spec.peak)
    return task
