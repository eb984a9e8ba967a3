"""Spike-train and force-signal types plus the shared numerics.

Everything here is pure: rate estimation with a causal exponential kernel,
windowed spike counting, rectification of a signed force into per-direction
targets, and the RMSE metric used for every decoder comparison.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import lfilter

MIN_RATE_HZ = 2.0
MAX_RATE_HZ = 50.0
MAX_FORCE_PCT = 100.0

# tolerance for floor/ceil of ratios such as (25 - 0.1) / 0.05
_EPS = 1e-9


class Finger(str, Enum):
    THUMB = "thumb"
    INDEX = "index"
    MIDDLE = "middle"
    RING = "ring"
    LITTLE = "little"


FINGERS = tuple(f.value for f in Finger)


@dataclass
class MuSpikeTrain:
    """Discharge times of one motor unit in one trial."""

    mu_id: int
    grid: int
    finger: str
    trial: int
    spike_times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.spike_times = np.asarray(self.spike_times, dtype=np.float64)
        if self.grid not in (1, 2, 3, 4):
            raise ValueError(f"grid must be in 1..4, got {self.grid}")
        self.finger = Finger(self.finger).value
        if self.trial < 1:
            raise ValueError(f"trial must be >= 1, got {self.trial}")

    @property
    def n_spikes(self) -> int:
        return int(self.spike_times.size)

    def mean_rate(self, duration: float) -> float:
        return self.n_spikes / duration


@dataclass
class ForceTrace:
    """Uniformly sampled signed force in %MVC (flexion > 0, extension < 0).

    ``t0`` is the time of the first sample; decoders that emit one value per
    window use it to timestamp window centers.
    """

    sample_rate: float
    samples: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.samples.size) / self.sample_rate

    def __len__(self) -> int:
        return int(self.samples.size)


@dataclass
class RateTrace:
    sample_rate: float
    values: np.ndarray
    tau: float

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.values.size) / self.sample_rate


@dataclass
class WindowedCounts:
    window_len: float
    hop: float
    counts: np.ndarray  # [n_windows, n_mu], int64

    @property
    def n_windows(self) -> int:
        return int(self.counts.shape[0])

    @property
    def n_mu(self) -> int:
        return int(self.counts.shape[1])

    @property
    def starts(self) -> np.ndarray:
        return np.arange(self.n_windows) * self.hop

    @property
    def centers(self) -> np.ndarray:
        return self.starts + self.window_len / 2


@dataclass(frozen=True)
class ValidationResult:
    accepted: bool
    reason: str
    mean_rate: float


def n_samples(sample_rate: float, duration: float) -> int:
    return int(round(sample_rate * duration))


def validate_train(train: MuSpikeTrain, duration: float) -> ValidationResult:
    """Check a train against the trial bounds and the 2-50 Hz physiological range.

    Reason codes: ``ok``, ``out_of_range``, ``non_monotonic``,
    ``rate_too_low``, ``rate_too_high``.
    """
    t = train.spike_times
    rate = t.size / duration
    if t.size and (t[0] < 0.0 or t[-1] > duration or np.any(t < 0.0) or np.any(t > duration)):
        return ValidationResult(False, "out_of_range", rate)
    if t.size > 1 and np.any(np.diff(t) <= 0.0):
        return ValidationResult(False, "non_monotonic", rate)
    if rate < MIN_RATE_HZ:
        return ValidationResult(False, "rate_too_low", rate)
    if rate > MAX_RATE_HZ:
        return ValidationResult(False, "rate_too_high", rate)
    return ValidationResult(True, "ok", rate)


def exp_kernel_rate(spike_times: Sequence[float] | np.ndarray, tau: float,
                    sample_rate: float, duration: float) -> RateTrace:
    """Causal exponential-kernel rate estimate sampled at ``k / sample_rate``.

    r(t) = sum over spikes t_s <= t of exp(-(t - t_s) / tau) / tau.

    Each spike is folded into the first sample at or after it with its exact
    partial decay; the remaining decay is a first-order recursion over
    samples, so cost is O(spikes + samples).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if sample_rate <= 0:
        raise ValueError("sample_rate must be positive")
    n = n_samples(sample_rate, duration)
    grid = np.arange(n) / sample_rate
    values = np.zeros(n)
    s = np.asarray(spike_times, dtype=np.float64)
    if n == 0 or s.size == 0:
        return RateTrace(sample_rate, values, tau)
    s = s[s <= grid[-1]]
    idx = np.searchsorted(grid, s, side="left")
    impulses = np.bincount(idx, weights=np.exp(-(grid[idx] - s) / tau), minlength=n)
    decay = math.exp(-1.0 / (sample_rate * tau))
    values = lfilter([1.0], [1.0, -decay], impulses) / tau
    np.maximum(values, 0.0, out=values)
    return RateTrace(sample_rate, values, tau)


def n_windows(duration: float, window_len: float, hop: float) -> int:
    return int(math.floor((duration - window_len) / hop + _EPS)) + 1


def window_counts(trains: Sequence[MuSpikeTrain] | Sequence[np.ndarray], window_len: float,
                  hop: float, duration: float) -> WindowedCounts:
    """Spike counts per MU in windows ``[w*hop, w*hop + window_len)``."""
    if hop <= 0:
        raise ValueError("hop must be positive")
    if window_len <= 0 or window_len > duration:
        raise ValueError("window_len must be in (0, duration]")
    if hop > window_len:
        raise ValueError("hop must not exceed window_len")
    nw = n_windows(duration, window_len, hop)
    starts = np.arange(nw) * hop
    ends = starts + window_len
    counts = np.zeros((nw, len(trains)), dtype=np.int64)
    for i, train in enumerate(trains):
        t = train.spike_times if isinstance(train, MuSpikeTrain) else np.asarray(train, float)
        counts[:, i] = np.searchsorted(t, ends, side="left") - np.searchsorted(t, starts, side="left")
    return WindowedCounts(window_len, hop, counts)


def resample(trace: ForceTrace, times: np.ndarray) -> np.ndarray:
    """Linear interpolation of ``trace`` onto arbitrary sample instants."""
    return np.interp(times, trace.times, trace.samples)


def resample_to(trace: ForceTrace, like: ForceTrace) -> ForceTrace:
    return ForceTrace(like.sample_rate, resample(trace, like.times), like.t0)


def rmse(pred: ForceTrace, truth: ForceTrace) -> float:
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: pred {len(pred)} vs truth {len(truth)}")
    if not math.isclose(pred.sample_rate, truth.sample_rate):
        raise ValueError("sample_rate mismatch")
    return float(np.sqrt(np.mean((pred.samples - truth.samples) ** 2)))


def rectified_targets(force: ForceTrace) -> tuple[ForceTrace, ForceTrace]:
    flex = np.maximum(force.samples, 0.0)
    ext = np.maximum(-force.samples, 0.0)
    return (ForceTrace(force.sample_rate, flex, force.t0),
            ForceTrace(force.sample_rate, ext, force.t0))


# -- CSV formats --------------------------------------------------------------

SPIKE_HEADER = ("mu_id", "grid", "finger", "trial", "time_s")
FORCE_HEADER = ("time_s", "force_pct_mvc")


def write_spike_csv(path: str | Path, trains: Iterable[MuSpikeTrain]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SPIKE_HEADER)
        for tr in trains:
            for t in tr.spike_times:
                w.writerow((tr.mu_id, tr.grid, tr.finger, tr.trial, f"{t:.9f}"))


def read_spike_csv(path: str | Path, duration: float | None = None) -> list[MuSpikeTrain]:
    """Read the long-format spike CSV. Times are sorted per (finger, trial, MU).

    Motor units that appear in some trials but are silent in others are
    materialized as empty trains for the trials where they are missing, so
    every trial of a finger exposes the same MU set.
    """
    rows: dict[tuple[str, int, int], list[float]] = {}
    grids: dict[tuple[str, int], int] = {}
    trials: dict[str, set[int]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SPIKE_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            finger = Finger(row["finger"].strip().lower()).value
            mu, trial, grid = int(row["mu_id"]), int(row["trial"]), int(row["grid"])
            prev = grids.setdefault((finger, mu), grid)
            if prev != grid:
                raise ValueError(f"{path}: MU {mu} of {finger} listed on grids {prev} and {grid}")
            trials.setdefault(finger, set()).add(trial)
            rows.setdefault((finger, trial, mu), []).append(float(row["time_s"]))
    out = []
    for (finger, mu), grid in sorted(grids.items()):
        for trial in sorted(trials[finger]):
            times = np.sort(np.asarray(rows.get((finger, trial, mu), []), dtype=np.float64))
            out.append(MuSpikeTrain(mu, grid, finger, trial, times))
    out.sort(key=lambda tr: (FINGERS.index(tr.finger), tr.trial, tr.mu_id))
    return out


def write_force_csv(path: str | Path, force: ForceTrace) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FORCE_HEADER)
        for t, v in zip(force.times, force.samples):
            w.writerow((f"{t:.9f}", f"{v:.9f}"))


def read_force_csv(path: str | Path) -> ForceTrace:
    """Read ``time_s,force_pct_mvc``; samples must be uniform and within +-100 %MVC."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, encoding="utf-8")
    if data.shape[0] < 2:
        raise ValueError(f"{path}: need at least two samples")
    t, f = data[:, 0], data[:, 1]
    dt = np.diff(t)
    if np.any(dt <= 0) or np.ptp(dt) > 1e-6 * max(1.0, dt.mean()) + 1e-9:
        raise ValueError(f"{path}: force samples are not uniformly spaced")
    if np.any(np.abs(f) > MAX_FORCE_PCT):
        raise ValueError(f"{path}: |force| exceeds {MAX_FORCE_PCT} %MVC")
    return ForceTrace(round(1.0 / dt.mean(), 6), f, float(t[0]))
