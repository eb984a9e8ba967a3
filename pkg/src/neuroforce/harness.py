"""Experiment orchestration: data loading, inference topology, evaluation protocol."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import baseline
from .kvconfig import ConfigError, load_kv, subtree
from .signal import (FINGERS, ForceTrace, MuSpikeTrain, read_force_csv, read_spike_csv, resample,
                     rmse, validate_train, window_counts, write_force_csv, write_spike_csv)
from .substrate.core import (AMPA, DEFAULT_K, GABA_B, Chip, Connectivity, CoreConfig, Network, SimResult,
                             compile_connectivity, merge_event_streams)
from .substrate.io import cores_from_kv, load_substrate_config
from .synth import TrialSpec, synth_finger_task
from .trainer import (RATE_FS, PopulationSpec, TrainedDecoder, TrainedPopulation, TrainerState,
                      calibrate_alpha, noise_seed, record_rates, train_decoder)

log = logging.getLogger(__name__)

DEFAULT_NOISE_SIGMA = 0.2


class ValidationError(ValueError):
    """Input data failed validation (CLI exit code 1)."""


def default_cores(seed: int = 1, noise: float = DEFAULT_NOISE_SIGMA, m_out: int = 20,
                  mismatch: float = 0.1) -> dict[int, CoreConfig]:
    return {cid: CoreConfig(cid, m_out, mismatch_sigma=mismatch, noise_current_sigma=noise,
                            seed=seed) for cid in (0, 1)}


@dataclass
class ExperimentConfig:
    fingers: tuple[str, ...] = ("index",)
    train_trial: int = 1
    test_trials: tuple[int, ...] = (2, 3)
    flexion: PopulationSpec = field(default_factory=lambda: PopulationSpec("flexion", 0))
    extension: PopulationSpec = field(default_factory=lambda: PopulationSpec("extension", 1))
    cores: dict[int, CoreConfig] = field(default_factory=default_cores)
    dt: float = 1e-4
    epochs: int = 30
    learning_rate: float = 0.5
    k: int = DEFAULT_K
    alpha: float | None = None
    fan_in_limit: int = 64
    seed: int = 0
    n_repetitions: int = 5
    inhibition_count: int = 1
    window_len: float = 0.1
    hop: float = 0.05
    data_dir: str | None = None
    drop_invalid: bool = False
    n_flexion: int = 20
    n_extension: int = 6
    trial: TrialSpec = field(default_factory=TrialSpec)
    jitter_cv: float | None = None
    output_dir: str | None = None

    def __post_init__(self):
        self.fingers = tuple(self.fingers)
        self.test_trials = tuple(self.test_trials)
        if self.train_trial in self.test_trials:
            raise ConfigError("train trial must not be a test trial")
        if self.n_repetitions < 1:
            raise ConfigError("n_repetitions must be >= 1")
        if self.inhibition_count < 0:
            raise ConfigError("inhibition_count must be >= 0")
        for f in self.fingers:
            if f not in FINGERS:
                raise ConfigError(f"unknown finger {f!r}")
        for pop in (self.flexion, self.extension):
            core = self.cores.get(pop.core_id)
            if core is None:
                raise ConfigError(f"no core {pop.core_id} configured for {pop.name}")
            if core.n_neurons != pop.m_out:
                self.cores[pop.core_id] = replace(core, n_neurons=pop.m_out)
        if self.flexion.core_id == self.extension.core_id:
            raise ConfigError("populations must sit on distinct cores")


def _tuple(value: Any, cast=str) -> tuple:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return (cast(value),)
    return tuple(cast(v.strip()) for v in str(value).split(",") if v.strip())


def config_from_kv(values: Mapping[str, Any], base_dir: str | Path = ".") -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from a flat key-value mapping.

    Substrate cores come from ``substrate = <path>`` or inline ``core.N.*``
    keys; without either the two default cores are used.
    """
    v = dict(values)
    base_dir = Path(base_dir)
    kw: dict[str, Any] = {}
    if "fingers" in v:
        kw["fingers"] = _tuple(v.pop("fingers"))
    if "train_trial" in v:
        kw["train_trial"] = int(v.pop("train_trial"))
    if "test_trials" in v:
        kw["test_trials"] = _tuple(v.pop("test_trials"), int)
    for key in ("n_repetitions", "inhibition_count", "seed"):
        if key in v:
            kw[key] = int(v.pop(key))
    if "output_dir" in v:
        kw["output_dir"] = str(v.pop("output_dir"))
    if "data.dir" in v:
        kw["data_dir"] = str(base_dir / str(v.pop("data.dir")))
    if "data.drop_invalid" in v:
        kw["drop_invalid"] = bool(v.pop("data.drop_invalid"))

    tr = subtree(v, "trainer")
    for key in tr:
        v.pop(f"trainer.{key}")
    for key, cast in (("epochs", int), ("learning_rate", float), ("k", int),
                      ("fan_in_limit", int)):
        if key in tr:
            kw[key] = cast(tr.pop(key))
    if "alpha" in tr:
        a = tr.pop("alpha")
        kw["alpha"] = None if str(a).lower() == "auto" else float(a)
    if tr:
        raise ConfigError(f"unknown trainer keys {sorted(tr)}")

    bl = subtree(v, "baseline")
    for key in bl:
        v.pop(f"baseline.{key}")
    for key in ("window_len", "hop"):
        if key in bl:
            kw[key] = float(bl.pop(key))
    if bl:
        raise ConfigError(f"unknown baseline keys {sorted(bl)}")

    sy = subtree(v, "synth")
    for key in sy:
        v.pop(f"synth.{key}")
    if "n_flexion" in sy:
        kw["n_flexion"] = int(sy.pop("n_flexion"))
    if "n_extension" in sy:
        kw["n_extension"] = int(sy.pop("n_extension"))
    if "jitter_cv" in sy:
        kw["jitter_cv"] = float(sy.pop("jitter_cv"))
    spec_kw = {}
    for key, cast in (("duration", float), ("peak", float), ("sample_rate", float),
                      ("n_ramps", int)):
        if key in sy:
            spec_kw[key] = cast(sy.pop(key))
    if sy:
        raise ConfigError(f"unknown synth keys {sorted(sy)}")
    spec_kw["seed"] = kw.get("seed", 0)
    kw["trial"] = TrialSpec(**spec_kw)

    pops = {}
    for name, default_core in (("flexion", 0), ("extension", 1)):
        p = subtree(v, f"population.{name}")
        for key in p:
            v.pop(f"population.{name}.{key}")
        pops[name] = PopulationSpec(name, int(p.pop("core", default_core)),
                                    int(p.pop("m_out", 20)),
                                    _tuple(p.pop("grids", ""), int))
        if p:
            raise ConfigError(f"unknown population.{name} keys {sorted(p)}")
    kw["flexion"], kw["extension"] = pops["flexion"], pops["extension"]

    noise = v.pop("noise_sigma", None)
    mismatch = v.pop("mismatch_sigma", None)
    core_keys = {k: v.pop(k) for k in list(v) if k.startswith("core.") or k == "dt"}
    if "substrate" in v:
        cores, dt = load_substrate_config(base_dir / str(v.pop("substrate")))
        kw["cores"], kw["dt"] = {c.core_id: c for c in cores}, dt
    elif core_keys:
        cores, dt = cores_from_kv(core_keys)
        kw["cores"], kw["dt"] = {c.core_id: c for c in cores}, dt
    if v:
        raise ConfigError(f"unknown config keys {sorted(v)}")
    if noise is not None or mismatch is not None:
        cores = kw.get("cores") or default_cores()
        kw["cores"] = {cid: replace(c,
                                    noise_current_sigma=c.noise_current_sigma if noise is None
                                    else float(noise),
                                    mismatch_sigma=c.mismatch_sigma if mismatch is None
                                    else float(mismatch))
                       for cid, c in cores.items()}
    return ExperimentConfig(**kw)


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return config_from_kv(load_kv(path), path.parent)


# -- data ---------------------------------------------------------------------

@dataclass
class FingerData:
    finger: str
    duration: float
    forces: dict[int, ForceTrace]
    trains: dict[int, list[MuSpikeTrain]]


def synthetic_dataset(cfg: ExperimentConfig) -> dict[str, FingerData]:
    trials = sorted({cfg.train_trial, *cfg.test_trials})
    out = {}
    for finger in cfg.fingers:
        task = synth_finger_task(finger, cfg.n_flexion, cfg.n_extension, cfg.trial,
                                 n_trials=max(trials), jitter_cv=cfg.jitter_cv)
        out[finger] = FingerData(finger, task.duration, task.forces, task.trains)
    return out


def force_path(data_dir: str | Path, finger: str, trial: int) -> Path:
    return Path(data_dir) / f"force_{finger}_trial{trial}.csv"


def write_dataset(data_dir: str | Path, data: Mapping[str, FingerData]) -> None:
    """``spikes.csv`` for all fingers plus ``force_<finger>_trial<k>.csv`` files."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    trains = [t for fd in data.values() for trial in sorted(fd.trains) for t in fd.trains[trial]]
    write_spike_csv(data_dir / "spikes.csv", trains)
    for fd in data.values():
        for trial, force in sorted(fd.forces.items()):
            write_force_csv(force_path(data_dir, fd.finger, trial), force)


def load_dataset(data_dir: str | Path, fingers: Sequence[str], trials: Sequence[int],
                 drop_invalid: bool = False) -> dict[str, FingerData]:
    """Ingest the CSV formats and apply the 2-50 Hz validation rule.

    An MU failing validation in any requested trial is either an error or,
    with ``drop_invalid``, removed from every trial of that finger.
    """
    data_dir = Path(data_dir)
    try:
        all_trains = read_spike_csv(data_dir / "spikes.csv")
    except (OSError, ValueError, KeyError) as exc:
        raise ValidationError(f"cannot read spike file: {exc}") from exc
    out = {}
    for finger in fingers:
        forces = {}
        for trial in trials:
            p = force_path(data_dir, finger, trial)
            if not p.exists():
                raise ValidationError(f"missing force file {p}")
            try:
                forces[trial] = read_force_csv(p)
            except ValueError as exc:
                raise ValidationError(str(exc)) from exc
        duration = forces[trials[0]].duration
        trains = {trial: [t for t in all_trains if t.finger == finger and t.trial == trial]
                  for trial in trials}
        bad = set()
        for trial, lst in trains.items():
            if not lst:
                raise ValidationError(f"no spike trains for {finger} trial {trial}")
            for t in lst:
                res = validate_train(t, forces[trial].duration)
                if not res.accepted:
                    if not drop_invalid:
                        raise ValidationError(f"{finger} trial {trial} MU {t.mu_id}: {res.reason} "
                                              f"(mean rate {res.mean_rate:.2f} Hz)")
                    log.warning("dropping %s MU %d: %s in trial %d", finger, t.mu_id, res.reason,
                                trial)
                    bad.add(t.mu_id)
        trains = {k: [t for t in lst if t.mu_id not in bad] for k, lst in trains.items()}
        out[finger] = FingerData(finger, duration, forces, trains)
    return out


# -- inference ----------------------------------------------------------------

def build_inference_topology(W_flex: np.ndarray, W_ext: np.ndarray, inhibition_count: int,
                             flex_core: CoreConfig, ext_core: CoreConfig, k: int = DEFAULT_K,
                             fan_in_limit: int = 64) -> Network:
    """Both trained feedforward layers plus extension->flexion inhibition.

    Inputs are numbered flexion MUs first, then extension MUs. Each of the
    two trained matrices and the inhibitory projection is checked against
    ``fan_in_limit`` on its own.
    """
    W_flex, W_ext = np.asarray(W_flex), np.asarray(W_ext)
    n_f, m_f = W_flex.shape
    n_e, m_e = W_ext.shape
    if m_f != flex_core.n_neurons or m_e != ext_core.n_neurons:
        raise ValueError("matrix widths must match core sizes")
    ff = compile_connectivity(Connectivity(W_flex, k, fan_in_limit), AMPA, GABA_B)
    ff = ff.concat(compile_connectivity(Connectivity(W_ext, k, fan_in_limit), AMPA, GABA_B)
                   .shifted(pre=n_f, post=m_f))
    inh = Connectivity(np.full((m_e, m_f), -inhibition_count), max(inhibition_count, 1),
                       fan_in_limit)
    rec = compile_connectivity(inh, AMPA, GABA_B).shifted(pre=m_f)
    return Network([flex_core, ext_core], n_f + n_e, ff, rec)


@dataclass
class InferenceRun:
    prediction: ForceTrace
    rate_flex: np.ndarray
    rate_ext: np.ndarray
    result: SimResult


def run_inference(chip: Chip, flex_trains: Sequence[MuSpikeTrain],
                  ext_trains: Sequence[MuSpikeTrain], duration: float,
                  noise_seed_value: int) -> InferenceRun:
    """Decoded force = mean flexion rate - mean extension rate, sampled at 100 Hz."""
    net = chip.network
    events = merge_event_streams(list(flex_trains) + list(ext_trains))
    res = chip.run(events, duration, noise_seed_value)
    m_f = net.cores[0].n_neurons
    rates = record_rates(res.spikes, duration)
    r_flex, r_ext = rates[:m_f].mean(axis=0), rates[m_f:].mean(axis=0)
    return InferenceRun(ForceTrace(RATE_FS, r_flex - r_ext), r_flex, r_ext, res)


def evaluation_truth(force: ForceTrace, pred: ForceTrace) -> ForceTrace:
    """Ground truth brought onto a prediction's sample grid (linear interpolation)."""
    return ForceTrace(pred.sample_rate, resample(force, pred.times), pred.t0)


# -- experiment ---------------------------------------------------------------

def _std(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


@dataclass
class ResultTable:
    """Per finger x decoder x test trial RMSE statistics plus two aggregations.

    ``pooled`` treats every (trial, run) value as one sample; ``run_averaged``
    first averages each run over the test trials and then takes mean and std
    across runs. Standard deviations are sample (ddof=1) when n > 1.
    """

    rows: list[dict[str, Any]] = field(default_factory=list)
    summary: list[dict[str, Any]] = field(default_factory=list)
    rates: list[dict[str, Any]] = field(default_factory=list)
    failures: list[dict[str, Any]] = field(default_factory=list)

    def lookup(self, finger: str, decoder: str, trial: int) -> dict[str, Any]:
        return next(r for r in self.rows
                    if r["finger"] == finger and r["decoder"] == decoder and r["trial"] == trial)

    def summary_for(self, finger: str, decoder: str) -> dict[str, Any]:
        return next(r for r in self.summary if r["finger"] == finger and r["decoder"] == decoder)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "results.json").write_text(self.to_json() + "\n", encoding="utf-8")
        with open(out_dir / "results.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("finger", "decoder", "trial", "n", "mean_rmse", "std_rmse"))
            for r in self.rows:
                w.writerow((r["finger"], r["decoder"], r["trial"], r["n"],
                            f"{r['mean']:.6f}", f"{r['std']:.6f}"))
            for s in self.summary:
                w.writerow((s["finger"], s["decoder"], "pooled", s["pooled_n"],
                            f"{s['pooled_mean']:.6f}", f"{s['pooled_std']:.6f}"))
                w.writerow((s["finger"], s["decoder"], "run_averaged", s["run_averaged_n"],
                            f"{s['run_averaged_mean']:.6f}", f"{s['run_averaged_std']:.6f}"))

    def format(self) -> str:
        lines = [f"{'finger':8s} {'decoder':13s} {'trial':>6s} {'n':>3s} {'RMSE %MVC':>18s}"]
        for r in self.rows:
            lines.append(f"{r['finger']:8s} {r['decoder']:13s} {r['trial']:>6d} {r['n']:>3d} "
                         f"{r['mean']:9.2f} +- {r['std']:5.2f}")
        for s in self.summary:
            lines.append(f"{s['finger']:8s} {s['decoder']:13s} {'all':>6s} {s['pooled_n']:>3d} "
                         f"{s['pooled_mean']:9.2f} +- {s['pooled_std']:5.2f}")
        return "\n".join(lines)


@dataclass
class FingerRun:
    """Everything produced for one finger; kept for plot export."""

    finger: str
    decoder: TrainedDecoder | None
    baseline_model: baseline.LinearModel | None
    truths: dict[int, ForceTrace] = field(default_factory=dict)
    neuro: dict[tuple[int, int], InferenceRun] = field(default_factory=dict)
    baseline_pred: dict[int, ForceTrace] = field(default_factory=dict)


@dataclass
class ExperimentOutput:
    table: ResultTable
    runs: dict[str, FingerRun]


def train_finger(cfg: ExperimentConfig, fd: FingerData, seed: int) -> TrainedDecoder:
    trains = fd.trains[cfg.train_trial]
    alpha = cfg.alpha
    if alpha is None:
        alpha = calibrate_alpha(cfg.cores[cfg.flexion.core_id], cfg.dt)
    return train_decoder(trains, fd.forces[cfg.train_trial], fd.duration, cfg.flexion,
                         cfg.extension, cfg.cores, cfg.epochs, seed,
                         learning_rate=cfg.learning_rate, k=cfg.k, alpha=alpha,
                         fan_in_limit=cfg.fan_in_limit, dt=cfg.dt)


def inference_chip(cfg: ExperimentConfig, decoder: TrainedDecoder,
                   inhibition_count: int | None = None) -> Chip:
    flex_core = cfg.cores[cfg.flexion.core_id]
    ext_core = cfg.cores[cfg.extension.core_id]
    chip = Chip([flex_core, ext_core], cfg.dt)
    inh = cfg.inhibition_count if inhibition_count is None else inhibition_count
    chip.apply(build_inference_topology(decoder.W_flex, decoder.W_ext, inh, flex_core, ext_core,
                                        cfg.k, cfg.fan_in_limit))
    return chip


def population_inputs(cfg: ExperimentConfig, fd: FingerData, trial: int,
                      decoder: TrainedDecoder) -> tuple[list[MuSpikeTrain], list[MuSpikeTrain]]:
    by_id = {t.mu_id: t for t in fd.trains[trial]}
    missing = [m for m in decoder.flexion.mu_ids + decoder.extension.mu_ids if m not in by_id]
    if missing:
        raise ValidationError(f"{fd.finger} trial {trial} lacks MUs {missing}")
    return ([by_id[m] for m in decoder.flexion.mu_ids], [by_id[m] for m in decoder.extension.mu_ids])


def fit_baseline(cfg: ExperimentConfig, fd: FingerData) -> baseline.LinearModel:
    trains = sorted(fd.trains[cfg.train_trial], key=lambda t: t.mu_id)
    counts = window_counts(trains, cfg.window_len, cfg.hop, fd.duration)
    target = baseline.window_targets(fd.forces[cfg.train_trial], counts)
    return baseline.fit_ols(counts, target, [t.mu_id for t in trains])


def predict_baseline(cfg: ExperimentConfig, model: baseline.LinearModel, fd: FingerData,
                     trial: int) -> ForceTrace:
    by_id = {t.mu_id: t for t in fd.trains[trial]}
    trains = [by_id[m] for m in model.mu_ids]
    return baseline.predict(model, window_counts(trains, model.window_len, model.hop, fd.duration))


def run_experiment(cfg: ExperimentConfig, data: Mapping[str, FingerData] | None = None,
                   write: bool = True, decoders: Mapping[str, TrainedDecoder] | None = None,
                   include_baseline: bool = True) -> ExperimentOutput:
    """Train on the train trial, then score both decoders on every test trial.

    Each neuromorphic repetition uses a fresh membrane-noise seed on the same
    chip (same mismatch realization). A failing repetition is logged and
    excluded; the table records the effective n. Passing ``decoders`` skips
    training for those fingers.
    """
    if data is None:
        if cfg.data_dir:
            data = load_dataset(cfg.data_dir, cfg.fingers,
                                sorted({cfg.train_trial, *cfg.test_trials}), cfg.drop_invalid)
        else:
            data = synthetic_dataset(cfg)
    table = ResultTable()
    runs: dict[str, FingerRun] = {}
    for finger in cfg.fingers:
        fd = data[finger]
        fidx = FINGERS.index(finger)
        if decoders is not None and finger in decoders:
            decoder = decoders[finger]
        else:
            decoder = train_finger(cfg, fd, noise_seed(cfg.seed, fidx, 0xD0))
        model = fit_baseline(cfg, fd) if include_baseline else None
        fr = FingerRun(finger, decoder, model)
        runs[finger] = fr
        chip = inference_chip(cfg, decoder)
        neuro_vals: dict[int, list[float]] = {}
        per_run: dict[int, list[float]] = {}
        mean_flex, mean_ext = [], []
        for trial in cfg.test_trials:
            fr.truths[trial] = fd.forces[trial]
            flex_in, ext_in = population_inputs(cfg, fd, trial, decoder)
            vals = []
            for rep in range(cfg.n_repetitions):
                try:
                    run = run_inference(chip, flex_in, ext_in, fd.duration,
                                        noise_seed(cfg.seed, fidx, trial, rep, 0x1F))
                    truth = evaluation_truth(fd.forces[trial], run.prediction)
                    value = rmse(run.prediction, truth)
                    if not math.isfinite(value):
                        raise ValueError("non-finite RMSE")
                except Exception as exc:  # one failed run must not poison the table
                    log.warning("%s trial %d rep %d failed: %s", finger, trial, rep, exc)
                    table.failures.append({"finger": finger, "trial": trial, "rep": rep,
                                           "error": str(exc)})
                    continue
                fr.neuro[(trial, rep)] = run
                vals.append(value)
                per_run.setdefault(rep, []).append(value)
                mean_flex.append(float(run.rate_flex.mean()))
                mean_ext.append(float(run.rate_ext.mean()))
            neuro_vals[trial] = vals
            table.rows.append({"finger": finger, "decoder": "neuromorphic", "trial": trial,
                               "n": len(vals), "values": vals,
                               "mean": float(np.mean(vals)) if vals else math.nan,
                               "std": _std(vals)})
            if model is None:
                continue
            pred = predict_baseline(cfg, model, fd, trial)
            fr.baseline_pred[trial] = pred
            bval = rmse(pred, evaluation_truth(fd.forces[trial], pred))
            table.rows.append({"finger": finger, "decoder": "baseline", "trial": trial, "n": 1,
                               "values": [bval], "mean": bval, "std": 0.0})
        for decoder_name in ("neuromorphic", "baseline") if model is not None else ("neuromorphic",):
            rows = [r for r in table.rows if r["finger"] == finger and r["decoder"] == decoder_name]
            pooled = [v for r in rows for v in r["values"]]
            if decoder_name == "neuromorphic":
                averaged = [float(np.mean(v)) for _, v in sorted(per_run.items())
                            if len(v) == len(cfg.test_trials)]
            else:
                averaged = [float(np.mean(pooled))]
            table.summary.append({
                "finger": finger, "decoder": decoder_name,
                "pooled_n": len(pooled),
                "pooled_mean": float(np.mean(pooled)) if pooled else math.nan,
                "pooled_std": _std(pooled),
                "run_averaged_n": len(averaged),
                "run_averaged_mean": float(np.mean(averaged)) if averaged else math.nan,
                "run_averaged_std": _std(averaged),
            })
        table.rates.append({"finger": finger,
                            "mean_rate_flex_hz": float(np.mean(mean_flex)) if mean_flex else math.nan,
                            "mean_rate_ext_hz": float(np.mean(mean_ext)) if mean_ext else math.nan})
    out = ExperimentOutput(table, runs)
    if write and cfg.output_dir:
        write_experiment(cfg, out)
    return out


def extension_segment_flexion_spikes(cfg: ExperimentConfig, decoder: TrainedDecoder,
                                     fd: FingerData, trial: int, inhibition_count: int,
                                     noise: float | None = 0.0) -> int:
    """Flexion-population spikes emitted while the true force is negative.

    Used for the inhibition ablation; ``noise=0`` switches membrane noise off
    so that the paired runs differ only in the inhibitory projection.
    """
    chip = inference_chip(cfg, decoder, inhibition_count)
    if noise is not None:
        chip = chip.with_noise(noise)
    flex_in, ext_in = population_inputs(cfg, fd, trial, decoder)
    run = run_inference(chip, flex_in, ext_in, fd.duration, noise_seed(cfg.seed, trial, 0xAB))
    force = fd.forces[trial]
    m_f = cfg.flexion.m_out
    total = 0
    for s in run.result.spikes[:m_f]:
        total += int(np.count_nonzero(resample(force, s) < 0.0))
    return total


# -- outputs ------------------------------------------------------------------

TRACE_COLUMNS = ("time_s", "truth", "pred", "rate_flex", "rate_ext")
PLOT_COLUMNS = ("time_s", "truth", "neuromorphic_pred", "baseline_pred", "rate_flex", "rate_ext",
                "rate_ext_inverted")


def _write_rows(path: Path, header: Sequence[str], columns: Sequence[np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([f"{x:.6f}" for x in row])


def write_experiment(cfg: ExperimentConfig, out: ExperimentOutput) -> None:
    """Result table, integer weights and one trace CSV per (finger, trial, run)."""
    root = Path(cfg.output_dir)
    out.table.write(root)
    for finger, fr in sorted(out.runs.items()):
        fdir = root / finger
        fdir.mkdir(parents=True, exist_ok=True)
        if fr.decoder is not None:
            save_weights(fdir / "W_flex.csv", fr.decoder.W_flex, fr.decoder.flexion.mu_ids)
            save_weights(fdir / "W_ext.csv", fr.decoder.W_ext, fr.decoder.extension.mu_ids)
            write_loss_curves(fdir / "loss.csv", fr.decoder)
        if fr.baseline_model is not None:
            baseline.save_model(fdir / "baseline_model.csv", fr.baseline_model)
        for (trial, rep), run in sorted(fr.neuro.items()):
            truth = evaluation_truth(fr.truths[trial], run.prediction)
            _write_rows(fdir / f"trace_trial{trial}_rep{rep}.csv", TRACE_COLUMNS,
                        (run.prediction.times, truth.samples, run.prediction.samples,
                         run.rate_flex, run.rate_ext))
        for trial, pred in sorted(fr.baseline_pred.items()):
            truth = evaluation_truth(fr.truths[trial], pred)
            _write_rows(fdir / f"baseline_trial{trial}.csv", ("time_s", "truth", "pred"),
                        (pred.times, truth.samples, pred.samples))


def export_plot_data(runs: Mapping[str, FingerRun], out_dir: str | Path, trial: int | None = None,
                     rep: int = 0) -> list[Path]:
    """One CSV per finger with truth, both predictions and population rates.

    Everything is on the 100 Hz neuromorphic grid; the baseline prediction
    is linearly interpolated onto it. ``rate_ext_inverted`` is ``-rate_ext``
    for plotting extension below the axis.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for finger, fr in sorted(runs.items()):
        t_sel = trial if trial is not None else min(fr.truths)
        run = fr.neuro.get((t_sel, rep))
        if run is None:
            continue
        t = run.prediction.times
        truth = resample(fr.truths[t_sel], t)
        bpred = fr.baseline_pred.get(t_sel)
        b = resample(bpred, t) if bpred is not None else np.zeros_like(t)
        path = out_dir / f"plot_{finger}.csv"
        _write_rows(path, PLOT_COLUMNS, (t, truth, run.prediction.samples, b, run.rate_flex,
                                         run.rate_ext, 0.0 - run.rate_ext))
        paths.append(path)
    return paths


def export_from_dir(run_dir: str | Path, out_dir: str | Path, trial: int | None = None,
                    rep: int = 0) -> list[Path]:
    """Rebuild the plot bundle from the trace files of a finished experiment."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for fdir in sorted(p for p in run_dir.iterdir() if p.is_dir() and p.name in FINGERS):
        traces = sorted(fdir.glob(f"trace_trial*_rep{rep}.csv"))
        if trial is not None:
            traces = [p for p in traces if p.name.startswith(f"trace_trial{trial}_")]
        if not traces:
            continue
        tr = np.loadtxt(traces[0], delimiter=",", skiprows=1, ndmin=2)
        t_id = traces[0].name.split("_")[1][len("trial"):]
        bpath = fdir / f"baseline_trial{t_id}.csv"
        if bpath.exists():
            b = np.loadtxt(bpath, delimiter=",", skiprows=1, ndmin=2)
            bpred = np.interp(tr[:, 0], b[:, 0], b[:, 2])
        else:
            bpred = np.zeros(tr.shape[0])
        path = out_dir / f"plot_{fdir.name}.csv"
        _write_rows(path, PLOT_COLUMNS, (tr[:, 0], tr[:, 1], tr[:, 2], bpred, tr[:, 3], tr[:, 4],
                                         0.0 - tr[:, 4]))
        paths.append(path)
    return paths


def save_weights(path: str | Path, W: np.ndarray, mu_ids: Sequence[int]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mu_id"] + [f"n{j}" for j in range(W.shape[1])])
        for mu, row in zip(mu_ids, W):
            w.writerow([mu] + [int(x) for x in row])


def load_weights(path: str | Path) -> tuple[np.ndarray, list[int]]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    return data[:, 1:], [int(m) for m in data[:, 0]]


def load_decoder(cfg: ExperimentConfig, finger_dir: str | Path) -> TrainedDecoder:
    """Rebuild a decoder from the ``W_flex.csv`` / ``W_ext.csv`` written by training."""
    finger_dir = Path(finger_dir)
    pops = []
    for spec, name in ((cfg.flexion, "W_flex.csv"), (cfg.extension, "W_ext.csv")):
        path = finger_dir / name
        if not path.exists():
            raise ValidationError(f"missing weight file {path}")
        W, ids = load_weights(path)
        if W.shape[1] != spec.m_out:
            raise ValidationError(f"{path}: {W.shape[1]} columns but m_out is {spec.m_out}")
        alpha = cfg.alpha if cfg.alpha is not None else 1.0 / 30.0
        state = TrainerState(W.astype(np.float64), W, cfg.learning_rate, cfg.k, cfg.seed, alpha,
                             fan_in_limit=cfg.fan_in_limit)
        pops.append(TrainedPopulation(spec, state, ids))
    return TrainedDecoder(*pops)


def write_loss_curves(path: str | Path, decoder: TrainedDecoder) -> None:
    fl = dict(decoder.flexion.state.loss_history)
    ex = dict(decoder.extension.state.loss_history)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "mse_flexion", "mse_extension"))
        for e in sorted(set(fl) | set(ex)):
            w.writerow((e, f"{fl.get(e, math.nan):.6f}", f"{ex.get(e, math.nan):.6f}"))
