"""Substrate config files and output-spike CSV.

Config schema (one ``core.N.*`` namespace per core, all keys optional
except ``core.N.n_neurons``)::

    dt = 0.0001
    core.0.n_neurons = 20
    core.0.mismatch_sigma = 0.1
    core.0.noise_current_sigma = 0.002
    core.0.seed = 1
    core.0.neuron.<C|g_L|E_L|V_T|Delta_T|V_peak|V_reset|a|b|tau_w|refractory> = ...
    core.0.synapse.charge = 0.4
    core.0.synapse.<AMPA|NMDA|GABA_A|GABA_B>.tau = 0.005
    core.0.synapse.<AMPA|NMDA|GABA_A|GABA_B>.gain = 0.08
"""

from __future__ import annotations

import csv
import re
from pathlib import Path
from typing import Any, Mapping

from ..kvconfig import ConfigError, dump_kv, load_kv, parse_kv, subtree
from .core import NEURON_FIELDS, SYNAPSE_TYPES, CoreConfig, NeuronParams, SimResult, SynapseParams

DEFAULT_DT = 1e-4


def cores_from_kv(values: Mapping[str, Any]) -> tuple[list[CoreConfig], float]:
    ids = sorted({int(m.group(1)) for k in values if (m := re.match(r"core\.(\d+)\.", k))})
    unknown = [k for k in values if not k.startswith("core.") and k != "dt"]
    if unknown:
        raise ConfigError(f"unknown substrate keys: {unknown}")
    cores = []
    for cid in ids:
        sub = subtree(values, f"core.{cid}")
        neuron = subtree(sub, "neuron")
        bad = set(neuron) - set(NEURON_FIELDS)
        if bad:
            raise ConfigError(f"core.{cid}: unknown neuron keys {sorted(bad)}")
        syn = subtree(sub, "synapse")
        tau, gain = {}, {}
        for name in SYNAPSE_TYPES:
            t = subtree(syn, name)
            if "tau" in t:
                tau[name] = float(t["tau"])
            if "gain" in t:
                gain[name] = float(t["gain"])
        syn_kwargs: dict[str, Any] = {"gain": gain}
        if tau:
            syn_kwargs["tau"] = {**SynapseParams().tau, **tau}
        if "charge" in syn:
            syn_kwargs["charge"] = float(syn["charge"])
        try:
            cores.append(CoreConfig(
                core_id=cid,
                n_neurons=int(sub.get("n_neurons", 20)),
                neuron=NeuronParams(**{k: float(v) for k, v in neuron.items()}),
                synapse=SynapseParams(**syn_kwargs),
                mismatch_sigma=float(sub.get("mismatch_sigma", 0.1)),
                noise_current_sigma=float(sub.get("noise_current_sigma", 0.0)),
                seed=int(sub.get("seed", 0)),
            ))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"core.{cid}: {exc}") from exc
    return cores, float(values.get("dt", DEFAULT_DT))


def load_substrate_config(path: str | Path) -> tuple[list[CoreConfig], float]:
    return cores_from_kv(load_kv(path))


def parse_substrate_config(text: str) -> tuple[list[CoreConfig], float]:
    return cores_from_kv(parse_kv(text))


def cores_to_kv(cores: list[CoreConfig], dt: float = DEFAULT_DT) -> dict[str, Any]:
    out: dict[str, Any] = {"dt": dt}
    for c in cores:
        p = f"core.{c.core_id}"
        out[f"{p}.n_neurons"] = c.n_neurons
        out[f"{p}.mismatch_sigma"] = float(c.mismatch_sigma)
        out[f"{p}.noise_current_sigma"] = float(c.noise_current_sigma)
        out[f"{p}.seed"] = c.seed
        for name in NEURON_FIELDS:
            out[f"{p}.neuron.{name}"] = float(getattr(c.neuron, name))
        out[f"{p}.synapse.charge"] = float(c.synapse.charge)
        for name in SYNAPSE_TYPES:
            out[f"{p}.synapse.{name}.tau"] = float(c.synapse.tau[name])
            out[f"{p}.synapse.{name}.gain"] = float(c.synapse.gain[name])
    return out


def dump_substrate_config(cores: list[CoreConfig], dt: float = DEFAULT_DT) -> str:
    return dump_kv(cores_to_kv(cores, dt))


def write_output_spikes(path: str | Path, result: SimResult, neuron_offset: int = 0) -> None:
    """``neuron_id,time_s`` rows sorted by time, then neuron id."""
    rows = [(t, j + neuron_offset) for j, s in enumerate(result.spikes) for t in s]
    rows.sort()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("neuron_id", "time_s"))
        for t, j in rows:
            w.writerow((j, f"{t:.9f}"))
