"""Command-line entry point.

Every subcommand reads an optional ``key = value`` config file, applies
``--set key=value`` overrides and ``--seed``, and writes its outputs under
``--out``. Exit codes: 0 success, 1 invalid input or config, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import baseline
from .harness import (ExperimentConfig, ValidationError, config_from_kv, export_from_dir,
                      fit_baseline, load_dataset, load_decoder, predict_baseline, evaluation_truth,
                      run_experiment, save_weights, synthetic_dataset, train_finger,
                      write_dataset, write_loss_curves)
from .kvconfig import ConfigError, load_kv, parse_value
from .signal import FINGERS, rmse
from .trainer import noise_seed, save_checkpoint

log = logging.getLogger("neuroforce")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="master seed for all randomness")
    p.add_argument("--data", type=Path, help="dataset directory (default: synthesize)")
    p.add_argument("--fingers", help="comma-separated finger list")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuroforce",
                                     description="Decode finger force from motor-unit spikes "
                                                 "on an emulated neuromorphic substrate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset (spikes.csv + force CSVs)")
    _common(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="chip-in-the-loop training of both populations")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--checkpoints", action="store_true", help="write one checkpoint per epoch")

    p = sub.add_parser("infer", help="run the inference network with trained weights")
    _common(p)
    p.add_argument("--weights", type=Path, required=True, help="output directory of 'train'")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("baseline", help="fit and score the linear-regression decoder")
    _common(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="full protocol: train, infer, baseline, result table")
    _common(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("export", help="plot-data CSVs from a finished eval/infer run")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--trial", type=int)
    p.add_argument("--rep", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    values, base = {}, Path(".")
    if args.config is not None:
        values = load_kv(args.config)
        base = args.config.parent
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = parse_value(value)
    if args.seed is not None:
        values["seed"] = args.seed
    if args.fingers:
        values["fingers"] = args.fingers
    if args.data is not None:
        values["data.dir"] = str(args.data.resolve())
    if getattr(args, "out", None) is not None:
        values["output_dir"] = str(args.out)
    return config_from_kv(values, base)


def _data(cfg: ExperimentConfig):
    trials = sorted({cfg.train_trial, *cfg.test_trials})
    if cfg.data_dir:
        return load_dataset(cfg.data_dir, cfg.fingers, trials, cfg.drop_invalid)
    return synthetic_dataset(cfg)


def cmd_synth(cfg: ExperimentConfig, args) -> None:
    write_dataset(args.out, synthetic_dataset(cfg))
    print(f"wrote dataset for {', '.join(cfg.fingers)} to {args.out}")


def cmd_train(cfg: ExperimentConfig, args) -> None:
    data = _data(cfg)
    for finger in cfg.fingers:
        fd = data[finger]
        dec = train_finger(cfg, fd, noise_seed(cfg.seed, FINGERS.index(finger), 0xD0))
        fdir = args.out / finger
        fdir.mkdir(parents=True, exist_ok=True)
        save_weights(fdir / "W_flex.csv", dec.W_flex, dec.flexion.mu_ids)
        save_weights(fdir / "W_ext.csv", dec.W_ext, dec.extension.mu_ids)
        write_loss_curves(fdir / "loss.csv", dec)
        if args.checkpoints:
            save_checkpoint(fdir / "flexion.npz", dec.flexion.state)
            save_checkpoint(fdir / "extension.npz", dec.extension.state)
        fl, ex = dec.flexion.losses, dec.extension.losses
        if fl and ex:
            print(f"{finger}: flexion mse {fl[0]:.2f} -> {fl[-1]:.2f}, "
                  f"extension mse {ex[0]:.2f} -> {ex[-1]:.2f}")


def cmd_infer(cfg: ExperimentConfig, args) -> None:
    decoders = {f: load_decoder(cfg, args.weights / f) for f in cfg.fingers}
    out = run_experiment(cfg, _data(cfg), write=True, decoders=decoders, include_baseline=False)
    print(out.table.format())


def cmd_baseline(cfg: ExperimentConfig, args) -> None:
    data = _data(cfg)
    results = []
    for finger in cfg.fingers:
        fd = data[finger]
        model = fit_baseline(cfg, fd)
        fdir = args.out / finger
        fdir.mkdir(parents=True, exist_ok=True)
        baseline.save_model(fdir / "baseline_model.csv", model)
        for trial in cfg.test_trials:
            pred = predict_baseline(cfg, model, fd, trial)
            value = rmse(pred, evaluation_truth(fd.forces[trial], pred))
            results.append({"finger": finger, "trial": trial, "rmse": value})
            print(f"{finger} trial {trial}: baseline RMSE {value:.2f} %MVC")
    (args.out / "baseline_results.json").write_text(json.dumps(results, indent=2) + "\n",
                                                   encoding="utf-8")


def cmd_eval(cfg: ExperimentConfig, args) -> None:
    out = run_experiment(cfg, _data(cfg), write=True)
    print(out.table.format())
    if out.table.failures:
        print(f"{len(out.table.failures)} repetition(s) failed; see results.json")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "export":
            if not args.run.is_dir():
                raise ValidationError(f"run directory {args.run} not found")
            paths = export_from_dir(args.run, args.out, args.trial, args.rep)
            print(f"wrote {len(paths)} plot file(s) to {args.out}")
            return EXIT_OK
        cfg = load_config(args)
        {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer,
         "baseline": cmd_baseline, "eval": cmd_eval}[args.command](cfg, args)
    except (ValidationError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
