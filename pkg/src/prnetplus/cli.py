"""Command-line interface: generate | train | eval | predict | sweep | ablate.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Failures also print one JSON line
on stderr: {"error": <kind>, "message": <text>}.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from .experiments import (
    ExperimentSpec,
    SweepSpec,
    evaluate,
    run_experiment,
    run_sweep,
    spec_from_file,
    write_rows,
)
from .mrdata import Mode, build_sequences, load_registry, parse_mr_csv
from .prnet import ModelConfig
from .simgen import PRESETS, generate_dataset, resolve_config, write_dataset
from .train import TrainConfig, encode_sequence, load_run, model_config_from_file, predict_encoded, split_for, train


def _sim(config):
    return resolve_config(config)


def _train_config(config, **overrides) -> TrainConfig:
    if config and config not in PRESETS:
        return TrainConfig.from_file(config, **overrides)
    return replace(TrainConfig(), **{k: v for k, v in overrides.items() if v is not None})


def _model_config(config) -> ModelConfig:
    if config and config not in PRESETS:
        return model_config_from_file(config)
    return ModelConfig()


def _echo(out: Path, **sections) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(sections, indent=2, default=str))


def _load_series(data_dir: Path):
    parsed = parse_mr_csv(data_dir / "mr.csv", registry=load_registry(data_dir / "stations.csv"))
    return parsed.series


config_opt = click.option("--config", default=None, help="Config file (INI) or preset name.")
seed_opt = click.option("--seed", type=int, default=None, help="Random seed.")
out_opt = click.option("--out", type=click.Path(file_okay=False), required=True, help="Run directory.")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Position recovery and mode detection from cellular measurement records."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@cli.command()
@config_opt
@seed_opt
@out_opt
def generate(config, seed, out):
    """Simulate a labeled dataset: mr.csv, stations.csv and manifest.json."""
    sim = _sim(config)
    seed = 7 if seed is None else seed
    ds = generate_dataset(sim, seed)
    path = write_dataset(ds, out)
    click.echo(json.dumps({"out": str(path), "samples": len(ds.samples()), "stations": len(ds.world.stations)}))


@cli.command("train")
@config_opt
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@seed_opt
@click.option("--variant", type=click.Choice(["full", "pos_only", "mode_only", "uniform_weights", "no_speed"]), default=None)
@click.option("--fold", type=int, default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--tau", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--encoder", type=click.Choice(["hierarchical", "local", "global"]), default=None)
@out_opt
def train_cmd(config, data_dir, seed, variant, fold, alpha, tau, epochs, encoder, out):
    """Train on the training folds of a dataset directory."""
    tcfg = _train_config(config, seed=seed, variant=variant, fold=fold, alpha=alpha, tau=tau, epochs=epochs)
    mcfg = _model_config(config)
    if encoder:
        mcfg = replace(mcfg, encoder=encoder)
    seqs = build_sequences(_load_series(Path(data_dir)), tcfg.tau)
    train_seqs, _ = split_for(seqs, tcfg)
    out = Path(out)
    _echo(out, train=tcfg.to_dict(), model=mcfg.to_dict(), data=str(Path(data_dir).resolve()))
    result = train(train_seqs, tcfg, mcfg, out_dir=out)
    click.echo(json.dumps({"out": str(out), "epochs": len(result.trace), "final": result.trace[-1] if result.trace else None}))


@cli.command("eval")
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Defaults to the run directory.")
def eval_cmd(run_dir, data_dir, out):
    """Score a trained run on its held-out fold; writes report.json and report.csv."""
    run = load_run(run_dir)
    seqs = build_sequences(_load_series(Path(data_dir)), run.config.tau)
    _, test_seqs = split_for(seqs, run.config)
    ev = evaluate(run.store, run.model_config, run.stats, test_seqs)
    report = {**ev.errors.to_dict(), "mode_acc": ev.mode_acc, "majority": ev.majority}
    out = Path(out or run_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    row = {"variant": run.config.variant, "fold": run.config.fold, "seed": run.config.seed,
           "median_m": ev.errors.median_m, "mean_m": ev.errors.mean_m, "p90_m": ev.errors.p90_m, "mode_acc": ev.mode_acc}
    write_rows(out / "report.csv", [row], list(row))
    click.echo(json.dumps(report))


@cli.command()
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--mr", "mr_csv", type=click.Path(exists=True, dir_okay=False), required=True, help="MR CSV, labels optional.")
@click.option("--registry", type=click.Path(exists=True, dir_okay=False), required=True, help="Station registry CSV.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Prediction CSV.")
def predict(run_dir, mr_csv, registry, out):
    """Per-sample lat, lon, mode and confidence for every MR row."""
    run = load_run(run_dir)
    series = parse_mr_csv(mr_csv, registry=load_registry(registry)).series
    seqs = build_sequences(series, run.config.tau)
    encoded = [encode_sequence(s, run.stats, run.model_config.N) for s in seqs]
    preds = predict_encoded(run.store, run.model_config, encoded)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["MRTime", "IMSI", "lat", "lon", "mode", "confidence"])
        for seq, (pos, probs) in zip(seqs, preds):
            lat, lon = run.stats.from_unit(pos[:, 0], pos[:, 1])
            for k, s in enumerate(seq.samples):
                m = int(np.argmax(probs[k]))
                w.writerow([s.timestamp, s.imsi, f"{lat[k]:.7f}", f"{lon[k]:.7f}", Mode(m).name.lower(), f"{probs[k, m]:.4f}"])
                n += 1
    click.echo(json.dumps({"out": str(out), "rows": n}))


def _csv_floats(ctx, param, value):
    if value is None:
        return None
    try:
        return tuple(float(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise click.BadParameter("expected comma-separated numbers")


def _csv_ints(ctx, param, value):
    if value is None:
        return None
    try:
        return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise click.BadParameter("expected comma-separated integers")


@cli.command()
@config_opt
@click.option("--axis", type=click.Choice(["time_interval", "station_density"]), required=True)
@click.option("--values", callback=_csv_floats, required=True, help="Comma-separated sweep values.")
@click.option("--seeds", callback=_csv_ints, default="1,2,3")
@click.option("--epochs", type=int, default=None)
@out_opt
def sweep(config, axis, values, seeds, epochs, out):
    """Retrain across a sweep axis and report the Spearman trend of median error."""
    try:
        spec = SweepSpec(axis, values, seeds)
    except ValueError as exc:
        raise click.BadParameter(str(exc))
    tcfg = _train_config(config, epochs=epochs)
    mcfg = _model_config(config)
    sim = _sim(config)
    out = Path(out)
    _echo(out, sweep={"axis": axis, "values": list(values), "seeds": list(seeds)}, train=tcfg.to_dict(), model=mcfg.to_dict(), sim=sim.to_dict())
    _, report = run_sweep(spec, sim, tcfg, mcfg, out_dir=out)
    click.echo(json.dumps(report.to_dict()))


@cli.command()
@config_opt
@click.option("--variants", default=None, help="Comma-separated: full,pos_only,mode_only,uniform_weights,no_speed,prnet_l,prnet_g")
@click.option("--alphas", callback=_csv_floats, default=None)
@click.option("--seeds", callback=_csv_ints, default=None)
@click.option("--folds", callback=_csv_ints, default=None)
@click.option("--epochs", type=int, default=None)
@out_opt
def ablate(config, variants, alphas, seeds, folds, epochs, out):
    """Train every variant on every fold and seed; writes results.csv and aggregate.csv."""
    overrides = dict(alphas=alphas, seeds=seeds, folds=folds)
    if variants:
        overrides["variants"] = tuple(v.strip() for v in variants.split(",") if v.strip())
    if config and config not in PRESETS:
        spec = spec_from_file(config, **overrides)
    else:
        spec = ExperimentSpec(sim=_sim(config), **{k: v for k, v in overrides.items() if v is not None})
    if epochs is not None:
        spec = replace(spec, train=replace(spec.train, epochs=epochs))
    known = {"full", "pos_only", "mode_only", "uniform_weights", "no_speed", "prnet_l", "prnet_g"}
    bad = [v for v in spec.variants if v not in known]
    if bad:
        raise click.BadParameter(f"unknown variants: {', '.join(bad)}")
    rows = run_experiment(spec, out_dir=out)
    click.echo(json.dumps({"out": str(out), "rows": len(rows)}))


def _fail(kind: str, message: str, code: int) -> int:
    click.echo(json.dumps({"error": kind, "message": message}), err=True)
    return code


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="prnetplus", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except (click.UsageError, click.BadParameter) as exc:
        return _fail("usage", exc.format_message(), 1)
    except click.Abort:
        return _fail("aborted", "aborted", 2)
    except Exception as exc:  # noqa: BLE001 - everything else is a runtime failure
        return _fail(type(exc).__name__, str(exc), 2)
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
