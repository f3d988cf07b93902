"""Command-line entry point: ``neuralosc <command> ...``.

Every command writes CSV to ``--out`` and a JSON manifest next to it
(``--manifest``, default ``<out>.manifest.json``). Exit codes: 0 success,
2 invalid input, 3 numerical divergence, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys

import numpy as np

from . import bounds, experiments as ex, io, metrics, oscillator, structsim, training
from .errors import DivergenceError, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4


def _config(args):
    base = None
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append({"seed": args.seed})
    return ex.build_config(overrides, base)


def _finish(args, cfg, command, outputs, extra=None):
    path = args.manifest or args.out + ".manifest.json"
    seeds = {"master": cfg["seed"], "train": cfg["train"]["seed"], "init": cfg["model"]["init_seed"]}
    io.write_manifest(path, io.manifest(command, cfg, seeds, outputs, extra))


def _load_model(path):
    with open(path, "rb") as fh:
        model, extra = oscillator.loads(fh.read())
    return model, ex.Scaling(**extra["scaling"])


def _pick(ds, cfg, which):
    if which == "all":
        return ds
    train, val, ev = ex.split(ds, cfg)
    picked = {"train": train, "val": val, "eval": ev}[which]
    if picked is None:
        raise ValidationError(f"dataset has no {which} split")
    return picked


# -- commands --------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _config(args)
    count = args.count if args.count is not None else ex.master_size(cfg)
    ds = ex.generate(cfg, args.start, count)
    io.write_dataset(args.data, ds)
    rows = [[ds.header["index_start"] + i, float(np.sqrt(np.mean(ds.inputs[i] ** 2))),
             float(np.sqrt(np.mean(ds.targets[i] ** 2))), float(np.max(np.abs(ds.targets[i])))]
            for i in range(ds.header["N"])]
    io.write_csv(args.out, ["index", "input_rms", "target_rms", "target_peak"], rows)
    _finish(args, cfg, "gen-data", [args.data, args.out], {"dataset_header": ds.header})


def cmd_train(args):
    cfg = _config(args)
    ds = io.read_dataset(args.data)
    if args.n_train is not None:
        cfg = ex.build_config([{"splits": {"n_train": args.n_train}}], cfg)
    train_ds, val_ds, _ = ex.split(ds, cfg) if args.split == "config" else (ds, None, None)
    model, hist, sc = ex.fit(cfg, train_ds, val_ds)
    with open(args.model_out, "wb") as fh:
        fh.write(oscillator.dumps(model, {"scaling": sc.as_dict(), "config_hash": io.config_hash(cfg)}))
    training.write_history(hist, args.out)
    _finish(args, cfg, "train", [args.model_out, args.out], {"n_train": train_ds.header["N"]})


def cmd_eval(args):
    cfg = _config(args)
    model, sc = _load_model(args.model)
    ds = _pick(io.read_dataset(args.data), cfg, args.split)
    ref = _pick(io.read_dataset(args.reference), cfg, args.split) if args.reference else None
    rep, pred = ex.evaluate(model, sc, ds, ref)
    rows = [["relative_error", rep.relative_error], ["n_samples", rep.n_samples], ["n_steps", rep.n_steps]]
    if ds.header["target_kind"] == io.EXTREME:
        rows.append(["ks_terminal", metrics.ks_distance(ds.targets[:, 0, -1], pred[:, -1])])
    io.write_csv(args.out, ["metric", "value"], rows)
    _finish(args, cfg, "eval", [args.out])


def cmd_dist(args):
    cfg = _config(args)
    ds = _pick(io.read_dataset(args.data), cfg, args.split)
    dt = ds.header["dt"]
    if ds.header["target_kind"] == io.EXTREME:
        true_end = ds.targets[:, 0, -1]
    else:
        true_end = structsim.extreme_process(ds.targets[:, 0])[:, -1]
    series = {"target": true_end}
    if args.model:
        model, sc = _load_model(args.model)
        pred = structsim.extreme_process(ex.predict(model, sc, ds.inputs, dt)[:, 0])
        series["prediction"] = pred[:, -1]
    rows = []
    for name, vals in series.items():
        d = metrics.empirical_distribution(vals, n_bins=args.bins)
        rows += [[name, float(g), float(p), float(d.cdf(g))] for g, p in zip(d.grid, d.density)]
    io.write_csv(args.out, ["source", "value", "density", "cdf"], rows)
    extra = {"ks": metrics.ks_distance(series["target"], series["prediction"])} if args.model else None
    _finish(args, cfg, "dist", [args.out], extra)


def cmd_sweep(args):
    cfg = _config(args)
    values = [float(v) for v in args.values.split(",")]
    if args.axis == "N":
        values = [int(v) for v in values]
    if args.dry_run:
        rows, law = ex.planted_sweep(values, args.planted_exponent)
    elif args.axis == "N":
        rows, law = ex.sweep_N(cfg, values)
    else:
        rows, law = ex.sweep_T(cfg, values)
    io.write_csv(args.out, ex.SWEEP_FIELDS, rows)
    _finish(args, cfg, "sweep", [args.out], {"axis": args.axis, "exponent": law.exponent,
                                             "prefactor": law.prefactor, "r_squared": law.r_squared})
    print(f"fitted exponent {law.exponent:.4f} (r^2 = {law.r_squared:.4f})")


BOUND_FIELDS = ["log_delta", "estimation_thm1", "bound_thm1", "estimation_thm2", "bound_thm2"]
_INT_FIELDS = {"w_max", "h_pi", "N", "q", "p", "r", "w_gamma", "w_pi"}
_THM2 = ("L_h", "B_beta_g", "C_gamma", "C_pi", "w_gamma", "w_pi")


def _bound_row(raw):
    vals = {k: (int(float(v)) if k in _INT_FIELDS else float(v)) for k, v in raw.items() if v not in ("", None)}
    eps_y = vals.pop("eps_y", 0.0)
    thm2 = {k: vals.pop(k) for k in _THM2 if k in vals}
    try:
        inp = bounds.BoundInputs(**vals)
    except TypeError as exc:
        raise ValidationError(f"bad bound inputs: {exc}") from exc
    row = [bounds.delta_pi_phi(inp).log, bounds.estimation_error_thm1(inp),
           bounds.generalization_bound_thm1(inp, eps_y), bounds.estimation_error_thm2(inp)]
    if len(thm2) == len(_THM2):
        row.append(bounds.generalization_bound_thm2(inp, bounds.Thm2Constants(**thm2)))
    elif thm2:
        raise ValidationError(f"partial theorem-2 constants; need all of {_THM2}")
    else:
        row.append(math.nan)
    return list(raw.values()) + row


def cmd_bounds(args):
    with open(args.inputs, newline="") as fh:
        rows_in = list(csv.DictReader(fh))
    if not rows_in:
        raise ValidationError("bounds input file has no rows")
    cols = list(rows_in[0].keys())
    rows = [_bound_row(r) for r in rows_in]
    io.write_csv(args.out, cols + BOUND_FIELDS, rows)
    path = args.manifest or args.out + ".manifest.json"
    io.write_manifest(path, io.manifest("bounds", {"inputs": rows_in}, {}, [args.out]))


# -- parser ----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="neuralosc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--out", required=True, help="CSV output path")
        sp.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
        if config:
            sp.add_argument("--config", help="JSON config merged over the defaults")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override one config key, e.g. train.epochs=50")
            sp.add_argument("--seed", type=int, help="master seed")

    g = sub.add_parser("gen-data", help="simulate excitation/response pairs")
    common(g)
    g.add_argument("--data", required=True, help="dataset output path")
    g.add_argument("--start", type=int, default=0, help="first excitation index")
    g.add_argument("--count", type=int, help="number of samples (default: all splits)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit an oscillator to a dataset")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--model-out", required=True)
    t.add_argument("--n-train", type=int, help="training-set size taken from the pool")
    t.add_argument("--split", choices=["config", "all"], default="config",
                   help="'config': use the configured split layout; 'all': train on every sample")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="relative error of a trained model")
    common(e)
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--reference", help="longer-horizon dataset for the extreme-value normaliser")
    e.add_argument("--split", choices=["all", "train", "val", "eval"], default="all")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="error versus training-set size or horizon")
    common(s)
    s.add_argument("--axis", choices=["N", "T"], required=True)
    s.add_argument("--values", required=True, help="comma-separated ascending values")
    s.add_argument("--dry-run", action="store_true", help="skip training; emit planted power-law errors")
    s.add_argument("--planted-exponent", type=float, default=-0.5)
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("bounds", help="evaluate bound formulas for rows of a CSV")
    common(b, config=False)
    b.add_argument("--inputs", required=True, help="CSV with one set of bound inputs per row")
    b.set_defaults(func=cmd_bounds)

    d = sub.add_parser("dist", help="terminal peak-value PDF/CDF data")
    common(d)
    d.add_argument("--data", required=True)
    d.add_argument("--model", help="also emit the model's predicted distribution")
    d.add_argument("--split", choices=["all", "train", "val", "eval"], default="all")
    d.add_argument("--bins", type=int, help="histogram bins instead of a kernel estimate")
    d.set_defaults(func=cmd_dist)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
