"""Experiment plumbing shared by the CLI and the end-to-end checks.

A run is described by one JSON-compatible dict (see :data:`DEFAULT_CONFIG`).
Excitation sample ``l`` of the master seed is always the same series, so the
master dataset is laid out as ``[eval | val | train pool]`` by sample index
and smaller training sets are prefixes of the pool.
"""
from __future__ import annotations

import copy
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import excitation, metrics, mlp, oscillator, structsim, training
from .errors import ValidationError
from .io import EXTREME, RESPONSE, Dataset

SIM_CHUNK = 100

DEFAULT_CONFIG = {
    "seed": 0,
    "dt": 0.01,
    "T": 5.0,
    "target_kind": RESPONSE,
    "channel": 4,
    "workers": 1,
    "excitation": {"amplitude": 2500.0, "decay": 0.3, "f_max": 10.0, "n_freq": 200, "units": "hz"},
    "bouc_wen": {"m": 1382.4, "k": 1.7e6, "zeta": 0.05, "lam": 0.01, "beta": 2.0, "gamma_bw": 2.0,
                 "s_exp": 3.0, "damping_stiffness": "full", "split_reversals": True},
    "model": {"r": 10, "gamma_hidden": 40, "pi_hidden": [20], "activation": "relu",
              "gamma_inputs": "full", "init_seed": 0},
    "train": {"lambda_L": 0.0, "epochs": 300, "batch_size": 50, "batches_per_epoch": 4,
              "schedule": {"kind": "step_decay", "lr0": 0.01, "period_epochs": 100, "factor": 0.965},
              "clip_threshold": 1.0, "seed": 0, "select_on": "train_loss"},
    "splits": {"n_train": 100, "n_val": 0, "n_eval": 2000},
    "scaling": {"inputs": "rms", "targets": "none"},
}

SCALING_MODES = ("rms", "none")


# -- configuration -------------------------------------------------------------

def merge(base, update, path=""):
    """Recursive dict update that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for key, val in update.items():
        where = f"{path}{key}"
        if key not in out:
            raise ValidationError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and key != "schedule":
            if not isinstance(val, dict):
                raise ValidationError(f"config key {where!r} must be an object")
            out[key] = merge(out[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def parse_override(text):
    """``"a.b=value"`` into a nested dict; the value is JSON if it parses."""
    if "=" not in text:
        raise ValidationError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    for part in reversed(key.strip().split(".")):
        val = {part: val}
    return val


def build_config(overrides=(), base=None):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if base:
        cfg = merge(cfg, base)
    for ov in overrides:
        cfg = merge(cfg, ov if isinstance(ov, dict) else parse_override(ov))
    validate_config(cfg)
    return cfg


def spectrum(cfg):
    return excitation.WvSpectrum(**cfg["excitation"])


def bouc_wen(cfg):
    bw = dict(cfg["bouc_wen"])
    bw.pop("split_reversals")
    return structsim.BoucWenConfig(**bw)


def schedule(spec):
    spec = dict(spec)
    kind = spec.pop("kind", None)
    try:
        if kind == "step_decay":
            return training.StepDecay(**spec)
        if kind == "warmup_exp":
            return training.WarmupExp(**spec)
    except TypeError as exc:
        raise ValidationError(f"bad schedule parameters: {exc}") from exc
    raise ValidationError(f"unknown schedule kind {kind!r}")


def train_config(cfg):
    t = dict(cfg["train"])
    t["lr_schedule"] = schedule(t.pop("schedule"))
    return training.TrainConfig(**t)


def steps_for(T, dt):
    n = T / dt
    if not T > 0 or abs(n - round(n)) > 1e-9 * max(1.0, n):
        raise ValidationError(f"T={T} is not a positive multiple of dt={dt}")
    return int(round(n)) + 1


def validate_config(cfg):
    """Raise :class:`ValidationError` naming the first violated rule."""
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ValidationError("seed must be a non-negative integer")
    if not cfg["dt"] > 0:
        raise ValidationError("dt must be positive")
    steps_for(cfg["T"], cfg["dt"])
    if cfg["target_kind"] not in (RESPONSE, EXTREME):
        raise ValidationError(f"target_kind must be {RESPONSE!r} or {EXTREME!r}")
    if not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
        raise ValidationError("workers must be a positive integer")
    spec = spectrum(cfg)
    excitation._check_grid(spec, cfg["dt"], 2)
    bw = bouc_wen(cfg)
    if not 0 <= cfg["channel"] < bw.n_dof:
        raise ValidationError(f"channel must lie in [0, {bw.n_dof})")
    m = cfg["model"]
    if m["activation"] not in (mlp.RELU, mlp.PRELU):
        raise ValidationError(f"unknown activation {m['activation']!r}")
    if m["gamma_inputs"] not in (oscillator.FULL_INPUTS, oscillator.STATE_INPUTS):
        raise ValidationError(f"unknown gamma_inputs {m['gamma_inputs']!r}")
    if m["r"] < 1 or m["gamma_hidden"] < 1 or any(w < 1 for w in m["pi_hidden"]):
        raise ValidationError("model widths must be positive")
    tc = train_config(cfg)
    s = cfg["splits"]
    if min(s["n_train"], s["n_eval"]) < 1 or s["n_val"] < 0:
        raise ValidationError("need n_train >= 1, n_eval >= 1 and n_val >= 0")
    if tc.batch_size > s["n_train"]:
        raise ValidationError(f"batch_size {tc.batch_size} exceeds n_train {s['n_train']}")
    if any(v not in SCALING_MODES for v in cfg["scaling"].values()):
        raise ValidationError(f"scaling modes must be one of {SCALING_MODES}")
    if tc.select_on == training.VAL_LOSS and s["n_val"] == 0:
        raise ValidationError("select_on=val_loss needs n_val > 0")
    return cfg


# -- data ----------------------------------------------------------------------

def _simulate_chunk(args):
    cfg, start, stop = args
    steps = steps_for(cfg["T"], cfg["dt"])
    u = excitation.sample_batch(spectrum(cfg), cfg["seed"], cfg["dt"], steps, range(start, stop))
    x = structsim.simulate_batch(bouc_wen(cfg), u, cfg["dt"],
                                 split_reversals=cfg["bouc_wen"]["split_reversals"])[:, cfg["channel"]]
    if cfg["target_kind"] == EXTREME:
        x = structsim.extreme_process(x)
    return u, x


def generate(cfg, start, count):
    """Dataset of excitation indices ``start .. start + count - 1``.

    Work is cut into fixed index chunks and reassembled in index order; since
    every row is computed independently, the result does not depend on
    ``cfg["workers"]``.
    """
    if count < 1 or start < 0:
        raise ValidationError("need count >= 1 and start >= 0")
    jobs = [(cfg, a, min(a + SIM_CHUNK, start + count)) for a in range(start, start + count, SIM_CHUNK)]
    if cfg["workers"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
            parts = list(pool.map(_simulate_chunk, jobs))
    else:
        parts = [_simulate_chunk(j) for j in jobs]
    u = np.concatenate([p[0] for p in parts])
    x = np.concatenate([p[1] for p in parts])
    header = {"system": "bouc_wen_5dof", "p": 1, "q": 1, "dt": cfg["dt"], "T": cfg["T"], "N": count,
              "seed": cfg["seed"], "index_start": start, "target_kind": cfg["target_kind"],
              "channel": cfg["channel"]}
    return Dataset(header, u, x[:, None, :])


def master_size(cfg):
    s = cfg["splits"]
    return s["n_eval"] + s["n_val"] + s["n_train"]


def split(ds, cfg, n_train=None):
    """``(train, val, eval)`` views of a master dataset."""
    s = cfg["splits"]
    n_train = s["n_train"] if n_train is None else n_train
    a, b = s["n_eval"], s["n_eval"] + s["n_val"]
    if b + n_train > ds.header["N"]:
        raise ValidationError(f"dataset holds {ds.header['N']} samples, need {b + n_train}")
    val = ds.subset(a, b) if s["n_val"] else None
    return ds.subset(b, b + n_train), val, ds.subset(0, a)


# -- model ---------------------------------------------------------------------

@dataclass(frozen=True)
class Scaling:
    """Models see ``u / input_scale`` and predict ``y / output_scale``.

    Target scaling changes the units of the data term and therefore the
    weight of the L1 penalty relative to it; ``"none"`` keeps physical units.
    """

    input_scale: float
    output_scale: float

    @classmethod
    def from_data(cls, ds, inputs="rms", targets="rms"):
        su = float(np.sqrt(np.mean(ds.inputs ** 2))) if inputs == "rms" else 1.0
        sy = float(np.sqrt(np.mean(ds.targets ** 2))) if targets == "rms" else 1.0
        if su == 0.0 or sy == 0.0:
            raise ValidationError("cannot scale all-zero data")
        return cls(su, sy)

    def as_dict(self):
        return {"input_scale": self.input_scale, "output_scale": self.output_scale}


def init_model(cfg, q=1):
    m = cfg["model"]
    return oscillator.init_oscillator(m["init_seed"], 1, q, m["r"], m["gamma_hidden"], m["pi_hidden"],
                                      m["activation"], m["gamma_inputs"])


def fit(cfg, train_ds, val_ds=None, model0=None, log=None):
    """Train on scaled data; returns ``(model, history, scaling)``."""
    sc = Scaling.from_data(train_ds, **cfg["scaling"])
    model0 = model0 or init_model(cfg, train_ds.header["q"])
    uv = yv = None
    if val_ds is not None:
        uv = val_ds.inputs[:, None, :] / sc.input_scale
        yv = val_ds.targets / sc.output_scale
    model, hist = training.train(model0, train_ds.inputs[:, None, :] / sc.input_scale,
                                 train_ds.targets / sc.output_scale, train_ds.header["dt"],
                                 train_config(cfg), uv, yv, log=log)
    return model, hist, sc


def predict(model, sc, inputs, dt):
    """Physical-unit predictions ``(N, q, steps)`` for inputs ``(N, steps)``."""
    return oscillator.predict(model, inputs[:, None, :] / sc.input_scale, dt) * sc.output_scale


def evaluate(model, sc, ds, T_norm_ds=None):
    """Relative error on ``ds``.

    Response targets use the all-grid ratio. Extreme targets use the peak
    ratio whose denominator runs over the reference set ``T_norm_ds`` (a
    longer-horizon version of the same samples; defaults to ``ds``).
    """
    dt = ds.header["dt"]
    pred = predict(model, sc, ds.inputs, dt)[:, 0]
    if ds.header["target_kind"] == RESPONSE:
        rep = metrics.relative_error_response(ds.targets[:, 0], pred)
    else:
        ref = T_norm_ds or ds
        rep = metrics.relative_error_extreme(ref.targets[:, 0], pred, ds.header["T"],
                                             ref.header["T"], dt)
    return rep, pred


# -- sweeps --------------------------------------------------------------------

SWEEP_FIELDS = ["value", "relative_error", "final_train_loss", "best_train_loss", "l1_norm"]


def _check_axis_values(values):
    if len(values) < 2 or any(b <= a for a, b in zip(values, values[1:])):
        raise ValidationError("sweep values must be strictly ascending with at least two entries")


def sweep_N(cfg, values, master=None, log=None):
    """Train one model per training-set size on prefixes of a shared pool."""
    values = [int(v) for v in values]
    _check_axis_values(values)
    cfg = merge(cfg, {"splits": {"n_train": max(values)}})
    validate_config(merge(cfg, {"splits": {"n_train": min(values)}}))
    master = master or generate(cfg, 0, master_size(cfg))
    rows = []
    for n in values:
        train_ds, val_ds, eval_ds = split(master, cfg, n)
        model, hist, sc = fit(cfg, train_ds, val_ds)
        rep, _ = evaluate(model, sc, eval_ds)
        rows.append(_row(n, rep, hist, model))
        if log:
            log(rows[-1])
    return rows, metrics.fit_power_law([(r[0], r[1]) for r in rows])


def sweep_T(cfg, values, master=None, log=None):
    """One model per horizon; every horizon is a prefix of the longest one."""
    values = [float(v) for v in values]
    _check_axis_values(values)
    for T in values:
        steps_for(T, cfg["dt"])
    cfg = merge(cfg, {"T": max(values)})
    validate_config(cfg)
    master = master or generate(cfg, 0, master_size(cfg))
    rows = []
    for T in values:
        ds = master.truncate(steps_for(T, cfg["dt"]))
        train_ds, val_ds, eval_ds = split(ds, cfg)
        _, _, ref = split(master, cfg)
        model, hist, sc = fit(cfg, train_ds, val_ds)
        rep, _ = evaluate(model, sc, eval_ds, ref)
        rows.append(_row(T, rep, hist, model))
        if log:
            log(rows[-1])
    return rows, metrics.fit_power_law([(r[0], r[1]) for r in rows])


def _row(value, rep, hist, model):
    final = hist[-1].train_loss if hist else math.nan
    best = min(h.train_loss for h in hist) if hist else math.nan
    return [value, rep.relative_error, final, best,
            mlp.l1_param_norm(model.gamma) + mlp.l1_param_norm(model.pi)]


def planted_sweep(values, exponent, prefactor=1.0):
    """Dry-run rows ``prefactor * value^exponent`` exercising the fit path."""
    _check_axis_values([float(v) for v in values])
    rows = [[v, prefactor * float(v) ** exponent, math.nan, math.nan, math.nan] for v in values]
    return rows, metrics.fit_power_law([(r[0], r[1]) for r in rows])


# -- teacher oscillator ----------------------------------------------------------

def _linear_plus_relu(rng, lin, hidden, nonlinear):
    """Two-layer ReLU net equal to ``lin @ z`` plus ``hidden`` small random units.

    The linear part uses ``relu(a) - relu(-a) = a``; the random units are
    offset so the network maps ``z = 0`` to ``0``.
    """
    n_out, n_in = lin.shape
    w_rand = rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(hidden, n_in))
    b_rand = rng.normal(0.0, 0.1, size=hidden)
    W1 = np.vstack([lin, -lin, w_rand])
    b1 = np.concatenate([np.zeros(2 * n_out), b_rand])
    W_out = nonlinear * rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(n_out, hidden))
    W2 = np.hstack([np.eye(n_out), -np.eye(n_out), W_out])
    b2 = -W_out @ np.maximum(b_rand, 0.0)
    return mlp.MlpParams((W1, W2), (b1, b2), mlp.RELU)


def teacher_model(seed, r=2, hidden=8, omega=(1.5, 4.0), zeta=0.1, gain=1.0, nonlinear=0.1):
    """A stable random oscillator used as a realisable data source.

    Dynamics: a damped linear oscillator per state dimension (frequencies
    ``omega``, ratio ``zeta``) plus weak random ReLU terms. Read-out: a random
    unit-norm combination of the states plus weak random ReLU terms.
    """
    rng = np.random.default_rng(seed)
    w = np.linspace(omega[0], omega[1], r)
    lin = np.zeros((r, 2 * r + 1))
    lin[:, :r] = -np.diag(w ** 2)
    lin[:, r:2 * r] = -np.diag(2 * zeta * w)
    lin[:, 2 * r] = gain * rng.choice([-1.0, 1.0], size=r)
    gamma = _linear_plus_relu(rng, lin, hidden, nonlinear)
    c = rng.normal(size=r)
    read = np.zeros((1, r + 2))
    read[0, :r] = c / np.linalg.norm(c) * w ** 2 / gain
    pi = _linear_plus_relu(rng, read, hidden, nonlinear)
    return oscillator.OscillatorModel(gamma, pi, 1, 1, r)
