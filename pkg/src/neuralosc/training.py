"""Mean-squared loss with an L1 parameter penalty, Adam, clipping, schedules and the epoch loop."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import mlp
from .errors import DivergenceError, ValidationError
from .oscillator import predict, rollout_batch, rollout_vjp_batch

TRAIN_LOSS = "train_loss"
VAL_LOSS = "val_loss"


@dataclass(frozen=True)
class StepDecay:
    lr0: float = 0.01
    period_epochs: int = 100
    factor: float = 0.965


@dataclass(frozen=True)
class WarmupExp:
    lr_start: float = 0.0005
    lr_peak: float = 0.02
    warmup_epochs: int = 40
    period_epochs: int = 100
    factor: float = 0.95


def _check_schedule(s):
    rates = (s.lr0,) if isinstance(s, StepDecay) else (s.lr_start, s.lr_peak)
    if any(r <= 0 for r in rates) or not 0 < s.factor <= 1 or s.period_epochs <= 0:
        raise ValidationError(f"invalid schedule {s}")


def lr_at(schedule, epoch):
    """Learning rate in effect during ``epoch`` (0-based)."""
    if epoch < 0:
        raise ValidationError("epoch must be >= 0")
    if isinstance(schedule, StepDecay):
        return schedule.lr0 * schedule.factor ** (epoch // schedule.period_epochs)
    s = schedule
    if epoch < s.warmup_epochs:
        return s.lr_start + (s.lr_peak - s.lr_start) * epoch / s.warmup_epochs
    return s.lr_peak * s.factor ** ((epoch - s.warmup_epochs) // s.period_epochs)


@dataclass(frozen=True)
class TrainConfig:
    lambda_L: float = 0.0
    epochs: int = 100
    batch_size: int = 100
    batches_per_epoch: int = 4
    lr_schedule: object = field(default_factory=StepDecay)
    clip_threshold: float = 1.0
    seed: int = 0
    select_on: str = TRAIN_LOSS

    def __post_init__(self):
        if self.lambda_L < 0:
            raise ValidationError("lambda_L must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.batches_per_epoch < 1:
            raise ValidationError("epochs >= 0, batch_size >= 1 and batches_per_epoch >= 1 required")
        if not self.clip_threshold > 0:
            raise ValidationError("clip_threshold must be positive")
        if self.select_on not in (TRAIN_LOSS, VAL_LOSS):
            raise ValidationError(f"select_on must be {TRAIN_LOSS!r} or {VAL_LOSS!r}")
        _check_schedule(self.lr_schedule)


# -- losses ---------------------------------------------------------------

def _as_batch(batch):
    """Accept ``(u, y)`` arrays or a list of ``(u, y)`` Trajectory pairs."""
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        u, y = batch
        return np.asarray(u, dtype=np.float64), np.asarray(y, dtype=np.float64), None
    if len(batch) == 0:
        raise ValidationError("empty batch")
    dt = batch[0][0].dt
    if any(a.dt != dt or b.values.shape[1] != a.values.shape[1] for a, b in batch):
        raise ValidationError("inconsistent trajectories in batch")
    u = np.stack([a.values for a, _ in batch])
    y = np.stack([b.values for _, b in batch])
    return u, y, dt


def empirical_loss(model, batch, dt=None):
    """Mean squared error over samples, grid points and output channels.

    Returns ``(loss, grad)`` with ``grad`` a flat vector ``[gamma, pi]``.
    """
    u, y_t, traj_dt = _as_batch(batch)
    dt = traj_dt if traj_dt is not None else dt
    if u.shape[0] == 0:
        raise ValidationError("empty batch")
    y, rec = rollout_batch(model, u, dt)
    if y.shape != y_t.shape:
        raise ValidationError(f"target shape {y_t.shape} != prediction shape {y.shape}")
    resid = y - y_t
    loss = float(np.mean(resid ** 2))
    if not math.isfinite(loss):
        raise DivergenceError("non-finite loss")
    gg, pg = rollout_vjp_batch(model, u, rec, 2.0 * resid / resid.size)
    return loss, np.concatenate([gg, pg])


def penalty_coefficient(lambda_L, n_train):
    if lambda_L < 0 or n_train < 1:
        raise ValidationError("need lambda_L >= 0 and n_train >= 1")
    return lambda_L / math.sqrt(n_train)


def regularized_loss(model, batch, lambda_L, n_train, dt=None):
    """Empirical loss plus ``lambda_L / sqrt(N) * (|Gamma|_1 + |Pi|_1)``."""
    loss, grad = empirical_loss(model, batch, dt)
    coef = penalty_coefficient(lambda_L, n_train)
    if coef == 0.0:
        return loss, grad
    loss += coef * (mlp.l1_param_norm(model.gamma) + mlp.l1_param_norm(model.pi))
    sub = np.concatenate([mlp.l1_subgradient(model.gamma), mlp.l1_subgradient(model.pi)])
    return loss, grad + coef * sub


# -- optimiser --------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))


def adam_step(state, theta, grad, lr):
    """One bias-corrected Adam update; returns ``(theta_new, state_new)``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise ValidationError("gradient / optimiser state shape mismatch")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient")
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    theta_new = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return theta_new, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


def clip_gradients(grad, threshold):
    """Rescale ``grad`` to global L2 norm ``threshold`` if it is larger."""
    if not threshold > 0:
        raise ValidationError("threshold must be positive")
    grad = np.asarray(grad, dtype=np.float64)
    norm = float(np.sqrt(np.sum(grad * grad)))
    if norm > threshold:
        return grad * (threshold / norm)
    return grad


def clip_per_network(model, grad, threshold):
    n = model.gamma.n_params
    return np.concatenate([clip_gradients(grad[:n], threshold), clip_gradients(grad[n:], threshold)])


# -- training loop ------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    l1_norm_gamma: float
    l1_norm_pi: float


HISTORY_FIELDS = ["epoch", "lr", "train_loss", "val_loss", "l1_norm_gamma", "l1_norm_pi"]


def mse(model, u, y, dt, chunk=512):
    pred = predict(model, u, dt, chunk=chunk)
    return float(np.mean((pred - y) ** 2))


def train(model0, u_train, y_train, dt, cfg, u_val=None, y_val=None, log=None):
    """Adam over seeded random mini-batches; keeps the best epoch-end snapshot.

    Every epoch runs ``cfg.batches_per_epoch`` updates on batches drawn
    (without replacement inside a batch, independently across batches) from
    a generator seeded with ``cfg.seed``. After each epoch the full training
    MSE (and validation MSE when given) is evaluated; the snapshot with the
    lowest ``cfg.select_on`` value is returned with the per-epoch history.
    """
    n = u_train.shape[0]
    if n == 0:
        raise ValidationError("empty training set")
    if cfg.batch_size > n:
        raise ValidationError(f"batch_size {cfg.batch_size} exceeds training set size {n}")
    if cfg.select_on == VAL_LOSS and u_val is None:
        raise ValidationError("select_on=val_loss needs a validation set")
    history = []
    if cfg.epochs == 0:
        return model0, history
    rng = np.random.default_rng(cfg.seed)
    theta = model0.to_vector()
    state = AdamState.zeros(theta.size)
    model = model0
    best = (math.inf, model0)
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg.lr_schedule, epoch)
        for b in range(cfg.batches_per_epoch):
            idx = np.sort(rng.choice(n, size=cfg.batch_size, replace=False))
            try:
                _, grad = regularized_loss(model, (u_train[idx], y_train[idx]), cfg.lambda_L, n, dt)
            except DivergenceError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}, batch {b}: {exc}") from exc
            grad = clip_per_network(model, grad, cfg.clip_threshold)
            theta, state = adam_step(state, theta, grad, lr)
            model = model.with_vector(theta)
        train_loss = mse(model, u_train, y_train, dt)
        val_loss = mse(model, u_val, y_val, dt) if u_val is not None else float("nan")
        if not math.isfinite(train_loss):
            raise DivergenceError(f"non-finite training loss at epoch {epoch}")
        rec = EpochRecord(epoch, lr, train_loss, val_loss,
                          mlp.l1_param_norm(model.gamma), mlp.l1_param_norm(model.pi))
        history.append(rec)
        if log is not None:
            log(rec)
        score = train_loss if cfg.select_on == TRAIN_LOSS else val_loss
        if score < best[0]:
            best = (score, model)
    return best[1], history


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for rec in history:
            w.writerow([rec.epoch, repr(rec.lr), repr(rec.train_loss), repr(rec.val_loss),
                        repr(rec.l1_norm_gamma), repr(rec.l1_norm_pi)])
