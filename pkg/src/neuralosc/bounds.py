"""Closed-form generalization-bound calculators and an empirical perturbation check.

The complexity quantity ``Delta`` contains ``exp(2 T (L + 1))`` and overflows
double precision at quite ordinary horizons, so it is evaluated as a
logarithm. Only ``ln(3 + 6 B Delta)`` enters the bounds, which follows from
``ln Delta`` with a log-sum-exp.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import mlp
from .errors import DimensionError, ValidationError
from .oscillator import BoundReport, rollout

THM1_COEF = 86.0
THM2_COEF = 172.0


@dataclass(frozen=True)
class BoundInputs:
    """Class-level size and magnitude bounds.

    ``L_gamma`` and ``L_pi_layer`` default (``None``) to ``w_max^2 B_max^2`` and
    ``w_max B_max`` respectively, so that the per-layer constant raised to
    ``h_pi`` is ``(w_max B_max)^h_pi``.
    """

    w_max: int
    B_max: float
    h_pi: int
    T: float
    N: int
    delta: float
    B_K: float
    B_pi: float
    B_loss: float
    q: int = 1
    p: int = 1
    r: int = 1
    L_gamma: float | None = None
    L_pi_layer: float | None = None

    def __post_init__(self):
        for name in ("w_max", "B_max", "h_pi", "T", "N", "B_K", "B_pi", "B_loss", "q", "p", "r"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float, np.integer, np.floating)) and math.isfinite(v) and v > 0):
                raise ValidationError(f"{name} must be a positive finite number, got {v!r}")
        if not 0.0 < self.delta < 1.0:
            raise ValidationError(f"delta must lie in (0, 1), got {self.delta}")
        for name in ("L_gamma", "L_pi_layer"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v >= 0):
                raise ValidationError(f"{name} must be finite and >= 0")

    @classmethod
    def from_parts(cls, B_phi_K, **kw):
        """Build with ``B_loss = B_pi + B_phi_K``."""
        if B_phi_K < 0:
            raise ValidationError("B_phi_K must be >= 0")
        return cls(B_loss=kw["B_pi"] + B_phi_K, **kw)

    def log_lipschitz(self, h):
        """``(ln L_gamma, ln L_layer^h)`` with the width/magnitude defaults applied."""
        lw, lb = math.log(self.w_max), math.log(self.B_max)
        lg = 2.0 * (lw + lb) if self.L_gamma is None else _safe_log(self.L_gamma)
        ll = lw + lb if self.L_pi_layer is None else _safe_log(self.L_pi_layer)
        return lg, h * ll


@dataclass(frozen=True)
class Thm2Constants:
    L_h: float
    B_beta_g: float
    C_gamma: float
    C_pi: float
    w_gamma: int
    w_pi: int

    def check(self, r, q):
        if min(self.L_h, self.B_beta_g, self.C_gamma, self.C_pi) < 0:
            raise ValidationError("Thm2 constants must be >= 0")
        if self.w_gamma - 8 * r <= 0:
            raise ValidationError(f"w_gamma={self.w_gamma} must exceed 8 r = {8 * r}")
        if self.w_pi - 8 * q <= 0:
            raise ValidationError(f"w_pi={self.w_pi} must exceed 8 q = {8 * q}")


class LogValue(NamedTuple):
    log: float
    value: float          # math.inf when exp(log) overflows

    @property
    def overflow(self):
        return math.isinf(self.value)


def _safe_log(x):
    return math.log(x) if x > 0 else -math.inf


def _log1p_exp(a):
    """``ln(1 + e^a)``, exact for ``a = -inf``."""
    return float(np.logaddexp(0.0, a))


def _wrap(log_value):
    return LogValue(log_value, math.exp(log_value) if log_value < 709.0 else math.inf)


def delta_pi_phi(inputs, h_pi=None):
    """Complexity factor ``Delta`` as ``LogValue(ln Delta, Delta or inf)``.

    ``Delta = 30 w^5.5 h^2 (L_layer^h + 1)(L_gamma + 1) T^2 exp(2T(L_gamma + 1))
    B_K (B^3 + 1) / B_pi``. ``h_pi`` overrides ``inputs.h_pi``.
    """
    h = inputs.h_pi if h_pi is None else h_pi
    log_lg, log_ll = inputs.log_lipschitz(h)
    lg = math.exp(log_lg) if log_lg > -math.inf else 0.0
    lb = math.log(inputs.B_max)
    out = (math.log(30.0) + 5.5 * math.log(inputs.w_max) + 2.0 * math.log(h)
           + _log1p_exp(log_ll) + _log1p_exp(log_lg)
           + 2.0 * math.log(inputs.T) + 2.0 * inputs.T * (lg + 1.0)
           - math.log(inputs.B_pi) + math.log(inputs.B_K) + _log1p_exp(3.0 * lb))
    return _wrap(out)


def log_covering_arg(inputs, h_pi=None):
    """``ln(3 + 6 B_max Delta)`` computed from ``ln Delta``."""
    log_delta = delta_pi_phi(inputs, h_pi).log
    return float(np.logaddexp(math.log(3.0), math.log(6.0) + math.log(inputs.B_max) + log_delta))


def confidence_term(delta):
    """``sqrt(ln(2/delta) / 2)``; defined on ``(0, 1]``."""
    if not 0.0 < delta <= 1.0:
        raise ValidationError(f"delta must lie in (0, 1], got {delta}")
    return math.sqrt(0.5 * math.log(2.0 / delta))


def _estimation(inputs, coef, h_factor, h_delta):
    scale = 3.0 * inputs.T * inputs.q * inputs.B_loss ** 2 / math.sqrt(inputs.N)
    complexity = coef * inputs.w_max ** 1.5 * h_factor * math.sqrt(log_covering_arg(inputs, h_delta))
    return scale * (complexity + confidence_term(inputs.delta))


def estimation_error_thm1(inputs):
    """High-probability estimation term for a generic depth ``h_pi`` read-out."""
    return _estimation(inputs, THM1_COEF, inputs.h_pi, inputs.h_pi)


def generalization_bound_thm1(inputs, eps_y):
    if eps_y < 0:
        raise ValidationError("eps_y must be >= 0")
    return inputs.T * eps_y ** 2 + estimation_error_thm1(inputs)


def approximation_term_thm2(inputs, consts):
    consts.check(inputs.r, inputs.q)
    a = consts.L_h ** 2 * consts.B_beta_g ** 2 * inputs.r ** 2 * consts.C_gamma / (consts.w_gamma - 8 * inputs.r)
    b = inputs.q ** 3 * consts.C_pi / (consts.w_pi - 8 * inputs.q)
    return 16.0 * inputs.T * (a + b)


def estimation_error_thm2(inputs):
    """Estimation term for the two-layer read-out (``Delta`` evaluated at depth 2)."""
    return _estimation(inputs, THM2_COEF, 1, 2)


def generalization_bound_thm2(inputs, consts):
    return approximation_term_thm2(inputs, consts) + estimation_error_thm2(inputs)


# -- empirical perturbation check ---------------------------------------------

def magnitude_factor(B_W_out, B_b_out, B_W, B_b):
    """``[max(B_W, B_b) + 1][B_b (B_W + 1) + 2] + B_b_out + 2``.

    ``B_W``/``B_b`` bound the dynamics network, ``*_out`` the read-out. The
    read-out weight bound is accepted for symmetry but does not enter.
    """
    del B_W_out
    return (max(B_W, B_b) + 1.0) * (B_b * (B_W + 1.0) + 2.0) + B_b_out + 2.0


def parameter_gap(a, b):
    """Largest entry-wise absolute difference between two same-layout networks."""
    if a.layout != b.layout or a.activation != b.activation:
        raise DimensionError("networks differ in layout or activation")
    gap = 0.0
    for wa, wb, ba, bb in zip(a.weights, b.weights, a.biases, b.biases):
        gap = max(gap, float(np.max(np.abs(wa - wb), initial=0.0)), float(np.max(np.abs(ba - bb), initial=0.0)))
    return gap


def perturbation_bound_value(gap, L_layer_h, w_pi, w_gamma_out, w_gamma, h_pi, p, T, L_gamma, B_K, B_fac):
    return (3.0 * gap * (L_layer_h + 1.0) * w_pi * w_gamma_out ** 2 * w_gamma ** 2 * h_pi ** 2 * p
            * T ** 2 * math.exp(2.0 * T * (L_gamma + 1.0)) * (L_gamma + 1.0) * B_K * B_fac)


def verify_perturbation_bound(model_a, model_b, u_set, B_K):
    """Observed ``max_t |y_a - y_b|_1`` over ``u_set`` against the analytic bound.

    Magnitude bounds and Lipschitz constants are the larger of the two models'
    realised values; ``T`` is the longest input duration.
    """
    if (model_a.p, model_a.q, model_a.r, model_a.gamma_inputs) != \
            (model_b.p, model_b.q, model_b.r, model_b.gamma_inputs):
        raise DimensionError("models differ in dimensions")
    gap = max(parameter_gap(model_a.gamma, model_b.gamma), parameter_gap(model_a.pi, model_b.pi))
    if len(u_set) == 0:
        raise ValidationError("u_set is empty")
    observed, T = 0.0, 0.0
    for u in u_set:
        if np.max(np.abs(u.values)) > B_K:
            raise ValidationError("input exceeds B_K")
        ya, _ = rollout(model_a, u)
        yb, _ = rollout(model_b, u)
        observed = max(observed, float(np.max(np.abs(ya.values - yb.values).sum(axis=0))))
        T = max(T, u.duration)
    gammas, pis = (model_a.gamma, model_b.gamma), (model_a.pi, model_b.pi)
    L_gamma = max(mlp.lipschitz_const(g) for g in gammas)
    h_pi = model_a.pi.depth
    L_layer_h = max(mlp.lipschitz_layer(p) for p in pis) ** h_pi
    B_fac = magnitude_factor(max(mlp.max_weight(p) for p in pis), max(mlp.max_bias(p) for p in pis),
                             max(mlp.max_weight(g) for g in gammas), max(mlp.max_bias(g) for g in gammas))
    g_layout, p_layout = model_a.gamma.layout, model_a.pi.layout
    w_gamma = max(g_layout[1:-1]) if len(g_layout) > 2 else 1
    w_pi = max(p_layout[1:-1]) if len(p_layout) > 2 else 1
    if gap == 0.0:
        bound = 0.0
    else:
        with np.errstate(over="ignore"):
            try:
                bound = perturbation_bound_value(gap, L_layer_h, w_pi, g_layout[-1], w_gamma, h_pi,
                                                 model_a.p, T, L_gamma, B_K, B_fac)
            except OverflowError:
                bound = math.inf
    return BoundReport(observed, float(bound), bool(observed <= bound))
