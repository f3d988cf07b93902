"""Nonstationary Gaussian ground acceleration from an evolutionary spectrum.

The target time-frequency density is ``W(t, f) = A t^2 f^2 exp(-c (1 + f^2) t)``.
Samples are synthesised line by line,

    u(t) = sum_k sqrt(W(t, f_k) df) [a_k cos(2 pi f_k t) + b_k sin(2 pi f_k t)],

with midpoint lines ``f_k = (k - 1/2) df`` and independent standard normal
``a_k, b_k``, so that ``Var u(t) = sum_k W(t, f_k) df ~ int_0^inf W(t, f) df``.

Randomness: sample ``l`` of master seed ``s`` uses a Philox counter-based
stream keyed by ``s XOR l``; its uniforms are turned into normals by
Box-Muller. Any subset of samples can thus be drawn in any order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .oscillator import Trajectory

CHUNK = 64
HZ = "hz"
RAD_S = "rad/s"


@dataclass(frozen=True)
class WvSpectrum:
    amplitude: float = 2500.0
    decay: float = 0.3
    f_max: float = 10.0
    n_freq: int = 200
    units: str = HZ

    def __post_init__(self):
        if self.amplitude <= 0 or self.decay <= 0 or self.f_max <= 0:
            raise ValidationError("amplitude, decay and f_max must be positive")
        if int(self.n_freq) < 1:
            raise ValidationError("n_freq must be >= 1")
        if self.units not in (HZ, RAD_S):
            raise ValidationError(f"units must be {HZ!r} or {RAD_S!r}")

    @property
    def df(self):
        return self.f_max / self.n_freq

    @property
    def freqs(self):
        return (np.arange(1, self.n_freq + 1) - 0.5) * self.df

    def angular(self, f):
        return 2.0 * np.pi * f if self.units == HZ else f


def wv_value(spec, t, f):
    t = np.asarray(t, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    return spec.amplitude * t ** 2 * f ** 2 * np.exp(-spec.decay * (1.0 + f ** 2) * t)


def variance_oracle(spec, t):
    """Closed-form ``int_0^inf W(t, f) df = A t^2 e^{-ct} sqrt(pi) / (4 (ct)^{3/2})``."""
    if t <= 0:
        raise ValidationError("variance_oracle needs t > 0")
    a = spec.decay * t
    return spec.amplitude * t ** 2 * math.exp(-a) * math.sqrt(math.pi) / (4.0 * a ** 1.5)


def sample_seed(seed, index):
    return (int(seed) ^ int(index)) & 0xFFFFFFFFFFFFFFFF


def standard_normals(seed, n):
    """``n`` standard normals from a Philox stream via Box-Muller."""
    gen = np.random.Generator(np.random.Philox(key=seed))
    m = (n + 1) // 2
    u = gen.random(2 * m)
    u1 = 1.0 - u[:m]           # (0, 1], keeps log finite
    u2 = u[m:]
    rad = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([rad * np.cos(2.0 * np.pi * u2), rad * np.sin(2.0 * np.pi * u2)])
    return z[:n]


def _check_grid(spec, dt, steps):
    if not dt > 0 or int(steps) < 1:
        raise ValidationError("grid needs dt > 0 and steps >= 1")
    nyquist = 1.0 / (2.0 * dt) if spec.units == HZ else np.pi / dt
    if spec.f_max > nyquist + 1e-12:
        raise ValidationError(f"f_max={spec.f_max} exceeds the Nyquist limit {nyquist}")


def _basis(spec, dt, steps):
    t = dt * np.arange(steps)
    f = spec.freqs
    amp = np.sqrt(wv_value(spec, t[None, :], f[:, None]) * spec.df)
    phase = spec.angular(f)[:, None] * t[None, :]
    return amp * np.cos(phase), amp * np.sin(phase)


def sample_batch(spec, seed, dt, steps, indices):
    """Samples for the given indices as an array ``(len(indices), steps)``.

    Lines are accumulated elementwise in a fixed order, so each row is
    bit-identical to drawing that index alone.
    """
    _check_grid(spec, dt, steps)
    indices = list(indices)
    cos_b, sin_b = _basis(spec, dt, int(steps))
    coef = np.stack([standard_normals(sample_seed(seed, i), 2 * spec.n_freq) for i in indices]) \
        if indices else np.zeros((0, 2 * spec.n_freq))
    out = np.zeros((len(indices), int(steps)))
    tmp = np.empty((min(CHUNK, len(indices)), int(steps)))
    for start in range(0, len(indices), CHUNK):
        a = coef[start:start + CHUNK, :spec.n_freq]
        b = coef[start:start + CHUNK, spec.n_freq:]
        acc = out[start:start + CHUNK]
        t = tmp[:acc.shape[0]]
        for k in range(spec.n_freq):
            np.multiply(a[:, k:k + 1], cos_b[k], out=t)
            acc += t
            np.multiply(b[:, k:k + 1], sin_b[k], out=t)
            acc += t
    return out


def sample(spec, seed, dt, steps, index=0):
    """One excitation record as a single-channel :class:`Trajectory` (m/s^2)."""
    return Trajectory(dt, sample_batch(spec, seed, dt, steps, [index]))
