"""Relative errors, power-law fits and empirical distributions."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .oscillator import Trajectory


@dataclass(frozen=True)
class ErrorReport:
    relative_error: float
    n_samples: int
    n_steps: int


def _stack(series):
    """Array ``(L, steps)`` from single-channel Trajectories or an array."""
    if isinstance(series, np.ndarray):
        a = series.astype(np.float64, copy=False)
        return a[None] if a.ndim == 1 else a.reshape(a.shape[0], -1)
    rows = []
    for s in series:
        if isinstance(s, Trajectory):
            if s.channels != 1:
                raise ValidationError("expected single-channel trajectories")
            rows.append(s.values[0])
        else:
            rows.append(np.asarray(s, dtype=np.float64).ravel())
    if not rows:
        raise ValidationError("no samples")
    if len({r.size for r in rows}) != 1:
        raise ValidationError("series lengths differ")
    return np.stack(rows)


def relative_error_response(targets, predictions):
    """``sum (X - X_hat)^2 / sum X^2`` over all samples and grid points."""
    x, xh = _stack(targets), _stack(predictions)
    if x.shape != xh.shape:
        raise ValidationError(f"shape mismatch {x.shape} vs {xh.shape}")
    den = float(np.sum(x * x))
    if den == 0.0:
        raise ValidationError("all-zero targets")
    return ErrorReport(float(np.sum((x - xh) ** 2)) / den, x.shape[0], x.shape[1])


def relative_error_extreme(targets, predictions, T_pred, T_norm, dt):
    """Relative error of peak processes with separate horizons.

    The numerator covers grid indices ``i < round(T_pred / dt)``; the
    denominator covers ``i < round(T_norm / dt)`` of the stored targets.
    ``predictions`` may be shorter than ``targets`` but must span ``T_pred``.
    """
    x, xh = _stack(targets), _stack(predictions)
    if not (0 < T_pred <= T_norm) or not dt > 0:
        raise ValidationError("need 0 < T_pred <= T_norm and dt > 0")
    n_pred = int(round(T_pred / dt))
    n_norm = int(round(T_norm / dt))
    if x.shape[1] < n_norm or xh.shape[1] < n_pred or x.shape[0] != xh.shape[0]:
        raise ValidationError(
            f"horizon mismatch: targets {x.shape}, predictions {xh.shape}, need {n_norm}/{n_pred} steps")
    den = float(np.sum(x[:, :n_norm] ** 2))
    if den == 0.0:
        raise ValidationError("all-zero targets")
    num = float(np.sum((x[:, :n_pred] - xh[:, :n_pred]) ** 2))
    return ErrorReport(num / den, x.shape[0], n_pred)


@dataclass(frozen=True)
class PowerLaw:
    exponent: float
    prefactor: float
    r_squared: float


def fit_power_law(points):
    """OLS on ``(ln x, ln y)``: ``y ~ prefactor * x^exponent``."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValidationError("need at least two (x, y) points")
    if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
        raise ValidationError("power-law fit needs positive finite values")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    sxx = float(np.sum((lx - lx.mean()) ** 2))
    if sxx == 0.0:
        raise ValidationError("x values must not all coincide")
    slope = float(np.sum((lx - lx.mean()) * (ly - ly.mean()))) / sxx
    icpt = float(ly.mean() - slope * lx.mean())
    resid = ly - (icpt + slope * lx)
    syy = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if syy == 0.0 else 1.0 - float(np.sum(resid ** 2)) / syy
    return PowerLaw(slope, math.exp(icpt), r2)


class EmpiricalCdf:
    """Right-continuous step function ``F(x) = #{s <= x} / n``."""

    def __init__(self, samples):
        self.sorted = np.sort(np.asarray(samples, dtype=np.float64))

    def __call__(self, x):
        return np.searchsorted(self.sorted, x, side="right") / self.sorted.size


@dataclass
class Distribution:
    grid: np.ndarray
    density: np.ndarray
    cdf: EmpiricalCdf
    method: str
    bandwidth: float | None = None


def silverman_bandwidth(x):
    n = x.size
    sd = float(np.std(x, ddof=1))
    iqr = float(np.subtract(*np.percentile(x, [75, 25])))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * n ** (-0.2)


def empirical_distribution(samples, n_bins=None, n_grid=512):
    """Exact empirical CDF plus a density estimate.

    The density is a Gaussian KDE with Silverman's bandwidth on a grid
    extending 5 bandwidths past the data, renormalised to unit trapezoid
    mass. With ``n_bins`` (or when the bandwidth collapses because all
    samples coincide) a histogram is returned instead, as bin centres.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValidationError("need at least two samples")
    if not np.all(np.isfinite(x)):
        raise ValidationError("samples must be finite")
    cdf = EmpiricalCdf(x)
    bw = silverman_bandwidth(x) if n_bins is None else 0.0
    if bw > 0.0:
        grid = np.linspace(x.min() - 5 * bw, x.max() + 5 * bw, n_grid)
        dens = np.zeros_like(grid)
        chunk = max(1, 2_000_000 // n_grid)
        for s in range(0, x.size, chunk):
            z = (grid[:, None] - x[None, s:s + chunk]) / bw
            dens += np.exp(-0.5 * z * z).sum(axis=1)
        dens /= x.size * bw * math.sqrt(2.0 * math.pi)
        dens /= np.trapezoid(dens, grid)
        return Distribution(grid, dens, cdf, "kde", bw)
    bins = n_bins or 10
    lo, hi = x.min(), x.max()
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(x, bins=bins, range=(lo, hi))
    width = edges[1] - edges[0]
    dens = counts / (x.size * width)
    # pad with zero-density endpoints so trapezoid mass equals histogram mass
    grid = np.concatenate([[edges[0] - 0.5 * width], 0.5 * (edges[:-1] + edges[1:]), [edges[-1] + 0.5 * width]])
    dens = np.concatenate([[0.0], dens, [0.0]])
    return Distribution(grid, dens, cdf, "histogram")


def ks_distance(a, b):
    """Two-sample Kolmogorov-Smirnov statistic ``sup |F_a - F_b|``."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / a.size
    fb = np.searchsorted(b, pts, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))
