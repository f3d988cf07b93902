"""Five-storey Bouc-Wen shear building under uniform base acceleration.

State per storey: displacement ``X``, velocity ``V`` and hysteretic
displacement ``Z``. Integration is classical RK4 with the excitation at the
half step taken from the piecewise-linear interpolant of the samples, so a
recorded series is treated as a continuous piecewise-linear signal.

Batched routines keep every reduction in a fixed elementwise order so that a
sample's response does not depend on which other samples share its batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, DivergenceError, ValidationError
from .oscillator import Trajectory

FULL_STIFFNESS = "full"
ELASTIC_STIFFNESS = "elastic"


@dataclass(frozen=True)
class BoucWenConfig:
    n_dof: int = 5
    m: float = 1382.4
    k: float = 1.7e6
    zeta: float = 0.05
    lam: float = 0.01
    beta: float = 2.0
    gamma_bw: float = 2.0
    s_exp: float = 3.0
    influence: tuple | None = None
    damping_stiffness: str = FULL_STIFFNESS

    def __post_init__(self):
        if self.m <= 0 or self.k <= 0:
            raise ValidationError("m and k must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError("lam must lie in [0, 1]")
        if self.s_exp < 1.0:
            raise ValidationError("s_exp must be >= 1")
        if self.zeta < 0:
            raise ValidationError("zeta must be non-negative")
        if self.n_dof < 1:
            raise ValidationError("n_dof must be positive")
        if self.damping_stiffness not in (FULL_STIFFNESS, ELASTIC_STIFFNESS):
            raise ValidationError(f"unknown damping_stiffness {self.damping_stiffness!r}")
        if self.influence is not None and len(self.influence) != self.n_dof:
            raise ValidationError("influence vector length must equal n_dof")

    @property
    def influence_vector(self):
        if self.influence is None:
            return np.ones(self.n_dof)
        return np.asarray(self.influence, dtype=np.float64)


@dataclass
class Matrices:
    M: np.ndarray
    K: np.ndarray
    K_tilde: np.ndarray
    C: np.ndarray
    omega: np.ndarray = field(default=None)
    modes: np.ndarray = field(default=None)


def jacobi_eigh(a, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi eigen-decomposition of a small symmetric matrix.

    Returns ``(eigenvalues ascending, eigenvectors as columns)``.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ValidationError("jacobi_eigh needs a symmetric square matrix")
    v = np.eye(n)
    scale = np.sqrt(np.sum(a * a))
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum((a - np.diag(np.diag(a))) ** 2))
        if off <= tol * scale or scale == 0.0:
            order = np.argsort(np.diag(a))
            return np.diag(a)[order].copy(), v[:, order]
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                a[p, q] = a[q, p] = 0.0
                v = v @ rot
    raise ConvergenceError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")


def chain_matrices(n, m, k):
    M = m * np.eye(n)
    K = np.zeros((n, n))
    K_tilde = np.zeros((n, n))
    for i in range(n):
        K[i, i] = 2 * k if i < n - 1 else k
        if i + 1 < n:
            K[i, i + 1] = K[i + 1, i] = -k
            K_tilde[i, i + 1] = -k
        K_tilde[i, i] = k
    return M, K, K_tilde


def build_matrices(cfg):
    """Mass, stiffness, hysteretic stiffness and modal damping matrices.

    Damping gives every mode the ratio ``cfg.zeta``: with mass-normalised
    modes ``Phi`` of ``(K, M)``, ``C = M Phi diag(2 zeta omega) Phi^T M``.
    """
    M, K, K_tilde = chain_matrices(cfg.n_dof, cfg.m, cfg.k)
    K_damp = K if cfg.damping_stiffness == FULL_STIFFNESS else cfg.lam * K
    m_isqrt = 1.0 / np.sqrt(np.diag(M))
    lam_sq, vecs = jacobi_eigh(K_damp * np.outer(m_isqrt, m_isqrt))
    omega = np.sqrt(np.clip(lam_sq, 0.0, None))
    phi = vecs * m_isqrt[:, None]
    C = M @ phi @ np.diag(2.0 * cfg.zeta * omega) @ phi.T @ M
    C = 0.5 * (C + C.T)
    return Matrices(M, K, K_tilde, C, omega, phi)


def _matvec(A, x):
    """Row-batched ``x @ A.T`` accumulated column by column (fixed summation order)."""
    out = x[..., 0:1] * A[:, 0]
    for j in range(1, A.shape[1]):
        out = out + x[..., j:j + 1] * A[:, j]
    return out


def _inter_story(v):
    d = v.copy()
    d[..., 1:] = v[..., 1:] - v[..., :-1]
    return d


def bouc_wen_rhs(X, V, Z, u_e, cfg, mats):
    """Time derivatives ``(dX, dV, dZ)`` of the Bouc-Wen state.

    Works on single states ``(n,)`` or batches ``(B, n)``; ``u_e`` is a scalar
    or ``(B,)`` ground acceleration.
    """
    X, V, Z = (np.asarray(a, dtype=np.float64) for a in (X, V, Z))
    minv = 1.0 / np.diag(mats.M)
    u_e = np.asarray(u_e, dtype=np.float64)[..., None]
    force = (_matvec(mats.C, V) + cfg.lam * _matvec(mats.K, X)
             + (1.0 - cfg.lam) * _matvec(mats.K_tilde, Z))
    dV = -cfg.influence_vector * u_e - minv * force
    drift = _inter_story(V)
    absz = np.abs(Z)
    s = cfg.s_exp
    dZ = drift - cfg.beta * np.abs(drift) * absz ** (s - 1.0) * Z - cfg.gamma_bw * drift * absz ** s
    return V.copy(), dV, dZ


def _rk4(X, V, Z, ua, um, ub, h, cfg, mats):
    """One classical RK4 step of length ``h`` (scalar or ``(B, 1)``)."""
    h2 = 0.5 * h
    k1 = bouc_wen_rhs(X, V, Z, ua, cfg, mats)
    k2 = bouc_wen_rhs(X + h2 * k1[0], V + h2 * k1[1], Z + h2 * k1[2], um, cfg, mats)
    k3 = bouc_wen_rhs(X + h2 * k2[0], V + h2 * k2[1], Z + h2 * k2[2], um, cfg, mats)
    k4 = bouc_wen_rhs(X + h * k3[0], V + h * k3[1], Z + h * k3[2], ub, cfg, mats)
    h6 = h / 6.0
    return (X + h6 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            V + h6 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
            Z + h6 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]))


NEWTON_ITERS = 3


def _split_step(X, V, Z, ua, ub, dt, cfg, mats):
    """Advance rows whose storey drift velocity reverses inside the step.

    The hysteresis law is only continuous (not smooth) in the drift velocity
    at zero, which caps fixed-step RK4 at second order. Each reversal is
    located by Newton iteration on the sub-step length and the step is split
    there, so every RK4 sub-step integrates a smooth right-hand side.
    """
    b, n = X.shape
    tau = np.zeros(b)
    skip = np.full(b, -1)
    rows = np.arange(b)
    slope = (ub - ua) / dt

    def u_at(t):
        return ua[rows] + slope[rows] * t

    for _ in range(n + 1):
        h = dt - tau
        t0 = tau[rows]
        hr = h[rows][:, None]
        ur0, urm, ur1 = u_at(t0), u_at(t0 + 0.5 * hr[:, 0]), u_at(t0 + hr[:, 0])
        Xe, Ve, Ze = _rk4(X[rows], V[rows], Z[rows], ur0, urm, ur1, hr, cfg, mats)
        d0 = _inter_story(V[rows])
        d1 = _inter_story(Ve)
        flip = (d0 * d1) < 0.0
        flip[np.arange(rows.size), skip[rows].clip(0)] &= skip[rows] < 0
        has = flip.any(axis=1)
        done = rows[~has]
        X[done], V[done], Z[done] = Xe[~has], Ve[~has], Ze[~has]
        tau[done] = dt
        if not has.any():
            return
        rows = rows[has]
        d0, d1, flip, hr, t0 = d0[has], d1[has], flip[has], hr[has], t0[has]
        with np.errstate(divide="ignore", invalid="ignore"):
            guess = np.where(flip, d0 / (d0 - d1), np.inf)
        j = np.argmin(guess, axis=1)
        sel = np.arange(rows.size)
        theta = guess[sel, j]
        X0, V0, Z0 = X[rows], V[rows], Z[rows]
        for _ in range(NEWTON_ITERS):
            hs = (theta * hr[:, 0])[:, None]
            Xs, Vs, Zs = _rk4(X0, V0, Z0, u_at(t0), u_at(t0 + 0.5 * hs[:, 0]), u_at(t0 + hs[:, 0]),
                              hs, cfg, mats)
            _, dV, _ = bouc_wen_rhs(Xs, Vs, Zs, u_at(t0 + hs[:, 0]), cfg, mats)
            g = _inter_story(Vs)[sel, j]
            dg = _inter_story(dV)[sel, j] * hr[:, 0]
            with np.errstate(divide="ignore", invalid="ignore"):
                step = np.where(np.abs(dg) > 0.0, g / dg, 0.0)
            theta = np.clip(theta - step, 0.0, 1.0)
        hs = (theta * hr[:, 0])[:, None]
        X[rows], V[rows], Z[rows] = _rk4(X0, V0, Z0, u_at(t0), u_at(t0 + 0.5 * hs[:, 0]),
                                         u_at(t0 + hs[:, 0]), hs, cfg, mats)
        tau[rows] = t0 + hs[:, 0]
        skip[rows] = j
    # more reversals than storeys in one step: finish with a plain sub-step
    hr = (dt - tau[rows])[:, None]
    t0 = tau[rows]
    X[rows], V[rows], Z[rows] = _rk4(X[rows], V[rows], Z[rows], u_at(t0), u_at(t0 + 0.5 * hr[:, 0]),
                                     u_at(t0 + hr[:, 0]), hr, cfg, mats)


def simulate_batch(cfg, u, dt, mats=None, full_state=False, split_reversals=True):
    """RK4 response for a batch of excitations ``u`` shaped ``(B, steps)``.

    Returns ``(B, 5, steps)`` displacements, or ``(B, 15, steps)`` stacked
    ``[X, V, Z]`` when ``full_state`` is set. With ``split_reversals`` a step
    in which a storey drift velocity changes sign is split at the reversal
    (see :func:`_split_step`); otherwise every step is one plain RK4 step.
    """
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    if not dt > 0:
        raise ValidationError("dt must be positive")
    mats = mats or build_matrices(cfg)
    b, steps = u.shape
    n = cfg.n_dof
    X = np.zeros((b, n))
    V = np.zeros((b, n))
    Z = np.zeros((b, n))
    out = np.zeros((b, 3 * n if full_state else n, steps))
    for i in range(steps - 1):
        ua, ub = u[:, i], u[:, i + 1]
        Xn, Vn, Zn = _rk4(X, V, Z, ua, 0.5 * (ua + ub), ub, dt, cfg, mats)
        if split_reversals:
            rev = ((_inter_story(V) * _inter_story(Vn)) < 0.0).any(axis=1)
            if rev.any():
                Xs, Vs, Zs = X[rev], V[rev], Z[rev]
                _split_step(Xs, Vs, Zs, ua[rev], ub[rev], dt, cfg, mats)
                Xn[rev], Vn[rev], Zn[rev] = Xs, Vs, Zs
        X, V, Z = Xn, Vn, Zn
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(V)) and np.all(np.isfinite(Z))):
            raise DivergenceError("Bouc-Wen state became non-finite", step=i + 1)
        out[:, :n, i + 1] = X
        if full_state:
            out[:, n:2 * n, i + 1] = V
            out[:, 2 * n:, i + 1] = Z
    return out


def simulate(cfg, u, full_state=False):
    """Single-excitation response as a :class:`Trajectory` (channels X1..X5[, V, Z])."""
    if u.channels != 1:
        raise ValidationError("excitation must be a single channel")
    out = simulate_batch(cfg, u.values, u.dt, full_state=full_state)
    return Trajectory(u.dt, out[0], u.t0)


def extreme_process(x, channel=0):
    """Running peak ``E(t_i) = max_{j <= i} |x(t_j)|`` of one channel."""
    if isinstance(x, Trajectory):
        if not 0 <= channel < x.channels:
            raise ValidationError(f"channel {channel} out of range")
        return Trajectory(x.dt, np.maximum.accumulate(np.abs(x.values[channel]))[None], x.t0)
    return np.maximum.accumulate(np.abs(np.asarray(x, dtype=np.float64)), axis=-1)
