"""Independent reference implementations used only by the tests.

Each oracle recomputes a quantity along a different route from the package:
explicit Python loops instead of vectorised code, library solvers instead of
hand-written ones, or arbitrary precision instead of log-space tricks.
"""
from __future__ import annotations

import math

import mpmath
import numpy as np
from scipy import integrate, signal


# -- networks -------------------------------------------------------------------

def loop_mlp(params, x):
    """Scalar-loop forward pass of one input vector."""
    h = [float(v) for v in x]
    last = params.depth - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        out = []
        for i in range(w.shape[0]):
            s = float(b[i])
            for j in range(w.shape[1]):
                s += float(w[i, j]) * h[j]
            if k < last:
                s = max(s, 0.0) + (params.alpha * min(s, 0.0) if params.activation == "prelu" else 0.0)
            out.append(s)
        h = out
    return np.array(h)


def loop_rollout(model, u, dt):
    """Heun rollout of one input ``u`` shaped ``(p, steps)`` with loop networks.

    Returns ``(y (q, steps), z (steps, 2r))``.
    """
    r = model.r
    steps = u.shape[1]
    x = np.zeros(r)
    v = np.zeros(r)
    zs = [np.zeros(2 * r)]

    def gamma(x_, v_, u_):
        feats = np.concatenate([x_, v_, u_]) if model.gamma_inputs == "full" else np.concatenate([x_, u_])
        return loop_mlp(model.gamma, feats)

    for i in range(steps - 1):
        k1x, k1v = v, gamma(x, v, u[:, i])
        k2x = v + dt * k1v
        k2v = gamma(x + dt * k1x, v + dt * k1v, u[:, i + 1])
        x = x + 0.5 * dt * (k1x + k2x)
        v = v + 0.5 * dt * (k1v + k2v)
        zs.append(np.concatenate([x, v]))
    z = np.array(zs)
    y = np.array([loop_mlp(model.pi, np.concatenate([z[i, :r], u[:, 0], [dt * i]])) for i in range(steps)])
    return y.T, z


def central_difference(fun, theta, step=1e-6):
    """Gradient of a scalar function by central differences, one coordinate at a time."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        g[i] = (fun(theta + e) - fun(theta - e)) / (2.0 * step)
    return g


# -- structures -------------------------------------------------------------------

def modal_linear_response(n, m, k, zeta, u, dt):
    """Linear shear-chain response to base acceleration by modal superposition.

    Uses LAPACK ``eigh`` for the modes and ``scipy.signal.lsim`` (exact for
    piecewise-linear input) for each modal coordinate. Returns ``(n, steps)``.
    """
    K = np.zeros((n, n))
    for i in range(n):
        K[i, i] = 2 * k if i < n - 1 else k
        if i + 1 < n:
            K[i, i + 1] = K[i + 1, i] = -k
    lam, vecs = np.linalg.eigh(K / m)
    omega = np.sqrt(lam)
    phi = vecs / math.sqrt(m)                         # mass-normalised
    t = dt * np.arange(u.size)
    X = np.zeros((n, u.size))
    for j in range(n):
        gamma_j = -m * phi[:, j].sum()                # modal participation of -M 1 u
        sys = signal.lti([[0.0, 1.0], [-omega[j] ** 2, -2 * zeta * omega[j]]],
                         [[0.0], [1.0]], [[1.0, 0.0]], [[0.0]])
        _, q, _ = signal.lsim(sys, gamma_j * u, t)
        X += np.outer(phi[:, j], q)
    return X


# -- excitation -------------------------------------------------------------------

def wv_variance_quad(amplitude, decay, t):
    """``int_0^inf W(t, f) df`` by adaptive quadrature."""
    val, _ = integrate.quad(lambda f: amplitude * t * t * f * f * math.exp(-decay * (1 + f * f) * t),
                            0.0, math.inf, epsabs=0.0, epsrel=1e-13, limit=200)
    return val


# -- bounds ---------------------------------------------------------------------

def mp_delta(w, B, h, T, B_K, B_pi, L_gamma=None, L_layer=None, dps=60):
    """``Delta`` evaluated directly in arbitrary precision."""
    with mpmath.workdps(dps):
        w, B, h, T = mpmath.mpf(w), mpmath.mpf(B), mpmath.mpf(h), mpmath.mpf(T)
        lg = w ** 2 * B ** 2 if L_gamma is None else mpmath.mpf(L_gamma)
        llh = (w * B) ** h if L_layer is None else mpmath.mpf(L_layer) ** h
        return (30 * w ** mpmath.mpf("5.5") * h ** 2 * (llh + 1) * (lg + 1) * T ** 2
                * mpmath.exp(2 * T * (lg + 1)) * mpmath.mpf(B_K) * (B ** 3 + 1) / mpmath.mpf(B_pi))


def mp_estimation(coef, h_factor, h_delta, w, B, T, N, delta, B_K, B_pi, B_loss, q=1, dps=60):
    with mpmath.workdps(dps):
        d = mp_delta(w, B, h_delta, T, B_K, B_pi, dps=dps)
        comp = coef * mpmath.mpf(w) ** mpmath.mpf("1.5") * h_factor * mpmath.sqrt(mpmath.log(3 + 6 * mpmath.mpf(B) * d))
        conf = mpmath.sqrt(mpmath.log(2 / mpmath.mpf(delta)) / 2)
        return 3 * mpmath.mpf(T) * q * mpmath.mpf(B_loss) ** 2 / mpmath.sqrt(N) * (comp + conf)


def mp_thm2_approx(T, L_h, B_beta, r, C_gamma, w_gamma, q, C_pi, w_pi, dps=60):
    with mpmath.workdps(dps):
        T, L_h, B_beta, C_gamma, C_pi = (mpmath.mpf(v) for v in (T, L_h, B_beta, C_gamma, C_pi))
        return 16 * T * (L_h ** 2 * B_beta ** 2 * r ** 2 * C_gamma / (w_gamma - 8 * r)
                         + mpmath.mpf(q) ** 3 * C_pi / (w_pi - 8 * q))
