"""Second-order neural oscillator ``x'' = Gamma(x, x', u)``, ``y = Pi(x, u(0), t)``.

Time stepping is the explicit two-stage Heun scheme on ``z = [x; x']`` with
``z(0) = 0``. Gradients are the exact adjoint of that discrete scheme
(discretize-then-optimize), so finite-difference checks agree to rounding.

Batched arrays use the layout ``u: (B, p, steps)``, ``y: (B, q, steps)``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import mlp
from .errors import DimensionError, DivergenceError, ValidationError

FULL_INPUTS = "full"   # Gamma sees [x, x', u]
STATE_INPUTS = "x_u"   # Gamma sees [x, u]
GAMMA_INPUT_MODES = (FULL_INPUTS, STATE_INPUTS)


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled signal, ``values`` shaped ``[channels x steps]``."""

    dt: float
    values: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "values", values)
        if not self.dt > 0:
            raise ValidationError(f"dt must be positive, got {self.dt}")
        if values.shape[1] < 1:
            raise ValidationError("trajectory needs at least one sample")
        if not np.all(np.isfinite(values)):
            raise ValidationError("trajectory contains non-finite values")

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def steps(self):
        return self.values.shape[1]

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.steps)

    @property
    def duration(self):
        return self.dt * (self.steps - 1)


@dataclass(frozen=True)
class OscillatorModel:
    gamma: mlp.MlpParams
    pi: mlp.MlpParams
    p: int
    q: int
    r: int
    gamma_inputs: str = FULL_INPUTS

    def __post_init__(self):
        if self.gamma_inputs not in GAMMA_INPUT_MODES:
            raise ValidationError(f"unknown gamma input mode {self.gamma_inputs!r}")
        want_in = 2 * self.r + self.p if self.gamma_inputs == FULL_INPUTS else self.r + self.p
        if self.gamma.layout[0] != want_in:
            raise DimensionError(f"gamma input width {self.gamma.layout[0]} != {want_in}", layer=0)
        if self.gamma.layout[-1] != self.r:
            raise DimensionError(f"gamma output width {self.gamma.layout[-1]} != r={self.r}",
                                 layer=self.gamma.depth - 1)
        if self.pi.layout[0] != self.r + self.p + 1:
            raise DimensionError(f"pi input width {self.pi.layout[0]} != r+p+1={self.r + self.p + 1}",
                                 layer=0)
        if self.pi.layout[-1] != self.q:
            raise DimensionError(f"pi output width {self.pi.layout[-1]} != q={self.q}",
                                 layer=self.pi.depth - 1)

    def to_vector(self):
        return np.concatenate([self.gamma.to_vector(), self.pi.to_vector()])

    def with_vector(self, vec):
        n = self.gamma.n_params
        return OscillatorModel(self.gamma.with_vector(vec[:n]), self.pi.with_vector(vec[n:]),
                               self.p, self.q, self.r, self.gamma_inputs)

    @property
    def n_params(self):
        return self.gamma.n_params + self.pi.n_params


def init_oscillator(seed, p, q, r, gamma_hidden, pi_hidden, activation=mlp.RELU,
                    gamma_inputs=FULL_INPUTS):
    """Build a model with both networks drawn from the same ``seed``."""
    g_in = 2 * r + p if gamma_inputs == FULL_INPUTS else r + p
    if np.isscalar(pi_hidden):
        pi_hidden = [pi_hidden]
    gamma = mlp.init_mlp(seed, [g_in, gamma_hidden, r], activation)
    pi = mlp.init_mlp(seed, [r + p + 1, *pi_hidden, q], activation)
    return OscillatorModel(gamma, pi, p, q, r, gamma_inputs)


@dataclass
class RolloutRecord:
    """Everything the reverse sweep needs.

    ``z`` is ``(B, steps, 2r)`` with ``z[:, 0] == 0``. ``acts[k]`` holds the
    inputs of Gamma layer ``k`` and ``pre[k]`` the pre-activations of hidden
    layer ``k``, both shaped ``(steps - 1, 2, B, width)``: index ``[i, 0]`` is
    the first Heun stage of step ``i -> i+1`` and ``[i, 1]`` the second.
    """

    z: np.ndarray
    dt: float
    t0: float
    acts: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    pi_cache: mlp.MlpCache | None = None

    @property
    def steps(self):
        return self.z.shape[1]


def _check_u(model, u):
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 3 or u.shape[1] != model.p:
        raise DimensionError(f"input must be (B, p={model.p}, steps), got {u.shape}")
    if u.shape[2] < 1:
        raise ValidationError("input needs at least one sample")
    return u


def pi_inputs(model, x, u0, times):
    """Assemble ``[x(t_i), u(0), t_i]`` rows; ``x`` is ``(B, steps, r)``."""
    b, s, _ = x.shape
    u0b = np.broadcast_to(u0[:, None, :], (b, s, model.p))
    tb = np.broadcast_to(times[None, :, None], (b, s, 1))
    return np.concatenate([x, u0b, tb], axis=2).reshape(b * s, model.r + model.p + 1)


class _GammaStage:
    """Gamma evaluated into preallocated per-stage buffers.

    Writing layer inputs and pre-activations straight into ``(slots, 2, B, w)``
    arrays keeps the per-step numpy call count low, and lets the reverse sweep
    form each weight gradient as a single matmul over all stages.
    """

    def __init__(self, model, b, slots):
        g = model.gamma
        self.r = model.r
        self.full = model.gamma_inputs == FULL_INPUTS
        self.relu = g.activation == mlp.RELU
        self.alpha = g.alpha
        self.weights = g.weights
        self.w_t = [w.T for w in g.weights]
        self.biases = g.biases
        widths = g.layout
        self.acts = [np.empty((slots, 2, b, widths[k])) for k in range(g.depth)]
        self.pre = [np.empty((slots, 2, b, widths[k + 1])) for k in range(g.depth - 1)]

    def forward(self, j, s, x, v, u):
        r = self.r
        h = self.acts[0][j, s]
        h[:, :r] = x
        if self.full:
            h[:, r:2 * r] = v
            h[:, 2 * r:] = u
        else:
            h[:, r:] = u
        for k in range(len(self.pre)):
            z = self.pre[k][j, s]
            np.matmul(h, self.w_t[k], out=z)
            z += self.biases[k]
            h = self.acts[k + 1][j, s]
            np.maximum(z, 0.0, out=h)
            if not self.relu:
                h += self.alpha * np.minimum(z, 0.0)
        return h @ self.w_t[-1] + self.biases[-1]


def rollout_batch(model, u, dt, t0=0.0, keep_record=True):
    """Integrate a batch of inputs; returns ``(y, record)`` with ``y`` of shape ``(B, q, steps)``.

    With ``keep_record=False`` the Gamma activations are overwritten step by
    step and the record only carries the states.
    """
    u = _check_u(model, u)
    if not dt > 0:
        raise ValidationError("dt must be positive")
    b, _, steps = u.shape
    r = model.r
    z = np.zeros((b, steps, 2 * r))
    rec = RolloutRecord(z=z, dt=dt, t0=t0)
    stage = _GammaStage(model, b, max(steps - 1, 1) if keep_record else 1)
    x = np.zeros((b, r))
    v = np.zeros((b, r))
    half = 0.5 * dt
    # overflow shows up as non-finite states and is reported below
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(steps - 1):
            j = i if keep_record else 0
            g1 = stage.forward(j, 0, x, v, u[:, :, i])
            x_pred = x + dt * v
            v_pred = v + dt * g1
            g2 = stage.forward(j, 1, x_pred, v_pred, u[:, :, i + 1])
            x = x + half * (v + v_pred)
            v = v + half * (g1 + g2)
            z[:, i + 1, :r] = x
            z[:, i + 1, r:] = v
    if keep_record:
        rec.acts = [a[:steps - 1] for a in stage.acts]
        rec.pre = [p[:steps - 1] for p in stage.pre]
    if not np.all(np.isfinite(z)):
        bad = int(np.argmax(~np.all(np.isfinite(z), axis=(0, 2))))
        raise DivergenceError("oscillator state became non-finite", step=bad)
    times = t0 + dt * np.arange(steps)
    y_flat, rec.pi_cache = mlp._forward(model.pi, pi_inputs(model, z[:, :, :r], u[:, :, 0], times))
    y = y_flat.reshape(b, steps, model.q).transpose(0, 2, 1)
    return y, rec


def predict(model, u, dt, t0=0.0, chunk=512):
    """Forward-only rollout in fixed-size chunks."""
    u = _check_u(model, u)
    out = []
    for start in range(0, u.shape[0], chunk):
        y, _ = rollout_batch(model, u[start:start + chunk], dt, t0, keep_record=False)
        out.append(y)
    return np.concatenate(out, axis=0)


def rollout_vjp_batch(model, u, record, y_bar):
    """Gradient of ``sum(y_bar * y)`` w.r.t. all parameters as a flat vector ``[gamma, pi]``."""
    u = _check_u(model, u)
    y_bar = np.asarray(y_bar, dtype=np.float64)
    b, steps, two_r = record.z.shape
    if u.shape[0] != b or u.shape[2] != steps or two_r != 2 * model.r:
        raise DimensionError("rollout record does not match the inputs (stale record?)")
    if y_bar.shape != (b, model.q, steps):
        raise DimensionError(f"cotangent shape {y_bar.shape} != {(b, model.q, steps)}")
    gamma = model.gamma
    if len(record.acts) != gamma.depth or record.acts[0].shape[:3] != (steps - 1, 2, b):
        raise DimensionError("rollout record has no activations for these steps")
    r = model.r
    dt = record.dt
    half = 0.5 * dt
    full = model.gamma_inputs == FULL_INPUTS
    relu = gamma.activation == mlp.RELU
    depth = gamma.depth

    g_flat = y_bar.transpose(0, 2, 1).reshape(b * steps, model.q)
    pin_bar, pgw, pgb, pga = mlp._vjp(model.pi, record.pi_cache, g_flat)
    pi_grad = mlp.grad_vector(model.pi, pgw, pgb, pga)
    x_out_bar = pin_bar[:, :r].reshape(b, steps, r)

    # outs[k][i, s] is the cotangent of layer k's affine output at that stage
    outs = [np.empty((steps - 1, 2, b, w.shape[0])) for w in gamma.weights]
    ga = 0.0

    def pullback(i, s, g):
        nonlocal ga
        for k in range(depth - 1, -1, -1):
            outs[k][i, s] = g
            g = g @ gamma.weights[k]
            if k > 0:
                z = record.pre[k - 1][i, s]
                if relu:
                    np.multiply(g, z > 0.0, out=g)
                else:
                    ga += float(np.sum(g * np.minimum(z, 0.0)))
                    g = g * np.where(z > 0.0, 1.0, gamma.alpha)
        return g

    x_bar = x_out_bar[:, steps - 1].copy()
    v_bar = np.zeros((b, r))
    for i in range(steps - 2, -1, -1):
        # x' = x + h/2 (v + v_pred); v' = v + h/2 (g1 + g2); v_pred = v + dt g1
        vp_bar = half * x_bar
        g_bar = half * v_bar
        v_bar = v_bar + vp_bar
        in2_bar = pullback(i, 1, g_bar)
        xp_bar = in2_bar[:, :r]
        if full:
            vp_bar = vp_bar + in2_bar[:, r:2 * r]
        x_bar = x_bar + xp_bar
        v_bar = v_bar + dt * xp_bar + vp_bar
        in1_bar = pullback(i, 0, g_bar + dt * vp_bar)
        x_bar = x_bar + in1_bar[:, :r] + x_out_bar[:, i]
        if full:
            v_bar = v_bar + in1_bar[:, r:2 * r]
    gw, gb = [], []
    for k in range(depth):
        g_all = outs[k].reshape(-1, outs[k].shape[-1])
        gw.append(g_all.T @ record.acts[k].reshape(-1, record.acts[k].shape[-1]))
        gb.append(g_all.sum(axis=0))
    gamma_grad = mlp.grad_vector(gamma, gw, gb, ga)
    return gamma_grad, pi_grad


def rollout(model, u):
    """Single-trajectory rollout; returns ``(y, record)`` with ``y`` a :class:`Trajectory`."""
    if u.channels != model.p:
        raise DimensionError(f"input has {u.channels} channels, model expects p={model.p}")
    y, rec = rollout_batch(model, u.values[None], u.dt, u.t0)
    return Trajectory(u.dt, y[0], u.t0), rec


def rollout_vjp(model, u, record, y_bar):
    """Parameter gradients ``(gamma_grads, pi_grads)`` of ``sum_i y_bar(t_i) . y(t_i)``."""
    if isinstance(y_bar, Trajectory):
        y_bar = y_bar.values
    gg, pg = rollout_vjp_batch(model, u.values[None], record, np.asarray(y_bar)[None])
    return model.gamma.with_vector(gg), model.pi.with_vector(pg)


# -- Lemma-style state bound ---------------------------------------------

@dataclass(frozen=True)
class BoundReport:
    max_observed: float
    bound: float
    satisfied: bool


def state_bound_value(T, p, B_K, L, w_out, w, B_W, B_b):
    """``T [p B_K L + w_out B_b (w B_W + 1)] exp(T (L + 1))``."""
    return T * (p * B_K * L + w_out * B_b * (w * B_W + 1.0)) * np.exp(T * (L + 1.0))


def verify_state_bound(model, u_set, B_K):
    """Compare the observed ``max_t |x|_1 + |x'|_1`` against the analytic bound.

    The bound uses this model's own largest weight/bias magnitudes and its
    Gamma Lipschitz constant; ``T`` is the longest input duration.
    """
    if len(u_set) == 0:
        raise ValidationError("u_set is empty")
    observed = 0.0
    T = 0.0
    for u in u_set:
        if np.max(np.abs(u.values)) > B_K:
            raise ValidationError("input exceeds B_K")
        _, rec = rollout(model, u)
        observed = max(observed, float(np.max(np.abs(rec.z).sum(axis=2))))
        T = max(T, u.duration)
    g = model.gamma
    bound = state_bound_value(T, model.p, B_K, mlp.lipschitz_const(g), g.layout[-1],
                              max(g.layout[1:-1]), mlp.max_weight(g), mlp.max_bias(g))
    return BoundReport(observed, float(bound), bool(observed <= bound))


# -- checkpoint wrapper ----------------------------------------------------

MAGIC = b"NOSC"
FORMAT_VERSION = 1


def dumps(model, extra=None):
    """``MAGIC | u32 version | u64 JSON length | JSON | gamma blob | pi blob``."""
    g_blob = mlp.dumps(model.gamma)
    p_blob = mlp.dumps(model.pi)
    header = {
        "format_version": FORMAT_VERSION,
        "dims": {"p": model.p, "q": model.q, "r": model.r},
        "gamma_inputs": model.gamma_inputs,
        "gamma_bytes": len(g_blob),
        "pi_bytes": len(p_blob),
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hb)) + hb + g_blob + p_blob


def loads(blob):
    """Inverse of :func:`dumps`; returns ``(model, extra)``."""
    if blob[:4] != MAGIC:
        raise ValidationError("not an oscillator checkpoint")
    version, n = struct.unpack("<IQ", blob[4:16])
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + n].decode("utf-8"))
    pos = 16 + n
    gamma, _ = mlp.loads(blob[pos:pos + header["gamma_bytes"]])
    pos += header["gamma_bytes"]
    pi, _ = mlp.loads(blob[pos:pos + header["pi_bytes"]])
    d = header["dims"]
    model = OscillatorModel(gamma, pi, d["p"], d["q"], d["r"], header["gamma_inputs"])
    return model, header["extra"]
