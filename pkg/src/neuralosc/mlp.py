"""Feed-forward ReLU/PReLU networks with hand-written reverse-mode derivatives.

A network is an immutable :class:`MlpParams` value. Every function here is
pure; inputs may be a single vector ``(in,)`` or a batch ``(B, in)``.
Gradients for a batch are summed over the batch rows.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, ValidationError

RELU = "relu"
PRELU = "prelu"
ACTIVATIONS = (RELU, PRELU)
PRELU_INIT_ALPHA = 0.25


@dataclass(frozen=True)
class MlpParams:
    """Weights ``[out x in]`` and biases ``[out]`` per layer.

    The activation is applied after every layer except the last. For PReLU a
    single learnable slope ``alpha`` is shared by all hidden layers. The same
    type doubles as the gradient container (``alpha`` then holds d/d alpha).
    """

    weights: tuple
    biases: tuple
    activation: str = RELU
    alpha: float = 0.0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise ValidationError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
                raise DimensionError(f"weight {w.shape} / bias {b.shape} mismatch", layer=k)
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise DimensionError(
                    f"input width {w.shape[1]} != previous output width "
                    f"{self.weights[k - 1].shape[0]}",
                    layer=k,
                )

    @property
    def layout(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def depth(self):
        return len(self.weights)

    @property
    def n_params(self):
        n = sum(w.size + b.size for w, b in zip(self.weights, self.biases))
        return n + (1 if self.activation == PRELU else 0)

    def to_vector(self):
        """Flatten to ``[W_0 (row-major), b_0, W_1, b_1, ..., alpha?]``."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        if self.activation == PRELU:
            parts.append(np.array([self.alpha]))
        return np.concatenate(parts).astype(np.float64)

    def with_vector(self, vec):
        """Inverse of :meth:`to_vector` keeping this layout."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} values, got {vec.shape}")
        weights, biases = [], []
        pos = 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            biases.append(vec[pos:pos + b.size].copy())
            pos += b.size
        alpha = float(vec[pos]) if self.activation == PRELU else self.alpha
        return replace(self, weights=tuple(weights), biases=tuple(biases), alpha=alpha)

    def zeros_like(self):
        return self.with_vector(np.zeros(self.n_params))


ParamGrads = MlpParams


@dataclass
class MlpCache:
    """Per-layer inputs and hidden pre-activations recorded by :func:`mlp_forward`."""

    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    batched: bool = True


def activate(params, z):
    if params.activation == RELU:
        return np.maximum(z, 0.0)
    return np.maximum(z, 0.0) + params.alpha * np.minimum(z, 0.0)


def _forward(params, h):
    cache = MlpCache()
    last = params.depth - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        z = h @ w.T + b
        if k < last:
            cache.pre.append(z)
            h = activate(params, z)
        else:
            h = z
    return h, cache


def _vjp(params, cache, g):
    """Batched pullback; returns ``(x_bar, [dW], [db], d_alpha)``."""
    depth = params.depth
    gw = [None] * depth
    gb = [None] * depth
    g_alpha = 0.0
    for k in range(depth - 1, -1, -1):
        gw[k] = g.T @ cache.inputs[k]
        gb[k] = g.sum(axis=0)
        g = g @ params.weights[k]
        if k > 0:
            z = cache.pre[k - 1]
            if params.activation == RELU:
                g = g * (z > 0.0)
            else:
                g_alpha += float(np.sum(g * np.minimum(z, 0.0)))
                g = g * np.where(z > 0.0, 1.0, params.alpha)
    return g, gw, gb, g_alpha


def mlp_forward(params, x):
    """Evaluate the network; returns ``(y, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    h = x if batched else x[None, :]
    if h.ndim != 2 or h.shape[1] != params.layout[0]:
        raise DimensionError(
            f"input width {h.shape[-1]} does not match {params.layout[0]}", layer=0)
    y, cache = _forward(params, h)
    cache.batched = batched
    return (y if batched else y[0]), cache


def mlp_vjp(params, cache, y_bar):
    """Pull a cotangent back through the network.

    Returns ``(x_bar, grads)`` where ``x_bar = J^T y_bar`` and ``grads`` holds
    d(y_bar . y)/d(theta) summed over the batch. The subgradient at a zero
    pre-activation is 0 for ReLU and ``alpha`` for PReLU.
    """
    g = np.asarray(y_bar, dtype=np.float64)
    if not cache.batched:
        g = g[None, :]
    n_out = params.layout[-1]
    if g.ndim != 2 or g.shape[1] != n_out or g.shape[0] != cache.inputs[0].shape[0]:
        raise DimensionError(f"cotangent shape {np.shape(y_bar)} does not match output",
                             layer=params.depth - 1)
    if not np.all(np.isfinite(g)):
        raise ValidationError("non-finite cotangent")
    x_bar, gw, gb, g_alpha = _vjp(params, cache, g)
    grads = replace(params, weights=tuple(gw), biases=tuple(gb),
                    alpha=g_alpha if params.activation == PRELU else 0.0)
    return (x_bar if cache.batched else x_bar[0]), grads


def grad_vector(params, gw, gb, g_alpha):
    """Pack raw layer gradients in :meth:`MlpParams.to_vector` order."""
    parts = []
    for w, b in zip(gw, gb):
        parts.append(w.ravel())
        parts.append(b)
    if params.activation == PRELU:
        parts.append(np.array([g_alpha]))
    return np.concatenate(parts)


def l1_param_norm(params):
    """Sum of absolute weight and bias entries (the PReLU slope is excluded)."""
    return float(sum(np.abs(w).sum() + np.abs(b).sum()
                     for w, b in zip(params.weights, params.biases)))


def l1_subgradient(params):
    """Sign pattern of :func:`l1_param_norm` as a flat vector; zero at zero entries and at alpha."""
    sub = np.sign(params.to_vector())
    if params.activation == PRELU:
        sub[-1] = 0.0
    return sub


def _activation_lipschitz(params):
    return 1.0 if params.activation == RELU else max(1.0, abs(params.alpha))


def lipschitz_const(params):
    """L1-norm Lipschitz constant ``w_out * w^(h-1) * B^h``.

    ``B`` is the largest absolute weight entry of this network, ``w`` the
    widest hidden layer and ``h`` the number of weight layers. For PReLU each
    hidden activation contributes a factor ``max(1, |alpha|)``.
    """
    layout = params.layout
    h = params.depth
    b_w = max(float(np.abs(w).max()) if w.size else 0.0 for w in params.weights)
    w_hidden = max(layout[1:-1]) if h > 1 else 1
    act = _activation_lipschitz(params) ** (h - 1)
    return float(layout[-1] * w_hidden ** (h - 1) * b_w ** h * act)


def lipschitz_layer(params):
    """Largest single-layer L1 Lipschitz constant ``max_k out_k * |W_k|_max``."""
    act = _activation_lipschitz(params)
    vals = []
    for k, w in enumerate(params.weights):
        factor = act if k < params.depth - 1 else 1.0
        vals.append(w.shape[0] * (float(np.abs(w).max()) if w.size else 0.0) * factor)
    return max(vals)


def max_weight(params):
    return max(float(np.abs(w).max()) for w in params.weights)


def max_bias(params):
    return max(float(np.abs(b).max()) for b in params.biases)


def init_mlp(seed, layout, activation=RELU):
    """Glorot-uniform weights, zero biases, PReLU slope 0.25; deterministic in ``seed``."""
    layout = [int(n) for n in layout]
    if len(layout) < 2 or any(n <= 0 for n in layout):
        raise ValidationError(f"layout needs >= 2 positive widths, got {layout}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(layout[:-1], layout[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    alpha = PRELU_INIT_ALPHA if activation == PRELU else 0.0
    return MlpParams(tuple(weights), tuple(biases), activation, alpha)


# -- checkpoint container -------------------------------------------------

MAGIC = b"NOMP"
FORMAT_VERSION = 1


def params_header(params, lineage=None):
    return {
        "format_version": FORMAT_VERSION,
        "layout": params.layout,
        "activation": params.activation,
        "lineage": lineage or {},
    }


def dumps(params, lineage=None):
    """Serialize to ``MAGIC | u32 version | u64 header length | JSON | float64 LE payload``.

    The payload is :meth:`MlpParams.to_vector`: per layer the weights row-major
    then the bias, followed by ``alpha`` for PReLU networks.
    """
    header = json.dumps(params_header(params, lineage), sort_keys=True).encode("utf-8")
    payload = params.to_vector().astype("<f8").tobytes()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + payload


def loads(blob):
    """Inverse of :func:`dumps`; returns ``(params, header)``."""
    if blob[:4] != MAGIC:
        raise ValidationError("not a network checkpoint")
    version, n_header = struct.unpack("<IQ", blob[4:16])
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + n_header].decode("utf-8"))
    vec = np.frombuffer(blob[16 + n_header:], dtype="<f8").astype(np.float64)
    template = init_mlp(0, header["layout"], header["activation"])
    return template.with_vector(vec), header
