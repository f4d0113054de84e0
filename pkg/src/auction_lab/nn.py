"""Small dense networks with hand-written reverse mode, AdamW and checkpoints.

Everything is float64 and batched along the leading axis. Parameters of one
network live in a single flat buffer; per-layer weights and biases are views
into it, so the optimizer touches one array per network.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

OUTPUT_ACTIVATIONS = ("identity", "sigmoid", "softplus", "scaled_sigmoid")
_ACT_CODES = {name: code for code, name in enumerate(OUTPUT_ACTIVATIONS)}

MAGIC = b"ALGN"
FORMAT_VERSION = 1


class DivergenceError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible serialized parameters."""


class HeaderError(CheckpointError):
    pass


class LengthMismatchError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class StaleCacheError(RuntimeError):
    """A forward cache was reused after its parameters changed."""


def sigmoid(x):
    # tanh form is overflow-free for any finite x
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class MlpSpec:
    """Shape of ``MLP(d_in, n_l, h, d_out)`` with tanh hidden units.

    ``lo``/``hi`` are per-output bounds. ``scaled_sigmoid`` maps into
    ``(lo, hi)``; for ``softplus`` a given ``hi`` acts as a hard cap.
    ``hidden_layers=0`` gives a single affine layer.
    """

    input_dim: int
    hidden_layers: int
    hidden_width: int
    output_dim: int
    output_activation: str = "identity"
    lo: Optional[tuple] = None
    hi: Optional[tuple] = None

    def __post_init__(self):
        for name in ("input_dim", "hidden_width", "output_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden_layers < 0:
            raise ValueError("hidden_layers must be >= 0")
        if self.output_activation not in _ACT_CODES:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        for name in ("lo", "hi"):
            val = getattr(self, name)
            if val is not None:
                val = np.broadcast_to(np.asarray(val, dtype=float), (self.output_dim,))
                object.__setattr__(self, name, tuple(float(v) for v in val))
        if self.output_activation == "scaled_sigmoid":
            if self.lo is None or self.hi is None:
                raise ValueError("scaled_sigmoid needs lo and hi")
            if any(a >= b for a, b in zip(self.lo, self.hi)):
                raise ValueError("scaled_sigmoid requires lo < hi")
        if self.output_activation == "softplus" and self.hi is not None:
            if any(b <= 0 for b in self.hi):
                raise ValueError("softplus cap must be positive")

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_out, fan_in) for each affine layer, input to output."""
        dims = [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]
        return [(dims[k + 1], dims[k]) for k in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())


class MlpParams:
    """Flat float64 parameter buffer with per-layer ``weights``/``biases`` views."""

    def __init__(self, spec: MlpSpec, flat: Optional[np.ndarray] = None):
        self.spec = spec
        if flat is None:
            flat = np.zeros(spec.n_params)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (spec.n_params,):
            raise ValueError(f"expected {spec.n_params} parameters, got {flat.shape}")
        self.flat = flat
        self.version = 0
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        k = 0
        for fan_out, fan_in in spec.layer_shapes():
            self.weights.append(flat[k:k + fan_out * fan_in].reshape(fan_out, fan_in))
            k += fan_out * fan_in
            self.biases.append(flat[k:k + fan_out])
            k += fan_out

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, self.flat.copy())

    def zeros_like(self) -> "MlpParams":
        return MlpParams(self.spec)

    def __eq__(self, other):
        return (
            isinstance(other, MlpParams)
            and self.spec == other.spec
            and np.array_equal(self.flat, other.flat)
        )

    def __repr__(self):
        return f"MlpParams({self.spec}, n={self.flat.size})"


def mlp_init(spec: MlpSpec, seed) -> MlpParams:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = MlpParams(spec)
    for w in params.weights:
        fan_out, fan_in = w.shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return params


def _output_bounds(spec: MlpSpec, lo, hi):
    lo = spec.lo if lo is None else lo
    hi = spec.hi if hi is None else hi
    return (None if lo is None else np.asarray(lo, dtype=float),
            None if hi is None else np.asarray(hi, dtype=float))


@dataclass
class MlpCache:
    params: MlpParams
    version: int
    inputs: list = field(default_factory=list)  # input to each affine layer
    z_out: Optional[np.ndarray] = None
    y_out: Optional[np.ndarray] = None
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    squeeze: bool = False


def mlp_forward(params: MlpParams, x, lo=None, hi=None):
    """Evaluate the network on ``x`` of shape (batch, d_in) or (d_in,).

    ``lo``/``hi`` override the spec's output bounds for this call.
    Returns ``(output, cache)``.
    """
    spec = params.spec
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"input has shape {x.shape}, expected (batch, {spec.input_dim})")
    lo, hi = _output_bounds(spec, lo, hi)
    cache = MlpCache(params, params.version, lo=lo, hi=hi, squeeze=squeeze)
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        z = h @ w.T
        z += b
        if k < last:
            h = np.tanh(z)
    act = spec.output_activation
    if act == "identity":
        y = z
    elif act == "sigmoid":
        y = sigmoid(z)
    elif act == "softplus":
        y = softplus(z)
        if hi is not None:
            y = np.minimum(y, hi)
    else:
        y = lo + (hi - lo) * sigmoid(z)
    cache.z_out, cache.y_out = z, y
    return (y[0] if squeeze else y), cache


def mlp_backward(cache: MlpCache, upstream, need_input_grad: bool = True, need_param_grads: bool = True):
    """Reverse pass for the scalar ``sum(upstream * output)``.

    Returns ``(input_grad, param_grads)``; either may be ``None`` when not
    requested.
    """
    params = cache.params
    if cache.version != params.version:
        raise StaleCacheError("parameters changed since this forward pass")
    spec = params.spec
    g = np.asarray(upstream, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != cache.y_out.shape:
        raise ValueError(f"upstream shape {g.shape} does not match output {cache.y_out.shape}")
    act = spec.output_activation
    z, y = cache.z_out, cache.y_out
    if act == "sigmoid":
        g = g * y * (1.0 - y)
    elif act == "softplus":
        g = g * sigmoid(z)
        if cache.hi is not None:
            g = np.where(y < cache.hi, g, 0.0)
    elif act == "scaled_sigmoid":
        s = (y - cache.lo) / (cache.hi - cache.lo)
        g = g * (cache.hi - cache.lo) * s * (1.0 - s)
    grads = params.zeros_like() if need_param_grads else None
    input_grad = None
    for k in range(len(params.weights) - 1, -1, -1):
        h_in = cache.inputs[k]
        if need_param_grads:
            grads.weights[k][...] = g.T @ h_in
            grads.biases[k][...] = g.sum(axis=0)
        if k == 0 and not need_input_grad:
            break
        g = g @ params.weights[k]
        if k > 0:
            g *= 1.0 - h_in * h_in
        else:
            input_grad = g[0] if cache.squeeze else g
    return input_grad, grads


def softmax_columns(logits):
    """Softmax over the bidder axis (second to last) of (..., n, m) scores."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-2, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-2, keepdims=True)


def softmax_columns_backward(s, upstream):
    return s * (upstream - (upstream * s).sum(axis=-2, keepdims=True))


class AdamW:
    """Decoupled weight-decay Adam over a fixed list of ``MlpParams``."""

    def __init__(self, params: Sequence[MlpParams], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.exp_avg = [np.zeros_like(p.flat) for p in params]
        self.exp_avg_sq = [np.zeros_like(p.flat) for p in params]

    def step(self, params: Sequence[MlpParams], grads: Sequence[MlpParams]) -> None:
        if len(params) != len(self.exp_avg) or len(grads) != len(params):
            raise ValueError("parameter list does not match optimizer state")
        for g in grads:
            if not np.all(np.isfinite(g.flat)):
                raise DivergenceError("non-finite gradient; step rejected")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        step_size = self.lr / bc1
        for p, g, m, v in zip(params, grads, self.exp_avg, self.exp_avg_sq):
            m *= self.beta1
            m += (1.0 - self.beta1) * g.flat
            v *= self.beta2
            v += (1.0 - self.beta2) * g.flat * g.flat
            denom = np.sqrt(v / bc2)
            denom += self.eps
            if self.weight_decay:
                p.flat *= 1.0 - self.lr * self.weight_decay
            p.flat -= step_size * m / denom
            p.version += 1

    def state_dict(self) -> dict:
        return {
            "lr": self.lr, "betas": [self.beta1, self.beta2], "eps": self.eps,
            "weight_decay": self.weight_decay, "step_count": self.step_count,
        }


def adamw_step(state: AdamW, params: Sequence[MlpParams], grads: Sequence[MlpParams]) -> None:
    state.step(params, grads)


def grad_check(function: Callable, point, step: float = 1e-5) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``function(x)`` returns ``(value, gradient)``. The error of coordinate k is
    ``|analytic_k - fd_k| / max(1, |analytic_k|)``.
    """
    x = np.array(point, dtype=np.float64)
    _, analytic = function(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    flat = x.reshape(-1)
    fd = np.empty(flat.size)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        f_plus = function(x.copy())[0]
        flat[k] = orig - step
        f_minus = function(x.copy())[0]
        flat[k] = orig
        fd[k] = (f_plus - f_minus) / (2.0 * step)
    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - fd) / np.maximum(1.0, np.abs(a)))) if a.size else 0.0


# --- binary checkpoint records ---------------------------------------------

def pack_network(params: MlpParams) -> bytes:
    spec = params.spec
    has_bounds = spec.lo is not None or spec.hi is not None
    out = [struct.pack(
        "<6I", spec.input_dim, spec.hidden_layers, spec.hidden_width, spec.output_dim,
        _ACT_CODES[spec.output_activation], int(has_bounds),
    )]
    if has_bounds:
        nan = float("nan")
        lo = spec.lo if spec.lo is not None else (nan,) * spec.output_dim
        hi = spec.hi if spec.hi is not None else (nan,) * spec.output_dim
        out.append(np.asarray(lo + hi, dtype="<f8").tobytes())
    # layer order, weights row-major then biases: the flat buffer already is this
    out.append(params.flat.astype("<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise LengthMismatchError(
                f"stream truncated: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self) -> bool:
        return self.pos == len(self.data)


def unpack_network(reader: _Reader) -> MlpParams:
    d_in, n_l, h, d_out, act, has_bounds = reader.unpack("<6I")
    if act >= len(OUTPUT_ACTIVATIONS):
        raise HeaderError(f"unknown activation code {act}")
    lo = hi = None
    if has_bounds:
        b = np.frombuffer(reader.take(16 * d_out), dtype="<f8")
        lo = None if np.isnan(b[:d_out]).all() else tuple(b[:d_out])
        hi = None if np.isnan(b[d_out:]).all() else tuple(b[d_out:])
    try:
        spec = MlpSpec(d_in, n_l, h, d_out, OUTPUT_ACTIVATIONS[act], lo, hi)
    except ValueError as exc:
        raise HeaderError(f"invalid network spec: {exc}") from exc
    flat = np.frombuffer(reader.take(8 * spec.n_params), dtype="<f8").astype(np.float64)
    return MlpParams(spec, flat)


def read_header(reader: _Reader) -> None:
    magic = bytes(reader.take(4)) if len(reader.data) >= 4 else bytes(reader.data)
    if magic != MAGIC:
        raise HeaderError(f"bad magic bytes {magic!r}")
    (version,) = reader.unpack("<H")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")


def serialize_params(params: MlpParams) -> bytes:
    return MAGIC + struct.pack("<H", FORMAT_VERSION) + pack_network(params)


def deserialize_params(data: bytes) -> MlpParams:
    reader = _Reader(data)
    read_header(reader)
    params = unpack_network(reader)
    if not reader.done():
        raise LengthMismatchError(f"{len(reader.data) - reader.pos} trailing bytes")
    return params
