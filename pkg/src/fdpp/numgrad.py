"""Small MLPs with hand-written reverse-mode gradients, all in float64.

No computation graph: the layer stack is fixed (affine + pointwise
activation), so the backward pass is spelled out directly. Everything here
is pure except `adam_step`, which updates parameters and optimizer state
in place.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

Array = np.ndarray

ACTIVATIONS = ("tanh", "relu", "gelu")

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised on any tensor-shape mismatch; message carries the shapes."""


@dataclass(frozen=True)
class MLPSpec:
    """Architecture of a fully connected net: dims and activation tag."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ShapeError(f"all dims must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        dims = self.layer_dims
        shapes: dict[str, tuple[int, ...]] = {}
        for i in range(self.n_layers):
            shapes[f"w{i}"] = (dims[i], dims[i + 1])
            shapes[f"b{i}"] = (dims[i + 1],)
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def to_json(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MLPSpec":
        return cls(
            input_dim=int(obj["input_dim"]),
            hidden_dims=tuple(obj["hidden_dims"]),
            output_dim=int(obj["output_dim"]),
            activation=obj["activation"],
        )


class ParamStore:
    """Named float64 tensors. Names are unique by construction (dict)."""

    def __init__(self, tensors: dict[str, Array] | None = None):
        self._tensors: dict[str, Array] = {}
        if tensors:
            for name, value in tensors.items():
                self[name] = value

    def __getitem__(self, name: str) -> Array:
        return self._tensors[name]

    def __setitem__(self, name: str, value: Array) -> None:
        arr = np.asarray(value, dtype=np.float64)
        self._tensors[name] = arr

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._tensors.items()})

    def zeros_like(self) -> "ParamStore":
        return ParamStore({k: np.zeros_like(v) for k, v in self._tensors.items()})

    def flat(self) -> Array:
        return np.concatenate([v.ravel() for v in self._tensors.values()]) if self._tensors else np.zeros(0)

    def to_json(self) -> dict:
        return {
            name: {"shape": list(v.shape), "data": v.ravel().tolist()}
            for name, v in self._tensors.items()
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ParamStore":
        store = cls()
        for name, entry in obj.items():
            shape = tuple(entry["shape"])
            data = np.asarray(entry["data"], dtype=np.float64)
            if data.size != int(np.prod(shape)):
                raise ShapeError(f"{name}: {data.size} values for shape {shape}")
            store[name] = data.reshape(shape)
        return store


@dataclass
class AdamState:
    """Adam moments mirroring a ParamStore, plus hyperparameters."""

    m: ParamStore
    v: ParamStore
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamStore, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), lr=lr, **kw)


def init_mlp_params(spec: MLPSpec, seed: int, zero_final: bool = False) -> ParamStore:
    """Glorot-uniform weights, zero biases; optionally zero the last layer."""
    rng = np.random.default_rng(seed)
    params = ParamStore()
    shapes = spec.param_shapes()
    for i in range(spec.n_layers):
        fan_in, fan_out = shapes[f"w{i}"]
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if zero_final and i == spec.n_layers - 1:
            w = np.zeros((fan_in, fan_out))
        params[f"w{i}"] = w
        params[f"b{i}"] = np.zeros(fan_out)
    return params


def _check_params(spec: MLPSpec, params: ParamStore) -> None:
    for name, shape in spec.param_shapes().items():
        if name not in params:
            raise ShapeError(f"missing parameter {name!r}")
        if params[name].shape != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")


def _activation(tag: str, z: Array) -> Array:
    if tag == "tanh":
        return np.tanh(z)
    if tag == "relu":
        return np.maximum(z, 0.0)
    # exact gelu: 0.5 z (1 + erf(z / sqrt(2)))
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def _activation_grad(tag: str, z: Array, a: Array) -> Array:
    if tag == "tanh":
        return 1.0 - a * a
    if tag == "relu":
        return (z > 0.0).astype(np.float64)
    cdf = 0.5 * (1.0 + erf(z / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return cdf + z * pdf


def _forward_cached(spec: MLPSpec, params: ParamStore, x: Array):
    """Batched forward keeping pre-activations; x is (n, input_dim)."""
    acts = [x]
    pre: list[Array] = []
    h = x
    for i in range(spec.n_layers):
        z = h @ params[f"w{i}"] + params[f"b{i}"]
        if i < spec.n_layers - 1:
            h = _activation(spec.activation, z)
            pre.append(z)
            acts.append(h)
        else:
            h = z
    return h, acts, pre


def _as_batch(spec: MLPSpec, x: Array) -> tuple[Array, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with input_dim={spec.input_dim}")
    return x, single


def mlp_forward(spec: MLPSpec, params: ParamStore, x: Array) -> Array:
    """Evaluate the net on one vector (d,) or a batch (n, d)."""
    _check_params(spec, params)
    xb, single = _as_batch(spec, x)
    out, _, _ = _forward_cached(spec, params, xb)
    return out[0] if single else out


def mlp_backward(
    spec: MLPSpec, params: ParamStore, x: Array, cotangent: Array
) -> tuple[ParamStore, Array]:
    """Exact reverse-mode gradients of <cotangent, output> w.r.t. params and input."""
    _check_params(spec, params)
    xb, single = _as_batch(spec, x)
    ct = np.asarray(cotangent, dtype=np.float64)
    if single:
        ct = ct[None, :]
    if ct.shape != (xb.shape[0], spec.output_dim):
        raise ShapeError(f"cotangent shape {cotangent.shape} incompatible with output_dim={spec.output_dim}")
    _, acts, pre = _forward_cached(spec, params, xb)

    grads = ParamStore()
    delta = ct
    for i in reversed(range(spec.n_layers)):
        grads[f"w{i}"] = acts[i].T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params[f"w{i}"].T) * _activation_grad(spec.activation, pre[i - 1], acts[i])
    input_grad = delta @ params["w0"].T
    return grads, input_grad[0] if single else input_grad


def mlp_value_and_vjp(spec: MLPSpec, params: ParamStore, x: Array):
    """Forward pass plus a closure for the backward pass (shared cache).

    Used by training loops to avoid recomputing the forward inside
    mlp_backward on hot paths.
    """
    _check_params(spec, params)
    xb, single = _as_batch(spec, x)
    out, acts, pre = _forward_cached(spec, params, xb)

    def vjp(cotangent: Array) -> tuple[ParamStore, Array]:
        ct = np.asarray(cotangent, dtype=np.float64)
        if single:
            ct = ct[None, :]
        grads = ParamStore()
        delta = ct
        for i in reversed(range(spec.n_layers)):
            grads[f"w{i}"] = acts[i].T @ delta
            grads[f"b{i}"] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ params[f"w{i}"].T) * _activation_grad(
                    spec.activation, pre[i - 1], acts[i]
                )
        return grads, (delta @ params["w0"].T)

    return (out[0] if single else out), vjp


def adam_step(params: ParamStore, grads: ParamStore, state: AdamState) -> tuple[ParamStore, AdamState]:
    """One Adam update with bias correction; mutates params and state."""
    for name in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != param shape {params[name].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name in params:
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        params[name] = params[name] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def timestep_embedding(k: int, dim: int) -> Array:
    """Sinusoidal embedding of a denoising-step index; dim must be even."""
    if dim % 2 != 0:
        raise ShapeError(f"embedding dim must be even, got {dim}")
    if k < 0:
        raise ValueError(f"step index must be >= 0, got {k}")
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half, dtype=np.float64) / half)
    angles = k * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


def timestep_embedding_batch(ks: Array, dim: int) -> Array:
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.asarray(ks, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@dataclass
class GradCheckResult:
    max_rel_err: float
    worst_param: str
    worst_index: int
    n_checked: int

    def __float__(self) -> float:
        return self.max_rel_err


def grad_check(
    spec: MLPSpec,
    params: ParamStore,
    x: Array,
    tolerance: float = 1e-5,
    *,
    step: float = 1e-5,
    samples_per_tensor: int | None = None,
    seed: int = 0,
    analytic: ParamStore | None = None,
) -> GradCheckResult:
    """Compare analytic parameter gradients against central finite differences.

    The checked scalar is <c, f(x)> with a fixed random cotangent c. With
    `samples_per_tensor` set, only that many entries per tensor are probed
    (full sweep otherwise). Relative error per entry is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    rng = np.random.default_rng(seed)
    cot = rng.standard_normal(spec.output_dim)
    if analytic is None:
        analytic, _ = mlp_backward(spec, params, x, cot)

    worst = 0.0
    worst_param = ""
    worst_index = -1
    n_checked = 0
    work = params.copy()
    for name in params:
        flat = work[name].ravel()
        size = flat.size
        if samples_per_tensor is None or samples_per_tensor >= size:
            idx = np.arange(size)
        else:
            idx = rng.choice(size, size=samples_per_tensor, replace=False)
        a_flat = analytic[name].ravel()
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(cot @ mlp_forward(spec, work, x))
            flat[i] = orig - step
            f_minus = float(cot @ mlp_forward(spec, work, x))
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = a_flat[i]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            n_checked += 1
            if rel > worst:
                worst, worst_param, worst_index = rel, name, int(i)
    result = GradCheckResult(worst, worst_param, worst_index, n_checked)
    if worst > tolerance:
        result_msg = f"gradient check failed: {worst:.3e} > {tolerance:.1e} at {worst_param}[{worst_index}]"
        result.message = result_msg  # type: ignore[attr-defined]
    return result


def save_checkpoint(path, spec: MLPSpec, params: ParamStore, extra: dict | None = None) -> None:
    """Write {"spec": ..., "params": ...} JSON; floats round-trip exactly."""
    obj = {"spec": spec.to_json(), "params": params.to_json()}
    if extra:
        obj.update(extra)
    with open(path, "w") as f:
        json.dump(obj, f, separators=(",", ":"))
        f.write("\n")


def load_checkpoint(path) -> tuple[MLPSpec, ParamStore, dict]:
    with open(path) as f:
        obj = json.load(f)
    spec = MLPSpec.from_json(obj["spec"])
    params = ParamStore.from_json(obj["params"])
    extra = {k: v for k, v in obj.items() if k not in ("spec", "params")}
    _check_params(spec, params)
    return spec, params, extra
