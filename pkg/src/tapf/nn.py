"""Dense MLP kernel with hand-written backprop, Adam and soft target updates.

Everything here works on float64 numpy arrays and is a pure function of its
inputs: nothing mutates a ``MlpParams`` in place.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

OUTPUTS = ("identity", "sigmoid")
HIDDEN = 128


class ContractViolation(ValueError):
    """Raised when an operation is called with inputs that break its contract."""


class TrainingDivergence(RuntimeError):
    """Raised when gradients or losses stop being finite."""


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output: str = "identity"

    def __post_init__(self):
        if self.output not in OUTPUTS:
            raise ContractViolation(f"unknown output activation {self.output!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ContractViolation("weights and biases must be non-empty and paired")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ContractViolation(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ContractViolation(f"layer {i} input width {w.shape[1]} != previous output")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.output)

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases], self.output)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_vector(self, vec: np.ndarray) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != sum(a.size for a in self.arrays()):
            raise ContractViolation("vector length does not match parameter count")
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            bs.append(vec[pos:pos + b.size].copy())
            pos += b.size
        return MlpParams(ws, bs, self.output)

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


def _check_congruent(a: MlpParams, b: MlpParams) -> None:
    if len(a.weights) != len(b.weights) or any(
        x.shape != y.shape for x, y in zip(a.arrays(), b.arrays())
    ):
        raise ContractViolation(f"parameter shapes differ: {a.widths} vs {b.widths}")


def init_mlp(widths: Sequence[int], output: str = "identity",
             rng: np.random.Generator | int | None = 0) -> MlpParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(rng)
    ws, bs = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return MlpParams(ws, bs, output)


def four_layer(in_dim: int, out_dim: int, output: str, rng=0, hidden: int = HIDDEN) -> MlpParams:
    return init_mlp((in_dim, hidden, hidden, hidden, out_dim), output, rng)


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split form avoids overflow warnings for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)     # pre-activations
    y: np.ndarray | None = None


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Batched forward pass; ReLU between layers, configured output activation."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ContractViolation(f"input shape {x.shape} does not match width {params.in_dim}")
    cache = ForwardCache()
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        z = h @ w.T
        z += b
        cache.pre.append(z)
        if i < last:
            h = np.maximum(z, 0.0)
        elif params.output == "sigmoid":
            h = sigmoid(z)
        else:
            h = z
    cache.y = h
    return (h[0] if squeeze else h), cache


def _check_cache(params: MlpParams, cache: ForwardCache, dL_dy: np.ndarray) -> np.ndarray:
    if len(cache.pre) != len(params.weights) or cache.y is None:
        raise ContractViolation("cache does not come from a forward pass of these params")
    for w, inp, z in zip(params.weights, cache.inputs, cache.pre):
        if inp.shape[1] != w.shape[1] or z.shape[1] != w.shape[0]:
            raise ContractViolation("cache shapes do not match params")
    dL_dy = np.asarray(dL_dy, dtype=np.float64)
    if dL_dy.ndim == 1:
        dL_dy = dL_dy[None, :]
    if dL_dy.shape != cache.y.shape:
        raise ContractViolation(f"cotangent shape {dL_dy.shape} != output {cache.y.shape}")
    return dL_dy


def _backprop(params: MlpParams, cache: ForwardCache, dL_dy: np.ndarray, want_params: bool,
              dL_dpre: np.ndarray | None = None):
    dL_dy = _check_cache(params, cache, dL_dy)
    if params.output == "sigmoid":
        delta = dL_dy * cache.y * (1.0 - cache.y)
    else:
        delta = dL_dy
    if dL_dpre is not None:
        if np.shape(dL_dpre) != delta.shape:
            raise ContractViolation(f"pre-activation cotangent shape {np.shape(dL_dpre)} != {delta.shape}")
        delta = delta + dL_dpre
    n = len(params.weights)
    gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for i in range(n - 1, -1, -1):
        if want_params:
            gw[i] = delta.T @ cache.inputs[i]
            gb[i] = delta.sum(axis=0)
        if i == 0 and want_params:
            break
        delta = delta @ params.weights[i]
        if i > 0:
            delta = delta * (cache.pre[i - 1] > 0)
    if want_params:
        return MlpParams(gw, gb, params.output)
    return delta


def mlp_backward_params(params: MlpParams, cache: ForwardCache, dL_dy: np.ndarray,
                        dL_dpre: np.ndarray | None = None) -> MlpParams:
    """Reverse-mode gradients of L with respect to every weight and bias (summed over the batch).

    ``dL_dpre`` optionally adds loss terms that depend directly on the output
    pre-activation, bypassing the output squashing.
    """
    return _backprop(params, cache, dL_dy, want_params=True, dL_dpre=dL_dpre)


def mlp_backward_input(params: MlpParams, cache: ForwardCache, dL_dy: np.ndarray) -> np.ndarray:
    """Gradient of L with respect to the network input, one row per batch element."""
    dx = _backprop(params, cache, dL_dy, want_params=False)
    return dx


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, lr: float = 4e-4, **kw) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0, lr, **kw)


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState) -> tuple[MlpParams, AdamState]:
    _check_congruent(params, grads)
    if state.lr <= 0:
        raise ContractViolation("learning rate must be positive")
    g_arrays = grads.arrays()
    if not all(np.isfinite(g).all() for g in g_arrays):
        raise TrainingDivergence("non-finite gradient passed to adam_step")
    t = state.t + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new, ms, vs = [], [], []
    for p, g, m, v in zip(params.arrays(), g_arrays, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        new.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        ms.append(m)
        vs.append(v)
    out = MlpParams(new[0::2], new[1::2], params.output)
    if not out.all_finite():
        raise TrainingDivergence("adam_step produced non-finite parameters")
    return out, AdamState(ms, vs, t, state.lr, state.beta1, state.beta2, state.eps)


def soft_update(target: MlpParams, online: MlpParams, alpha: float) -> MlpParams:
    """Return alpha * online + (1 - alpha) * target."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractViolation(f"soft-update coefficient {alpha} outside [0, 1]")
    _check_congruent(target, online)
    if alpha == 0.0:
        return target.copy()
    if alpha == 1.0:
        return online.copy()
    mix = [alpha * o + (1.0 - alpha) * t for t, o in zip(target.arrays(), online.arrays())]
    return MlpParams(mix[0::2], mix[1::2], target.output)


def finite_diff_check(f: Callable[[np.ndarray], float], x: np.ndarray,
                      analytic_grad: np.ndarray, h: float = 1e-5) -> float:
    """Worst per-coordinate relative error between analytic_grad and central differences."""
    if h <= 0:
        raise ContractViolation("step h must be positive")
    x = np.array(x, dtype=np.float64, copy=True).ravel()
    a = np.asarray(analytic_grad, dtype=np.float64).ravel()
    worst = 0.0
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = f(x.copy())
        x[i] = orig - h
        fm = f(x.copy())
        x[i] = orig
        num = (fp - fm) / (2.0 * h)
        err = abs(a[i] - num) / max(abs(a[i]), abs(num), 1e-8)
        worst = max(worst, err)
    return worst


_MAGIC = b"TAPFMLP"
_VERSION = 1


def save_params(params: MlpParams, path: str | Path) -> None:
    """Binary checkpoint: header, layer shapes, then little-endian float64 arrays (row-major)."""
    out = bytearray(_MAGIC)
    out += struct.pack("<BBI", _VERSION, OUTPUTS.index(params.output), len(params.weights))
    for w in params.weights:
        out += struct.pack("<II", *w.shape)
    for a in params.arrays():
        out += np.ascontiguousarray(a, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_params(path: str | Path) -> MlpParams:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ContractViolation(f"{path}: not a parameter checkpoint")
    pos = len(_MAGIC)
    version, out_idx, n = struct.unpack_from("<BBI", raw, pos)
    if version != _VERSION:
        raise ContractViolation(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<BBI")
    shapes = []
    for _ in range(n):
        shapes.append(struct.unpack_from("<II", raw, pos))
        pos += 8
    ws, bs = [], []
    for rows, cols in shapes:
        ws.append(np.frombuffer(raw, "<f8", rows * cols, pos).reshape(rows, cols).astype(np.float64))
        pos += rows * cols * 8
        bs.append(np.frombuffer(raw, "<f8", rows, pos).astype(np.float64))
        pos += rows * 8
    return MlpParams(ws, bs, OUTPUTS[out_idx])
