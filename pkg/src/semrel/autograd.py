"""Dense float64 tensors with taped reverse-mode differentiation.

Everything the encoder and the training losses need is built from the
primitives below.  Each primitive records a node on the active tape;
``backward`` replays the tape in reverse execution order, which is a
valid topological order, so every node is visited exactly once and
gradients for shared inputs accumulate additively.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    BoundsError,
    ContractError,
    DimensionError,
    NonFiniteError,
    ParameterError,
)

LOG_FLOOR = 1e-12


class RngState:
    """Seeded random stream with copyable position.

    Identical seed plus identical call sequence gives identical outputs;
    ``clone`` snapshots the stream so two consumers can draw the same
    values (used to share dropout masks between the two training passes).
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def clone(self) -> "RngState":
        other = RngState(self.seed)
        other._gen.bit_generator.state = self._gen.bit_generator.state
        return other

    def fork(self) -> "RngState":
        """Derive an independent child stream, advancing this one."""
        return RngState(int(self._gen.integers(0, 2**63)))

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape=None, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, seq, size=None, replace=True):
        return self._gen.choice(seq, size=size, replace=replace)

    def truncated_normal(self, shape, std: float) -> np.ndarray:
        """Normal(0, std) with draws beyond 3*std resampled."""
        out = self._gen.normal(0.0, std, shape)
        if std > 0:
            bad = np.abs(out) > 3.0 * std
            while bad.any():
                out[bad] = self._gen.normal(0.0, std, int(bad.sum()))
                bad = np.abs(out) > 3.0 * std
        return out


class Tensor:
    """Contiguous float array plus the flags autodiff needs.

    ``requires_grad`` marks leaves that should receive ``.grad`` when
    ``backward`` runs; tensors produced by primitives propagate the flag
    so recording can stop where no input needs gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar so model code reads like math.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(value, dtype=np.float64) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager around a forward computation; ``backward``
    then replays ``nodes`` in reverse.  Without an active tape the
    primitives run untaped (inference mode).
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()

    def clear(self) -> None:
        self.nodes.clear()


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _check_finite(arr: np.ndarray, op: str) -> None:
    # A single reduction catches NaN and +-Inf: any non-finite value
    # poisons the sum, and the finite magnitudes in this package cannot
    # overflow it.
    if not np.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite values produced by {op}")


def _from_op(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._leaf = True
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        out._leaf = False
        tape.nodes.append(_Node(out, tuple(inputs), backward_fn))
    return out


def backward(
    loss: Tensor,
    tape: Tape | None = None,
    targets: Iterable[Tensor] | None = None,
    retain: bool = False,
) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad``.

    By default every requires-grad leaf reachable from ``loss`` receives
    its gradient and the tape is cleared.  With ``targets`` the walk is
    pruned to paths that reach those tensors and only they are written,
    which keeps a gradient-w.r.t.-embeddings pass from touching the
    parameter grads.  ``retain=True`` keeps the tape for a second call.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or _active_tape()
    if tape is None or not tape.nodes:
        raise ContractError("backward called with no recorded tape")

    target_ids = None
    if targets is not None:
        target_ids = {id(t) for t in targets}
        reaches = set(target_ids)
        for node in tape.nodes:
            if any(id(t) in reaches for t in node.inputs):
                reaches.add(id(node.out))
    else:
        reaches = None

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    sinks: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        needs = tuple(
            (reaches is None or id(t) in reaches) for t in node.inputs
        )
        input_grads = node.backward_fn(g, needs)
        for t, gi, needed in zip(node.inputs, input_grads, needs):
            if gi is None or not needed:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            wants_grad = (
                target_ids is not None and key in target_ids
            ) or (target_ids is None and t._leaf and t.requires_grad)
            if wants_grad:
                sinks[key] = t

    for key, t in sinks.items():
        g = grads.get(key)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g

    if not retain:
        tape.clear()


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _matmul_raw(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # numpy routes single-row/column 2D products through gemv, whose
    # accumulation order differs from gemm.  Scores must not depend on
    # how many rows share a batch, so force the gemm path.
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[0] == 1:
            return np.matmul(np.concatenate([a, a], axis=0), b)[:1]
        if b.shape[1] == 1:
            return np.matmul(a, np.concatenate([b, b], axis=1))[:, :1]
    return np.matmul(a, b)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = _matmul_raw(ad, bd)

    def bw(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(_matmul_raw(g, bd.swapaxes(-1, -2)), a.shape)
        if needs[1]:
            gb = _unbroadcast(_matmul_raw(ad.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _from_op(out, "matmul", (a, b), bw)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g, needs):
        ga = _unbroadcast(g, a.shape) if needs[0] else None
        gb = _unbroadcast(g, b.shape) if needs[1] else None
        return ga, gb

    return _from_op(out, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g, needs):
        ga = _unbroadcast(g, a.shape) if needs[0] else None
        gb = _unbroadcast(-g, b.shape) if needs[1] else None
        return ga, gb

    return _from_op(out, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd

    def bw(g, needs):
        ga = _unbroadcast(g * bd, a.shape) if needs[0] else None
        gb = _unbroadcast(g * ad, b.shape) if needs[1] else None
        return ga, gb

    return _from_op(out, "mul", (a, b), bw)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = np.ascontiguousarray(x.data.reshape(shape))

    def bw(g, needs):
        return (g.reshape(x.shape) if needs[0] else None,)

    return _from_op(out, "reshape", (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bw(g, needs):
        return (np.ascontiguousarray(g.transpose(inv)) if needs[0] else None,)

    return _from_op(out, "transpose", (x,), bw)


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Slice a single index along ``axis`` (output drops that axis)."""
    x = as_tensor(x)
    out = np.ascontiguousarray(np.take(x.data, index, axis=axis))

    def bw(g, needs):
        if not needs[0]:
            return (None,)
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return _from_op(out, "take", (x,), bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out)

    def bw(g, needs):
        if not needs[0]:
            return (None,)
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, x.shape).copy(),)

    return _from_op(out, "sum", (x,), bw)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        n = x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(z, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Rows of exp(t*z_i) / sum_j exp(t*z_j), max-subtracted for stability."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    z = as_tensor(z)
    t = temperature * z.data
    t = t - t.max(axis=axis, keepdims=True)
    e = np.exp(t)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g, needs):
        if not needs[0]:
            return (None,)
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (temperature * p * (g - inner),)

    return _from_op(p, "softmax", (z,), bw)


def safe_log(x, floor: float = LOG_FLOOR) -> Tensor:
    """log(max(x, floor)); gradient is 1/x above the floor, 0 below."""
    x = as_tensor(x)
    clipped = np.maximum(x.data, floor)
    out = np.log(clipped)
    above = x.data > floor

    def bw(g, needs):
        if not needs[0]:
            return (None,)
        return (np.where(above, g / clipped, 0.0),)

    return _from_op(out, "safe_log", (x,), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g, needs):
        return (g * mask if needs[0] else None,)

    return _from_op(np.where(mask, x.data, 0.0), "relu", (x,), bw)


_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT_2))
    out = xd * cdf

    def bw(g, needs):
        if not needs[0]:
            return (None,)
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _from_op(out, "gelu", (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError("layer_norm gain/bias must match the last axis")
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    centered = xd - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gain.data * xhat + bias.data

    def bw(g, needs):
        gx = gg = gb = None
        if needs[1]:
            gg = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if needs[2]:
            gb = g.reshape(-1, x.shape[-1]).sum(axis=0)
        if needs[0]:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (gh - m1 - xhat * m2)
        return gx, gg, gb

    return _from_op(out, "layer_norm", (x, gain, bias), bw)


def embedding_gather(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; backward scatter-adds into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DimensionError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise BoundsError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out = table.data[ids]

    def bw(g, needs):
        if not needs[0]:
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _from_op(out, "embedding_gather", (table,), bw)


def dropout(x, rate: float, rng: RngState | None, training: bool) -> Tensor:
    """Inverted dropout: train-time scaling so inference is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("training-mode dropout needs an RngState")
    scale = 1.0 / (1.0 - rate)
    mask = (rng.random(x.shape) >= rate) * scale

    def bw(g, needs):
        return (g * mask if needs[0] else None,)

    return _from_op(x.data * mask, "dropout", (x,), bw)


def cross_entropy(probs, labels) -> Tensor:
    """Mean negative log probability of the true class.

    ``probs`` is (n, c) with rows on the simplex; ``labels`` holds class
    indices.  Probabilities are floored at 1e-12 under the log.
    """
    probs = as_tensor(probs)
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise DimensionError(
            f"cross_entropy shapes: probs {probs.shape}, labels {labels.shape}"
        )
    n = probs.shape[0]
    rows = np.arange(n)
    py = probs.data[rows, labels]
    clipped = np.maximum(py, LOG_FLOOR)
    out = np.asarray(-np.log(clipped).mean())
    above = py > LOG_FLOOR

    def bw(g, needs):
        if not needs[0]:
            return (None,)
        gp = np.zeros_like(probs.data)
        gp[rows, labels] = np.where(above, -g / (n * clipped), 0.0)
        return (gp,)

    return _from_op(out, "cross_entropy", (probs,), bw)


def kl_divergence(p, q, floor: float = LOG_FLOOR) -> Tensor:
    """sum_i p_i * log(p_i / q_i), with both logs floored.

    Batched inputs sum the row-wise divergences.  The result is clamped
    at zero: Gibbs guarantees nonnegativity in exact arithmetic and the
    clamp removes the ~1e-14 float residue near p == q.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence shapes differ: {p.shape} vs {q.shape}")
    raw = tsum(mul(p, sub(safe_log(p, floor), safe_log(q, floor))))
    return relu(raw)
