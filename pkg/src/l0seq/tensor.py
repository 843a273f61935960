"""Dense tensors with reverse-mode gradients, backed by NumPy arrays.

Only the kernels the encoder-decoder model and the gate layer need are
implemented; this is not a general autodiff system.  Each operation records
its parents and a backward closure; :func:`backward` replays the graph in
reverse topological order and accumulates gradients into ``Tensor.grad``.

Two numeric modes are supported globally:

* ``"verify"`` - float64, and every forward result is checked for NaN/Inf
  (a non-finite value raises :class:`~l0seq.errors.NumericError`).  All
  correctness tests run in this mode.
* ``"fast"`` - float32 with finite checks off, used by benchmarks.

Use :func:`set_mode` / :func:`get_mode` to switch, and :func:`no_grad` to
run forward passes without building a graph (evaluation and decoding).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import NumericError, ShapeError
from .rng import RngState

__all__ = [
    "Tensor",
    "tensor",
    "set_mode",
    "get_mode",
    "float_dtype",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "matmul",
    "maximum",
    "minimum",
    "clamp",
    "sigmoid",
    "exp",
    "log",
    "relu",
    "softmax",
    "layer_norm",
    "embedding",
    "dropout",
    "cross_entropy_smoothed",
    "concat",
    "index_select",
    "reshape",
    "transpose",
    "sum_",
    "mean_",
]

_MODE = "verify"
_GRAD = True

MASK_NEG = -1.0e30  # additive bias for disallowed attention keys


def set_mode(mode: str) -> None:
    """Select the global numeric mode: ``"verify"`` (f64) or ``"fast"`` (f32)."""
    global _MODE
    if mode not in ("verify", "fast"):
        raise ValueError(f"unknown numeric mode {mode!r}")
    _MODE = mode


def get_mode() -> str:
    return _MODE


def float_dtype() -> np.dtype:
    return np.dtype(np.float64 if _MODE == "verify" else np.float32)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation/decoding)."""
    global _GRAD
    prev, _GRAD = _GRAD, False
    try:
        yield
    finally:
        _GRAD = prev


def grad_enabled() -> bool:
    return _GRAD


class Tensor:
    """A dense n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=float_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are folded straight into the kernels
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _check_finite(arr: np.ndarray) -> None:
    if _MODE == "verify" and not np.isfinite(arr).all():
        raise NumericError("non-finite value produced in forward computation")


def _make(out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(out_data)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    track = _GRAD and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float_dtype()))


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor with d(loss)/d(tensor).

    ``loss`` must be a scalar built from tracked operations.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")

    # iterative topological order (graphs are deep enough to overflow recursion)
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        out_data = a.data + b

        def bwd(g, a=a):
            if a.requires_grad:
                _accum(a, g)

        return _make(out_data, (a,), bwd)
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd)


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return add(a, -b)
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        out_data = a.data * b

        def bwd(g, a=a, b=b):
            if a.requires_grad:
                _accum(a, g * b)

        return _make(out_data, (a,), bwd)
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product with broadcast batching over leading dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as e:  # incompatible batch dims
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}") from e

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), bwd)


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient is routed to the first operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = np.maximum(a.data, b.data)

    def bwd(g, a=a, b=b):
        pick_a = a.data >= b.data
        if a.requires_grad:
            _accum(a, _unbroadcast(g * pick_a, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * ~pick_a, b.shape))

    return _make(out_data, (a, b), bwd)


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient is routed to the first operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = np.minimum(a.data, b.data)

    def bwd(g, a=a, b=b):
        pick_a = a.data <= b.data
        if a.requires_grad:
            _accum(a, _unbroadcast(g * pick_a, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * ~pick_a, b.shape))

    return _make(out_data, (a, b), bwd)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero on the saturated flats."""
    x = _as_tensor(x)
    out_data = np.clip(x.data, lo, hi)

    def bwd(g, x=x):
        if x.requires_grad:
            _accum(x, g * ((x.data >= lo) & (x.data <= hi)))

    return _make(out_data, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = _sigmoid_np(x.data)

    def bwd(g, x=x, y=out_data):
        if x.requires_grad:
            _accum(x, g * y * (1.0 - y))

    return _make(out_data, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.exp(x.data)

    def bwd(g, x=x, y=out_data):
        if x.requires_grad:
            _accum(x, g * y)

    return _make(out_data, (x,), bwd)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.log(x.data)

    def bwd(g, x=x):
        if x.requires_grad:
            _accum(x, g / x.data)

    return _make(out_data, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.maximum(x.data, 0.0)

    def bwd(g, x=x):
        if x.requires_grad:
            _accum(x, g * (x.data > 0))

    return _make(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions / shape
# ---------------------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g, x=x):
        if not x.requires_grad:
            return
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _make(np.asarray(out_data), (x,), bwd)


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.reshape(shape)

    def bwd(g, x=x):
        if x.requires_grad:
            _accum(x, g.reshape(x.shape))

    return _make(out_data, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    out_data = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def bwd(g, x=x, inv=tuple(inv)):
        if x.requires_grad:
            _accum(x, np.transpose(g, inv))

    return _make(out_data, (x,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, tensors=tensors, offsets=offsets):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _make(out_data, tuple(tensors), bwd)


def index_select(x: Tensor, indices) -> Tensor:
    """Select rows (axis 0) by an integer index vector."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    out_data = x.data[idx]

    def bwd(g, x=x, idx=idx):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, idx, g)

    return _make(out_data, (x,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather embedding rows: table (V, d), ids any integer shape -> (*ids, d)."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def bwd(g, table=table, ids=ids):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.ravel(), g.reshape(-1, table.shape[-1]))

    return _make(out_data, (table,), bwd)


# ---------------------------------------------------------------------------
# fused neural-net kernels
# ---------------------------------------------------------------------------


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtracted), plain ndarray version."""
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not (-x.ndim <= axis < x.ndim):
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    y = softmax_np(x.data, axis=axis)

    def bwd(g, x=x, y=y):
        if x.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(x, y * (g - dot))

    return _make(y, (x,), bwd)


def layer_norm_np(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
                  eps: float = 1e-6) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def bwd(g, x=x, gain=gain, bias=bias, xhat=xhat, inv=inv):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            n = x.shape[-1]
            gy = g * gain.data
            gmean = gy.mean(axis=-1, keepdims=True)
            gdot = (gy * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gy - gmean - xhat * gdot))

    return _make(out_data, (x, gain, bias), bwd)


def dropout(x: Tensor, rate: float, rng: RngState) -> Tensor:
    """Inverted dropout: keep with probability 1-rate, scale kept values.

    Train-time only by construction; evaluation code never calls it."""
    x = _as_tensor(x)
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError(f"dropout rate must be < 1, got {rate}")
    keep = (rng.uniform(size=x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.data.dtype)
    out_data = x.data * keep

    def bwd(g, x=x, keep=keep):
        if x.requires_grad:
            _accum(x, g * keep)

    return _make(out_data, (x,), bwd)


def cross_entropy_smoothed(logits: Tensor, targets: np.ndarray,
                           smoothing: float) -> Tensor:
    """Per-position label-smoothed negative log-likelihood.

    logits (T, V), targets (T,) int.  The target distribution mixes the
    one-hot label with the uniform distribution over the full vocabulary:
    q[y] = 1 - s + s/V and q[v] = s/V elsewhere, so smoothing 0 reduces to
    plain cross-entropy.  Returns the per-position loss vector (T,).
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross entropy expects (T, V) logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    T, V = logits.shape
    if t.shape != (T,):
        raise ShapeError(f"targets shape {t.shape} does not match logits {logits.shape}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    sez = ez.sum(axis=1, keepdims=True)
    lse = np.log(sez)[:, 0] + m[:, 0]
    rows = np.arange(T)
    picked = (1.0 - smoothing) * z[rows, t] + (smoothing / V) * z.sum(axis=1)
    out_data = lse - picked

    def bwd(g, logits=logits, t=t, ez=ez, sez=sez):
        if logits.requires_grad:
            p = ez / sez
            q = np.full_like(p, smoothing / V)
            q[rows, t] += 1.0 - smoothing
            _accum(logits, (p - q) * g[:, None])

    return _make(out_data, (logits,), bwd)
