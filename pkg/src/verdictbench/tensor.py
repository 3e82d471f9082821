"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation used by the encoder models lives here. Ops
record nodes onto the thread-local active :class:`Tape` in execution order,
which is automatically a topological order; ``backward`` replays the tape in
reverse and accumulates gradients into every ``requires_grad`` tensor that
contributed to the loss.

Arrays are float64 by default so finite-difference checks are meaningful;
benchmark runs may switch to float32 via :func:`using_dtype`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf as _erf_np

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "backward",
    "no_grad_forward",
    "get_default_dtype",
    "set_default_dtype",
    "using_dtype",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "total",
    "mean",
    "softmax_rows",
    "layer_norm",
    "dft2_real",
    "dft2_real_naive",
    "embedding_lookup",
    "dropout",
    "cross_entropy",
    "erf",
    "exp",
    "tanh",
    "sigmoid",
]

_state = threading.local()
_DEFAULT_DTYPE = np.float64


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Set the dtype used for newly created tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the default tensor dtype."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """A dense n-dimensional array, optionally carrying a gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self, context: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {context}")
        return self

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    # Arithmetic sugar; the real work happens in the module-level ops.
    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __sub__(self, other):
        return sub(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class _Node:
    __slots__ = ("op", "inputs", "output", "bw")

    def __init__(self, op: str, inputs: tuple, output: Tensor, bw: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.bw = bw


class Tape:
    """Ordered record of differentiable operations.

    Ops append nodes in execution order, so inputs always precede the node
    that consumes them. ``backward`` walks the list once, in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tapes.pop()
        return False

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, bw: Callable) -> None:
        output._tape = self
        self.nodes.append(_Node(op, tuple(inputs), output, bw))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(x) into ``x.grad`` for every requires_grad x.

        Repeated calls without zeroing grads accumulate, as plain addition.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        # Runtime gradients are tracked separately so a second backward pass
        # does not re-propagate values accumulated by the first.
        flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            out_grad = flowing.get(id(node.output))
            if out_grad is None:
                continue
            grads = node.bw(out_grad)
            for inp, g in zip(node.inputs, grads):
                if g is None:
                    continue
                key = id(inp)
                if key in flowing:
                    flowing[key] = flowing[key] + g
                else:
                    flowing[key] = g
        for node in self.nodes:
            for t in node.inputs + (node.output,):
                if t.requires_grad and id(t) in flowing:
                    g = flowing.pop(id(t))
                    if t.grad is None:
                        t.grad = g.copy()
                    else:
                        t.grad = t.grad + g
        if loss.requires_grad and id(loss) in flowing:
            g = flowing[id(loss)]
            loss.grad = g.copy() if loss.grad is None else loss.grad + g


def active_tape() -> Optional[Tape]:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar loss on its tape."""
    if loss._tape is None:
        raise ValueError("loss was not recorded on a tape")
    loss._tape.backward(loss)


@contextmanager
def no_grad_forward():
    """Run ops without recording; the inverse of being inside a Tape."""
    stack = getattr(_state, "tapes", None)
    saved = list(stack) if stack else []
    if stack:
        stack.clear()
    try:
        yield
    finally:
        if saved:
            if getattr(_state, "tapes", None) is None:
                _state.tapes = []
            _state.tapes.extend(saved)


def _make(op: str, inputs: Sequence[Tensor], data: np.ndarray, bw: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out._tape = None
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(op, inputs, out, bw)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bw(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make("add", (a, b), data, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bw(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make("sub", (a, b), data, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", (a, b), data, bw)


def scale(a: Tensor, factor: float) -> Tensor:
    c = a.data.dtype.type(factor)
    data = a.data * c

    def bw(g):
        return (g * c if a.requires_grad else None,)

    return _make("scale", (a,), data, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Inner dimensions must agree; leading dims broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires tensors with at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return _make("matmul", (a, b), data, bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inverse) if a.requires_grad else None,)

    return _make("transpose", (a,), data, bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    original = a.data.shape

    def bw(g):
        return (g.reshape(original) if a.requires_grad else None,)

    return _make("reshape", (a,), data, bw)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    if not parts:
        raise ValueError("concat of zero tensors")
    data = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.data.shape[axis] for t in parts]
    splits = np.cumsum(sizes[:-1])

    def bw(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, parts))

    return _make("concat", tuple(parts), data, bw)


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    data = a.data.sum(dtype=a.data.dtype).reshape(())

    def bw(g):
        return (np.broadcast_to(g, a.data.shape).copy() if a.requires_grad else None,)

    return _make("sum", (a,), data, bw)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    data = (a.data.sum(dtype=a.data.dtype) / n).reshape(())

    def bw(g):
        return (np.broadcast_to(g / n, a.data.shape).copy() if a.requires_grad else None,)

    return _make("mean", (a,), data, bw)


# ---------------------------------------------------------------------------
# nonlinear ops
# ---------------------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(g):
        return (g * data if a.requires_grad else None,)

    return _make("exp", (a,), data, bw)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - data * data) if a.requires_grad else None,)

    return _make("tanh", (a,), data, bw)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_values(a.data)

    def bw(g):
        return (g * data * (1.0 - data) if a.requires_grad else None,)

    return _make("sigmoid", (a,), data, bw)


_TWO_OVER_SQRT_PI = 2.0 / np.sqrt(np.pi)


def erf(a: Tensor) -> Tensor:
    data = _erf_np(a.data).astype(a.data.dtype, copy=False)
    x = a.data

    def bw(g):
        return (g * (_TWO_OVER_SQRT_PI * np.exp(-x * x)) if a.requires_grad else None,)

    return _make("erf", (a,), data, bw)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by row-max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        gy = g * data
        return (gy - data * gy.sum(axis=-1, keepdims=True) if a.requires_grad else None,)

    return _make("softmax_rows", (a,), data, bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if a.data.shape[-1] == 0:
        raise ValueError("layer_norm over an empty last axis")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data
    n = a.data.shape[-1]

    def bw(g):
        ga = gg = gb = None
        if a.requires_grad:
            gxhat = g * gain.data
            ga = inv * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.data.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.data.shape)
        return ga, gg, gb

    return _make("layer_norm", (a, gain, bias), data, bw)


def dft2_real(a: Tensor) -> Tensor:
    """Real part of the 2D discrete Fourier transform over the last two axes.

    Parameter-free token mixing: transforms the hidden axis, then the
    sequence axis. The adjoint of the real part of a symmetric-kernel DFT is
    the same transform, so backward reapplies it to the incoming gradient.
    """
    if a.data.ndim < 2:
        raise ValueError("dft2_real requires at least 2 dimensions")
    data = np.fft.fft2(a.data, axes=(-2, -1)).real.astype(a.data.dtype, copy=False)

    def bw(g):
        if not a.requires_grad:
            return (None,)
        return (np.fft.fft2(g, axes=(-2, -1)).real.astype(g.dtype, copy=False),)

    return _make("dft2_real", (a,), data, bw)


def dft2_real_naive(x: np.ndarray) -> np.ndarray:
    """Brute-force O(N^2)-per-axis DFT, real part. Oracle for dft2_real."""
    x = np.asarray(x, dtype=np.float64)
    seq, hidden = x.shape[-2], x.shape[-1]
    ks = np.arange(seq)
    ns = np.arange(hidden)
    w_seq = np.exp(-2j * np.pi * np.outer(ks, ks) / seq)
    w_hid = np.exp(-2j * np.pi * np.outer(ns, ns) / hidden)
    return (w_seq @ x.astype(complex) @ w_hid.T).real


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` at integer ``ids``; scatter-add backward."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"ids out of range [0, {table.data.shape[0]}) for embedding table"
        )
    data = table.data[ids]

    def bw(g):
        if not table.requires_grad:
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (gt,)

    return _make("embedding_lookup", (table,), data, bw)


def dropout(a: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: kept activations are divided by 1-p during training,
    so evaluation applies no rescaling. Identity when not training or p == 0.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs an rng stream")
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype)
    factor = keep / a.data.dtype.type(1.0 - p)
    data = a.data * factor

    def bw(g):
        return (g * factor if a.requires_grad else None,)

    return _make("dropout", (a,), data, bw)


def cross_entropy(logits: Tensor, label_ids: np.ndarray) -> Tensor:
    """Mean cross-entropy of rows of logits against integer labels."""
    labels = np.asarray(label_ids)
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy expects 2D logits, got {logits.shape}")
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match {n} rows")
    if n == 0:
        return _make("cross_entropy", (logits,), np.zeros((), dtype=logits.data.dtype), lambda g: (None,))
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"label outside [0, {c})")
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("non-finite logits in cross_entropy")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)
    data = (-logp[rows, labels].sum() / n).reshape(()).astype(logits.data.dtype)
    probs = np.exp(logp)

    def bw(g):
        if not logits.requires_grad:
            return (None,)
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return _make("cross_entropy", (logits,), data, bw)
