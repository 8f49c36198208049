"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays in row-major NCHW layout. Gradients are recorded on a
Tape: every differentiable op executed while a tape is active appends one
record, and ``Tape.backward`` replays the records in exact reverse execution
order, accumulating gradients additively across fan-out.

Two float precisions are supported (float32 for training, float64 for
finite-difference gradient checks); the active precision is a process-wide
setting chosen per run, not mixed within one.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "GradCheckError",
    "ShapeError",
    "set_default_dtype",
    "get_default_dtype",
    "using_dtype",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "sigmoid",
    "sqrt",
    "tsum",
    "tmean",
    "amax",
    "reshape",
    "concat",
    "scale_channels",
    "conv2d",
    "maxpool2d",
    "batch_norm_train",
    "channel_affine",
    "cross_entropy",
    "grad_check",
]

_DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradCheckError(RuntimeError):
    """Raised when a gradient check cannot be evaluated (non-finite loss)."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype).type
    if dt not in _FLOAT_DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default precision (e.g. float64 for grad checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """A dense floating-point value plus an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype.type in _FLOAT_DTYPES:
            arr = data  # keep float arrays as-is, no copy
        else:
            arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(_DEFAULT_DTYPE)
        if 0 in arr.shape:
            raise ShapeError(f"tensor extents must all be >= 1, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars are promoted to constants of the operand dtype.
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable tensor (requires_grad defaults to True)."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Tape:
    """Ordered record of executed ops; backward walks it in reverse.

    Execution order is a valid topological order of the data-flow graph, so
    replaying records last-to-first propagates gradients correctly without an
    explicit sort. Gradient contributions add, which makes fan-out nodes
    accumulate as required.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        _push_tape(self)
        return self

    def __exit__(self, *exc) -> None:
        _pop_tape(self)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._records.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        for out, inputs, backward in reversed(self._records):
            if out.grad is None:
                continue
            grads = backward(out.grad)
            for tensor, grad in zip(inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = grad if grad.dtype == tensor.data.dtype else grad.astype(tensor.data.dtype)
                else:
                    tensor.grad = tensor.grad + grad


_TAPE_STACK: list[Tape] = []


def _push_tape(tape: Tape) -> None:
    _TAPE_STACK.append(tape)


def _pop_tape(tape: Tape) -> None:
    if not _TAPE_STACK or _TAPE_STACK[-1] is not tape:
        raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
    _TAPE_STACK.pop()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = _active_tape()
    if tape is not None and requires:
        tape._record(out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        return (-g,)

    return _make(-a.data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0)

    def backward(g):
        return (g * mask,)

    return _make(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # Stable in both tails: 1/(1+e^-x) for x >= 0, e^x/(1+e^x) otherwise.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        return (g * (0.5 / out),)

    return _make(out, (a,), backward)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape) / count,)

    return _make(out, (a,), backward)


def amax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum over axes; gradient routes to the first attaining element."""
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    kept = tuple(ax for ax in range(a.ndim) if ax not in axes)
    moved = np.transpose(a.data, kept + axes)
    lead = moved.shape[: len(kept)]
    flat = moved.reshape(lead + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        shape = list(a.shape)
        for ax in axes:
            shape[ax] = 1
        out = out.reshape(shape)

    def backward(g):
        g_flat = g.reshape(lead) if keepdims else g
        grad_flat = np.zeros_like(flat)
        np.put_along_axis(grad_flat, idx[..., None], g_flat[..., None], axis=-1)
        grad = grad_flat.reshape(moved.shape)
        inv = np.argsort(kept + axes)
        return (np.transpose(grad, inv),)

    return _make(out, (a,), backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(ts), backward)


def scale_channels(x: Tensor, g: Tensor) -> Tensor:
    """Multiply an NCHW map by per-example per-channel weights of shape (N, C)."""
    x = _as_tensor(x)
    g = _as_tensor(g)
    if x.ndim != 4 or g.ndim != 2 or x.shape[:2] != g.shape:
        raise ShapeError(f"scale_channels: map {x.shape} vs weights {g.shape}")
    gb = g.data[:, :, None, None]
    out = x.data * gb

    def backward(grad):
        return grad * gb, (grad * x.data).sum(axis=(2, 3))

    return _make(out, (x, g), backward)


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    """Lower NCHW patches to a (C*k*k, N*Ho*Wo) matrix for a single gemm."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    xt = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * k * k, n * ho * wo), ho, wo


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIkk weight, no bias.

    Lowered to a patch-matrix (im2col) multiply; the gradient reuses the saved
    patch matrix for the weight and scatters patch columns back for the input.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    if weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: kernel must be square, got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {x.shape} do not match weight input channels {weight.shape}"
        )
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    n, _, h, w = x.shape
    cout, cin, k, _ = weight.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {x.shape} with padding={padding}")

    cols, ho, wo = _im2col(x.data, k, stride, padding)
    w2 = weight.data.reshape(cout, cin * k * k)
    out = np.ascontiguousarray((w2 @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gcols = (w2.T @ g2).reshape(cin, k, k, n, ho, wo)
        hp, wp = h + 2 * padding, w + 2 * padding
        gxt = np.zeros((cin, n, hp, wp), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
        gx = np.ascontiguousarray(gxt.transpose(1, 0, 2, 3))
        if padding:
            gx = gx[:, :, padding : padding + h, padding : padding + w]
        return gx, gw

    return _make(out, (x, weight), backward)


def maxpool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Strided spatial max pooling; gradient routes to the first argmax."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kernel) // stride + 1
    wo = (wp - kernel) // stride + 1
    windows = np.empty((n, c, kernel * kernel, ho, wo), dtype=xp.dtype)
    for i in range(kernel):
        for j in range(kernel):
            windows[:, :, i * kernel + j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    idx = windows.argmax(axis=2)
    out = np.take_along_axis(windows, idx[:, :, None], axis=2)[:, :, 0]

    def backward(g):
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        ii, jj = np.divmod(idx, kernel)
        oh = np.arange(ho)[None, None, :, None]
        ow = np.arange(wo)[None, None, None, :]
        rows = ii + oh * stride
        cols = jj + ow * stride
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gxp, (nn, cc, rows, cols), g)
        if padding:
            gxp = gxp[:, :, padding : padding + h, padding : padding + w]
        return (gxp,)

    return _make(out, (x,), backward)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple[int, ...],
                     eps: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Fused train-mode batch normalization over the given reduction axes.

    Normalizes with biased batch statistics, applies the per-channel affine,
    and returns (output, batch_mean, batch_var) with the statistics flattened
    to shape (C,). The gradient is the exact batch-norm gradient, including
    the dependence of the statistics on the input.
    """
    x = _as_tensor(x)
    stat_shape = tuple(1 if ax in axes else x.shape[ax] for ax in range(x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    diff = x.data - mu
    var = (diff * diff).mean(axis=axes, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = diff / sigma
    gb = gamma.data.reshape(stat_shape)
    out = xhat * gb + beta.data.reshape(stat_shape)

    def backward(g):
        gxh = g * gb
        mean_gxh = gxh.mean(axis=axes, keepdims=True)
        mean_gxh_xhat = (gxh * xhat).mean(axis=axes, keepdims=True)
        gx = (gxh - mean_gxh - xhat * mean_gxh_xhat) / sigma
        ggamma = (g * xhat).sum(axis=axes).reshape(gamma.shape)
        gbeta = g.sum(axis=axes).reshape(beta.shape)
        return gx, ggamma, gbeta

    out_t = _make(out, (x, gamma, beta), backward)
    return out_t, mu.reshape(-1), var.reshape(-1)


def channel_affine(x: Tensor, scale: np.ndarray, shift: np.ndarray) -> Tensor:
    """Per-channel affine with constant coefficients (eval-mode normalization).

    Differentiable with respect to x only; scale and shift are treated as
    fixed running-statistic-derived constants.
    """
    x = _as_tensor(x)
    stat_shape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    sb = scale.reshape(stat_shape)
    out = x.data * sb + shift.reshape(stat_shape)

    def backward(g):
        return (g * sb,)

    return _make(out, (x,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch. Labels are integer class ids."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: expected (batch, classes) logits, got {logits.shape}")
    labels = np.asarray(labels)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} does not match batch {n}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    log_probs = (z - zmax) - np.log(sez)
    loss = -log_probs[np.arange(n), labels].mean()

    def backward(g):
        probs = ez / sez
        probs[np.arange(n), labels] -= 1.0
        return (g * probs / n,)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def grad_check(fn: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[Tensor], eps: float = 1e-4) -> float:
    """Max relative error between tape gradients and central finite differences.

    ``fn`` must map the given tensors to a scalar Tensor and be deterministic.
    Inputs must be float64; finite differences are unreliable in float32.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check: inputs must be float64")
        t.requires_grad = True
        t.grad = None

    with Tape() as tape:
        loss = fn(inputs)
    if not np.isfinite(loss.data).all():
        raise GradCheckError("grad_check: non-finite loss; check aborted")
    tape.backward(loss)

    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(inputs).data
            flat[i] = orig - eps
            lo = fn(inputs).data
            flat[i] = orig
            if not (np.isfinite(hi).all() and np.isfinite(lo).all()):
                raise GradCheckError("grad_check: non-finite loss during perturbation; check aborted")
            fd = (float(hi) - float(lo)) / (2.0 * eps)
            an = float(analytic.reshape(-1)[i])
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
