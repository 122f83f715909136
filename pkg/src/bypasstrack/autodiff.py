"""Minimal tape-based reverse-mode autodiff over numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in order;
``Tape.backward`` walks them in reverse.  Outside a tape nothing is recorded,
which doubles as the inference fast path.

Elementwise ops accept operands of identical shape, scalars, or a trailing
suffix shape (a ``(d,)`` row against ``(..., d)``, positional embeddings
``(n, d)`` against ``(B, n, d)``).  Nothing else broadcasts.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "ShapeError",
    "ContractError",
    "GradCheckError",
    "Tensor",
    "Parameter",
    "Tape",
    "default_dtype",
    "get_default_dtype",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "swap_last",
    "getitem",
    "scatter_rows",
    "concat",
    "broadcast_to",
    "tensor_sum",
    "tensor_mean",
    "softmax_rows",
    "layer_norm",
    "batch_norm",
    "conv2d",
    "apply_unary",
    "exp",
    "log",
    "minimum",
    "maximum",
    "where_batch",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class GradCheckError(ArithmeticError):
    """The finite-difference oracle hit a non-finite value."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def is_recording() -> bool:
    """True while a tape is active, i.e. when ops must keep backward rules."""
    return bool(_tape_stack())


def get_default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype given to newly created tensors."""
    previous = get_default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or get_default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

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

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis, keepdims)


class Parameter(Tensor):
    """A named trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


class _Op:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; every op whose inputs require gradients is
    appended while the tape is active.
    """

    def __init__(self) -> None:
        self.ops: list[_Op] = []
        self._produced: set[int] = set()

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, inputs: tuple, output: Tensor, backward_fn) -> None:
        self.ops.append(_Op(inputs, output, backward_fn))
        self._produced.add(id(output))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")
        if id(loss) not in self._produced:
            _accumulate_leaf(loss, np.ones_like(loss.data))
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for op in reversed(self.ops):
            g = grads.pop(id(op.output), None)
            if g is None:
                continue
            in_grads = op.backward(g)
            for inp, gi in zip(op.inputs, in_grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in self._produced:
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                else:
                    _accumulate_leaf(inp, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every upstream ``requires_grad`` leaf."""
    tape.backward(loss)


def _make(data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = needs
    if needs:
        tape.record(inputs, out, backward_fn)
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _check_broadcast(a: tuple, b: tuple, opname: str) -> None:
    if a == b or a == () or b == ():
        return
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{opname}: incompatible shapes {a} and {b} (only suffix broadcasting is allowed)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(dtype=np.float64), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)), dtype=np.float64).astype(g.dtype)


def _binary_prep(a, b, opname):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    _check_broadcast(a.shape, b.shape, opname)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or ``a[..., m, k] @ b[..., k, n]`` (equal batch dims)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(np.argsort(axes)),))


def swap_last(a: Tensor) -> Tensor:
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(a: Tensor, index) -> Tensor:
    src_shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw)


def scatter_rows(base: Tensor, rows: np.ndarray, values: Tensor) -> Tensor:
    """Copy of ``base`` with ``base[rows] = values`` along the first axis."""
    rows = np.asarray(rows)
    out = base.data.copy()
    out[rows] = values.data

    def bw(g):
        gb = g.copy()
        gb[rows] = 0
        return gb, g[rows]

    return _make(out, (base, values), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    """Prepend leading axes so ``a`` takes ``shape`` (suffix rule only)."""
    shape = tuple(shape)
    _check_broadcast(a.shape, shape, "broadcast_to")
    src = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, src),))


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src, dtype = a.shape, a.dtype
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64), dtype=dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(dtype),)

    return _make(out, (a,), bw)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tensor_sum(a, axis, keepdims), 1.0 / count)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by per-row max subtraction."""
    y = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y *= (1.0 / y.sum(axis=-1, keepdims=True, dtype=np.float64)).astype(y.dtype)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True, dtype=np.float64).astype(g.dtype)
        return (y * (g - dot),)

    return _make(y, (x,), bw)


def _normalize(xd: np.ndarray, axes, eps: float):
    mean = xd.mean(axis=axes, keepdims=True, dtype=np.float64)
    centered = xd - mean.astype(xd.dtype)
    var = np.mean(centered * centered, axis=axes, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    return centered * inv, inv, mean, var


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5, columns=None) -> Tensor:
    """Per-token normalisation over the last axis followed by a per-channel affine.

    With ``columns`` (an index array) only those output channels are produced;
    the statistics still use the full row.
    """
    d = x.shape[-1]
    if scale.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm: scale {scale.shape}/shift {shift.shape} must be ({d},)")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    xhat, inv, _, _ = _normalize(x.data, -1, eps)
    if columns is None:
        gamma, sel = scale.data, xhat
        out = xhat * gamma + shift.data
    else:
        gamma, sel = scale.data[columns], xhat[..., columns]
        out = sel * gamma + shift.data[columns]

    def bw(g):
        lead = tuple(range(x.ndim - 1))
        dscale = (g * sel).sum(axis=lead, dtype=np.float64).astype(x.dtype)
        dshift = g.sum(axis=lead, dtype=np.float64).astype(x.dtype)
        dxhat = g * gamma
        if columns is not None:
            full = np.zeros(x.shape, dtype=x.dtype)
            full[..., columns] = dxhat
            dxhat = full
            dscale_full = np.zeros(d, dtype=x.dtype)
            dshift_full = np.zeros(d, dtype=x.dtype)
            dscale_full[columns] = dscale
            dshift_full[columns] = dshift
            dscale, dshift = dscale_full, dshift_full
        m1 = dxhat.mean(axis=-1, keepdims=True, dtype=np.float64)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True, dtype=np.float64)
        dx = (inv * (dxhat - m1 - xhat * m2)).astype(x.dtype)
        return dx, dscale, dshift

    return _make(out, (x, scale, shift), bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Channels-last batch normalisation; updates running stats in place when training."""
    c = x.shape[-1]
    axes = tuple(range(x.ndim - 1))
    if training:
        xhat, inv, mean, var = _normalize(x.data, axes, eps)
        count = x.size // c
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.reshape(c)
        unbiased = var.reshape(c) * (count / max(count - 1, 1))
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        inv = (1.0 / np.sqrt(running_var.astype(np.float64) + eps)).astype(x.dtype)
        xhat = ((x.data - running_mean.astype(x.dtype)) * inv).astype(x.dtype)
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        dxhat = g * gd
        if training:
            m1 = dxhat.mean(axis=axes, keepdims=True, dtype=np.float64)
            m2 = (dxhat * xhat).mean(axis=axes, keepdims=True, dtype=np.float64)
            dx = (inv * (dxhat - m1 - xhat * m2)).astype(x.dtype)
        else:
            dx = dxhat * inv
        dgamma = (g * xhat).sum(axis=axes, dtype=np.float64).astype(x.dtype)
        dbeta = g.sum(axis=axes, dtype=np.float64).astype(x.dtype)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 convolution on channels-last input.

    ``x`` is ``(B, H, W, C_in)``, ``weight`` is ``(kh, kw, C_in, C_out)``.
    """
    kh, kw, cin, cout = weight.shape
    if x.ndim != 4 or x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    b, h, w, _ = x.shape
    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    oh, ow = h + 2 * p - kh + 1, w + 2 * p - kw + 1
    if kh == 1 and kw == 1:
        cols = xp
    else:
        cols = np.concatenate(
            [xp[:, i:i + oh, j:j + ow, :] for i in range(kh) for j in range(kw)], axis=-1
        )
    w2 = weight.data.reshape(kh * kw * cin, cout)
    out = cols @ w2
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.reshape(-1, kh * kw * cin).T @ g2).reshape(weight.shape)
        gcols = g @ w2.T
        if kh == 1 and kw == 1:
            gxp = gcols
        else:
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            k = 0
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + oh, j:j + ow, :] += gcols[..., k * cin:(k + 1) * cin]
                    k += 1
        gx = gxp[:, p:p + h, p:p + w, :] if p else gxp
        gb = g2.sum(axis=0, dtype=np.float64).astype(x.dtype) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out.astype(x.dtype, copy=False), inputs, bw)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def _unary_forward(xd: np.ndarray, kind: str, params):
    if kind == "sigmoid":
        y = special.expit(xd)
        return y, lambda g: g * y * (1.0 - y)
    if kind == "gelu":
        inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
        t = np.tanh(inner)
        y = 0.5 * xd * (1.0 + t)

        def gelu_bw(g):
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
            return g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner)

        return y, gelu_bw
    if kind == "relu":
        return np.maximum(xd, 0), lambda g: g * (xd > 0)
    if kind == "abs":
        return np.abs(xd), lambda g: g * np.sign(xd)
    if kind == "clip":
        lo, hi = params
        inside = (xd > lo) & (xd < hi)
        return np.clip(xd, lo, hi), lambda g: g * inside
    if kind == "identity":
        return xd, lambda g: g
    if kind == "tanh":
        y = np.tanh(xd)
        return y, lambda g: g * (1.0 - y * y)
    if kind == "exp":
        y = np.exp(xd)
        return y, lambda g: g * y
    if kind == "log":
        return np.log(xd), lambda g: g / xd
    raise ContractError(f"unknown unary kind {kind!r}")


def apply_unary(x: Tensor, kind: str, *params) -> Tensor:
    """Elementwise ``sigmoid | gelu | relu | abs | clip | identity | tanh | exp | log``.

    ``clip`` takes bounds ``(a, b)`` with ``a <= b``.  Kinks (relu at 0, abs at
    0, clip at its bounds) get subgradient 0.  ``gelu`` is the tanh form.
    """
    if kind == "clip":
        if len(params) != 2 or params[0] > params[1]:
            raise ContractError(f"clip needs bounds a <= b, got {params}")
    y, grad_fn = _unary_forward(x.data, kind, params)
    return _make(np.asarray(y, dtype=x.dtype), (x,), lambda g: (grad_fn(g).astype(x.dtype, copy=False),))


def exp(x: Tensor) -> Tensor:
    return apply_unary(x, "exp")


def log(x: Tensor) -> Tensor:
    return apply_unary(x, "log")


def minimum(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "minimum")
    pick_a = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _make(np.where(pick_a, a.data, b.data), (a, b), bw)


def maximum(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "maximum")
    pick_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _make(np.where(pick_a, a.data, b.data), (a, b), bw)


def where_batch(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Per-sample select: row ``i`` of the result is ``a[i]`` if ``mask[i]`` else ``b[i]``."""
    if a.shape != b.shape:
        raise ShapeError(f"where_batch: {a.shape} vs {b.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:1]:
        raise ShapeError(f"where_batch: mask {mask.shape} vs batch {a.shape[:1]}")
    m = mask.reshape((-1,) + (1,) * (a.ndim - 1))

    def bw(g):
        return g * m, g * ~m

    return _make(np.where(m, a.data, b.data), (a, b), bw)


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-3,
    dtype=np.float64,
    floor: float = 1e-8,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` is re-evaluated with every coordinate of every parameter nudged by
    ``±step``.  The error denominator is at least ``floor``.  The parameters
    are promoted to ``dtype`` for the duration of the check and restored
    afterwards, grads included.
    """
    if step <= 0:
        raise ContractError("grad_check step must be positive")
    params = list(params)
    saved = [(p.data, p.grad) for p in params]
    try:
        with default_dtype(dtype):
            for p in params:
                p.data = p.data.astype(dtype)
                p.grad = None
            with Tape() as tape:
                loss = f()
            if loss.requires_grad:
                tape.backward(loss)
            analytic = [
                np.zeros(p.shape, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
                for p in params
            ]
            worst = 0.0
            for p, g_ad in zip(params, analytic):
                flat = p.data.reshape(-1)
                g_ad = g_ad.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    hi = float(f().data.sum())
                    flat[i] = orig - step
                    lo = float(f().data.sum())
                    flat[i] = orig
                    if not (np.isfinite(hi) and np.isfinite(lo)):
                        raise GradCheckError(f"non-finite f near {p.name or 'parameter'}[{i}]")
                    g_fd = (hi - lo) / (2.0 * step)
                    err = abs(g_fd - g_ad[i]) / max(floor, abs(g_fd) + abs(g_ad[i]))
                    worst = max(worst, err)
    finally:
        for p, (data, grad) in zip(params, saved):
            p.data = data
            p.grad = grad
    return worst
