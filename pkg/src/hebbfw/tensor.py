"""Dense numpy-backed tensors with reverse-mode differentiation.

Only the kernels needed by the fast-weight module, the two backbone families
and the prototypical loss are provided. Layout is row-major and broadcasting
follows numpy's trailing-axis alignment.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = (np.float32, np.float64)


class DimensionError(ValueError):
    """Raised when operand extents are incompatible."""


class NumericalError(ArithmeticError):
    """Raised when a non-finite value shows up where it must not."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        dtype = np.dtype(dtype)
        if dtype.type not in _DTYPES:
            raise TypeError(f"unsupported dtype {dtype}")
        return np.asarray(arr, dtype=dtype, order="C")
    if arr.dtype.type in _DTYPES:
        return np.asarray(arr, order="C")
    return np.asarray(arr, dtype=np.float64, order="C")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float32/float64 array that can take part in a recorded graph."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        GradientContext(self).run(grad)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return hadamard(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms -----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)


def _wrap(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype if dtype is not None else np.float64))


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(out_data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


class GradientContext:
    """Reverse pass over the graph reachable from ``root``.

    ``order`` lists the recorded nodes in topological order (root last).
    Leaf gradients are accumulated into ``Tensor.grad``; intermediate
    gradients live only for the duration of :meth:`run`.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.order = self._topological(root)

    @staticmethod
    def _topological(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def run(self, grad=None) -> None:
        root = self.root
        if not root.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if root.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            grad = np.ones_like(root.data)
        grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.dtype)}
        for node in reversed(self.order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def hadamard(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return _record(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _record(a.data * a.dtype.type(factor), (a,), lambda g: (g * factor,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    return _record(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1.0),),
    )


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, _wrap(b, a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return _wrap(a, b.dtype), b
    return _wrap(a), _wrap(b)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * 0.5 / out,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _record(t, (x,), lambda g: (g * (1.0 - t * t),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    z = x.data
    z2 = z * z
    t = np.tanh(_GELU_C * z * (1.0 + 0.044715 * z2))
    out = 0.5 * z * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * z2)
        return (g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * d_inner),)

    return _record(out, (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Elementwise clamp to ``[lo, hi]``.

    The gradient is 1 on the closed interval (exact boundary values pass
    through) and 0 strictly outside it.
    """
    if lo > hi:
        raise ValueError(f"clamp bounds inverted: lo={lo} > hi={hi}")
    inside = (x.data >= lo) & (x.data <= hi)
    return _record(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(x.data.sum(axis=axes, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(tsum(x, axes, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return _record(
        np.asarray(x.data.transpose(axes), order="C"),
        (x,),
        lambda g: (g.transpose(inverse),),
    )


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from None
    return _record(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record(np.asarray(x.data[index], order="C"), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _record(out, tensors, backward)


def pad(x: Tensor, widths, value: float | np.ndarray = 0.0) -> Tensor:
    """Constant padding. ``widths`` is a per-axis list of (before, after).

    ``value`` may be an array broadcastable against ``x`` (e.g. one fill
    value per channel); the padded border takes it, the interior keeps ``x``.
    """
    widths = [tuple(int(v) for v in w) for w in widths]
    if len(widths) != x.ndim:
        raise DimensionError(f"pad widths {widths} do not match rank of {x.shape}")
    out_shape = tuple(s + a + b for s, (a, b) in zip(x.shape, widths))
    out = np.empty(out_shape, dtype=x.dtype)
    out[...] = value
    inner = tuple(slice(a, a + s) for s, (a, _) in zip(x.shape, widths))
    out[inner] = x.data
    return _record(out, (x,), lambda g: (g[inner],))


def roll(x: Tensor, shift, axis) -> Tensor:
    neg = tuple(-s for s in shift) if isinstance(shift, (tuple, list)) else -shift
    return _record(np.roll(x.data, shift, axis=axis), (x,), lambda g: (np.roll(g, neg, axis=axis),))


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _record(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return _record(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift.

    ``gamma`` and ``beta`` may be omitted for a parameter-free normalisation.
    """
    d = x.shape[-1]
    for label, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"layer_norm {label} shape {p.shape} does not match last axis of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    parents = [x]
    if gamma is not None:
        parents.append(gamma)
    if beta is not None:
        parents.append(beta)
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gamma.data if gamma is not None else g
        dx = rstd * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [dx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return _record(out, parents, backward)


def frobenius_normalize(m: Tensor, eps: float) -> Tensor:
    """Divide each trailing matrix by (its Frobenius norm + eps)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = np.sqrt((m.data * m.data).sum(axis=(-2, -1), keepdims=True))
    denom = norm + eps
    out = m.data / denom

    def backward(g):
        proj = (g * m.data).sum(axis=(-2, -1), keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        corr = np.where(norm > 0, proj / (denom * denom * safe), 0.0)
        return (g / denom - m.data * corr,)

    return _record(out, (m,), backward)


# ---------------------------------------------------------------------------
# image helpers


def patchify(images: Tensor, patch: int) -> Tensor:
    """``B×C×H×W`` to ``B×N×(C·patch²)`` with row-major patch order."""
    if images.ndim != 4:
        raise DimensionError(f"patchify expects B×C×H×W, got {images.shape}")
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise DimensionError(f"image extent {h}×{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = reshape(images, (b, c, gh, patch, gw, patch))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    return reshape(x, (b, gh * gw, c * patch * patch))


def unpatchify(tokens: Tensor, patch: int, channels: int, height: int, width: int) -> Tensor:
    b = tokens.shape[0]
    gh, gw = height // patch, width // patch
    if tokens.shape[1:] != (gh * gw, channels * patch * patch):
        raise DimensionError(f"token shape {tokens.shape} does not match {channels}×{height}×{width}/p{patch}")
    x = reshape(tokens, (b, gh, gw, channels, patch, patch))
    x = transpose(x, (0, 3, 1, 4, 2, 5))
    return reshape(x, (b, channels, height, width))


def gap(x: Tensor) -> Tensor:
    """Mean over the token axis of ``B×N×d``."""
    if x.ndim != 3 or x.shape[1] < 1:
        raise DimensionError(f"gap expects B×N×d with N >= 1, got {x.shape}")
    return mean(x, axis=1)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)
