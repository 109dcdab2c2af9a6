"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tape`` records every differentiable operation in the order it is
executed (inputs always precede outputs, so the node list is already a
topological order). ``backward`` walks the list once in reverse and
accumulates gradients per node id. Tensors that never touch a tape are
plain immutable values.

Elementwise ops broadcast only scalar-vs-tensor and equal shapes; any
other broadcast must go through an explicit op (``expand``, ``add_bias``)
so shapes never drift silently.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class TapeError(RuntimeError):
    """Tape misuse: detached loss, double backward, mixed tapes."""


Array = np.ndarray
BackwardFn = Callable[[Array], tuple]


class Tape:
    """Append-only op record plus the gradient map filled by backward()."""

    def __init__(self) -> None:
        self.nodes: list[tuple[str, tuple, BackwardFn | None]] = []
        self.gradients: dict[int, Array] = {}
        self._watched: set[int] = set()
        self._consumed = False

    def _record(self, op: str, input_ids: tuple, backward: BackwardFn | None) -> int:
        node_id = len(self.nodes)
        self.nodes.append((op, input_ids, backward))
        return node_id

    def leaf(self, data, requires_grad: bool = True) -> "Tensor":
        t = Tensor(data, tape=self, requires_grad=requires_grad)
        return t

    def backward(self, loss: "Tensor") -> dict[int, Array]:
        if loss.tape is not self or loss.node_id is None:
            raise TapeError("loss tensor is not attached to this tape")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise TapeError("backward already called on this tape; build a fresh tape")
        self._consumed = True

        grads = self.gradients
        grads[loss.node_id] = np.ones_like(loss.data)
        for node_id in range(loss.node_id, -1, -1):
            g = grads.get(node_id)
            if g is None:
                continue
            _, input_ids, backward = self.nodes[node_id]
            if backward is None:
                continue
            for iid, gi in zip(input_ids, backward(g)):
                if iid is None or gi is None:
                    continue
                if iid in grads:
                    grads[iid] = grads[iid] + gi
                else:
                    grads[iid] = gi
        return grads

    def grad(self, t: "Tensor") -> "Tensor":
        """Gradient of the differentiated loss w.r.t. ``t`` (zeros if unreached)."""
        if t.tape is not self or t.node_id is None:
            raise TapeError("tensor does not belong to this tape")
        if not self._consumed:
            raise TapeError("backward has not been called yet")
        g = self.gradients.get(t.node_id)
        if g is None:
            g = np.zeros_like(t.data)
        return Tensor(g)


class Tensor:
    """Shaped float64 array, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "tape", "node_id")

    def __init__(self, data, tape: Tape | None = None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tape = tape
        if tape is not None:
            self.node_id: int | None = tape._record("leaf", (), None)
            if requires_grad:
                tape._watched.add(self.node_id)
        else:
            self.node_id = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def backward(self) -> dict[int, Array]:
        if self.tape is None:
            raise TapeError("tensor is not attached to a tape")
        return self.tape.backward(self)

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flags})\n{self.data}"

    # Operators cover the elementwise family; everything else is a function.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return scale(sub(self, other), -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _join_tape(op: str, inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise TapeError(f"{op}: operands belong to different tapes")
    return tape


def _make(op: str, inputs: Sequence[Tensor], out_data: Array, backward: BackwardFn) -> Tensor:
    tape = _join_tape(op, inputs)
    out = Tensor(out_data)
    if tape is not None:
        ids = tuple(t.node_id if t.tape is tape else None for t in inputs)
        out.tape = tape
        out.node_id = tape._record(op, ids, backward)
        out.requires_grad = any(t.requires_grad for t in inputs)
    return out


def _require_equal_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar and equal-shape broadcasting is supported)")


# ---------------------------------------------------------------------------
# elementwise family


def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return _make("add", (a,), a.data + float(b), lambda g: (g,))
    b = _as_tensor(b)
    _require_equal_shape("add", a, b)
    return _make("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return _make("sub", (a,), a.data - float(b), lambda g: (g,))
    b = _as_tensor(b)
    _require_equal_shape("sub", a, b)
    return _make("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    b = _as_tensor(b)
    _require_equal_shape("mul", a, b)
    return _make("mul", (a, b), a.data * b.data,
                 lambda g, ad=a.data, bd=b.data: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make("scale", (a,), a.data * c, lambda g: (g * c,))


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = expit(x.data)
    out = x.data * s

    def backward(g, xd=x.data, s=s):
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return _make("silu", (x,), out, backward)


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _make("square", (x,), x.data * x.data,
                 lambda g, xd=x.data: (2.0 * xd * g,))


def mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size

    def backward(g, shape=x.shape, n=n):
        return (np.full(shape, float(g) / n),)

    return _make("mean", (x,), np.asarray(x.data.mean()), backward)


def tsum(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def backward(g, shape=x.shape):
        return (np.full(shape, float(g)),)

    return _make("sum", (x,), np.asarray(x.data.sum()), backward)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Rows scaled to unit L2 norm along ``axis``; zero rows stay zero."""
    x = _as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    zero = norm == 0.0
    safe = np.where(zero, 1.0, norm)
    y = x.data / safe

    def backward(g, y=y, safe=safe, zero=zero, axis=axis):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        gx = (g - y * dot) / safe
        return (np.where(zero, 0.0, gx),)

    return _make("l2_normalize", (x,), y, backward)


# ---------------------------------------------------------------------------
# structured ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for [..., m, k] x [k, p] (shared weight) or equal leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading extents differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g, ad=a.data, bd=b.data):
        if bd.ndim == 2:
            ga = g @ bd.T
            if ad.ndim == 2:
                gb = ad.T @ g
            else:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
        return (ga, gb)

    return _make("matmul", (a, b), out, backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d], the one sanctioned non-scalar broadcast."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last extent of {x.shape}")

    def backward(g, lead=x.ndim - 1):
        gb = g.sum(axis=tuple(range(lead))) if lead else g
        return (g, gb)

    return _make("add_bias", (x, b), x.data + b.data, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g, y=y, axis=axis):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make("softmax", (x,), y, backward)


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Zero mean, unit variance per row (last axis); no learned affine."""
    x = _as_tensor(x)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"layer_norm: need at least one feature, got shape {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g, y=y, inv=inv):
        gm = g.mean(axis=-1, keepdims=True)
        gy = np.mean(g * y, axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make("layer_norm", (x,), y, backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)
    return _make("reshape", (x,), out,
                 lambda g, s=x.shape: (g.reshape(s),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    inv = tuple(np.argsort(axes))
    return _make("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)),
                 lambda g, inv=inv: (g.transpose(inv),))


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g, offsets=offsets, axis=axis):
        idx = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(offsets[:-1], offsets[1:]):
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _make("concat", parts, out, backward)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeError(f"slice_last: [{start}:{stop}] invalid for shape {x.shape}")
    out = np.ascontiguousarray(x.data[..., start:stop])

    def backward(g, shape=x.shape, start=start, stop=stop):
        gx = np.zeros(shape)
        gx[..., start:stop] = g
        return (gx,)

    return _make("slice_last", (x,), out, backward)


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Repeat a length-1 axis ``n`` times (explicit broadcast)."""
    x = _as_tensor(x)
    if x.shape[axis] != 1:
        raise ShapeError(f"expand: axis {axis} of shape {x.shape} is not 1")
    out = np.repeat(x.data, n, axis=axis)
    return _make("expand", (x,), out,
                 lambda g, axis=axis: (g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------------------
# gradient oracle


def backward(loss: Tensor) -> dict[int, Array]:
    """Differentiate a scalar loss; returns the tape's node-id -> grad map."""
    return loss.backward()


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar-valued ``f`` at ``x``.

    ``f`` must be pure and deterministic; runs 2 evaluations per element.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_grad: h must be positive, got {h}")
    base = x.data.copy()
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base.copy())).data)
        flat[i] = orig - h
        fm = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.reshape(x.shape))
