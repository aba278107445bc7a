"""Dense float64 tensors with reverse-mode automatic differentiation.

Every numeric quantity in the package flows through :class:`Tensor`.
Values are numpy arrays; each operation optionally records how to push
gradients back to its inputs. Calling :func:`backward` on a scalar loss
walks the recorded graph once, in reverse topological order, and
accumulates gradients into ``grad`` on every leaf created with
``requires_grad=True``. The graph is freed afterwards, so memory is
bounded by one forward pass.

Conventions:
  * all values are float64, row-major;
  * binary elementwise ops broadcast numpy-style and gradients are
    summed back over broadcast axes;
  * convolutions are channels-last ([H, W, C], optionally with a
    leading batch axis) and support "valid" padding only.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked for autodiff.

    ``_parents`` / ``_backward`` describe one recorded operation:
    ``_backward(g)`` maps the upstream gradient to a tuple of gradients
    aligned with ``_parents`` (``None`` for untracked parents). Leaves
    have no parents; parameter leaves accumulate into ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; the module-level functions are the real surface
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _from_op(data, parents, backward_fn) -> Tensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` back down to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: cannot broadcast shapes {a.data.shape} and {b.data.shape}"
        ) from None


# ---------------------------------------------------------------------------
# elementwise operations


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    return _from_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.data.shape) if b.requires_grad else None,
        )

    return _from_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _from_op(ad * bd, (a, b), backward)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = _lift(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _from_op(a.data * c, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    y = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        return (g * y * (1.0 - y),)

    return _from_op(y, (a,), backward)


def tanh(a) -> Tensor:
    a = _lift(a)
    y = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _from_op(y, (a,), backward)


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _from_op(np.where(mask, a.data, 0.0), (a,), backward)


def elu(a) -> Tensor:
    """Exponential linear unit, alpha = 1."""
    a = _lift(a)
    neg = np.exp(np.minimum(a.data, 0.0)) - 1.0
    y = np.where(a.data > 0, a.data, neg)

    def backward(g):
        return (g * np.where(a.data > 0, 1.0, neg + 1.0),)

    return _from_op(y, (a,), backward)


def exp(a) -> Tensor:
    a = _lift(a)
    y = np.exp(a.data)

    def backward(g):
        return (g * y,)

    return _from_op(y, (a,), backward)


def log(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: input must be strictly positive")
    ad = a.data

    def backward(g):
        return (g / ad,)

    return _from_op(np.log(ad), (a,), backward)


#: name -> callable registry for the elementwise family; every entry has a
#: gradient rule attached by construction.
ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "elu": elu,
    "relu": relu,
    "exp": exp,
    "log": log,
}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name (binary ops take ``b``)."""
    try:
        fn = ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("add", "sub", "mul", "scale"):
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supported shapes: [m,k]@[k,n], [B,m,k]@[k,n] and [B,m,k]@[B,k,n].
    """
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.ndim > 3 or bd.ndim > 3:
        raise ShapeError(f"matmul: unsupported ranks {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ: {ad.shape} @ {bd.shape}")
    if bd.ndim == 3 and (ad.ndim != 3 or ad.shape[0] != bd.shape[0]):
        raise ShapeError(f"matmul: batch dimensions differ: {ad.shape} @ {bd.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if ad.ndim == 3 and bd.ndim == 2:
                gb = np.tensordot(ad, g, axes=([0, 1], [0, 1]))
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _from_op(ad @ bd, (a, b), backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    a = _lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _from_op(y, (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axes, ndim):
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(ax % ndim for ax in axes))


def reduce(op_kind: str, a, axes, keepdims: bool = False) -> Tensor:
    """Reduce over ``axes`` with ``op_kind`` in {sum, mean, max}."""
    a = _lift(a)
    axes = _normalize_axes(axes, a.data.ndim)
    for ax in axes:
        if a.data.shape[ax] == 0:
            raise ValueError(f"reduce: empty reduction axis {ax} in shape {a.data.shape}")
    kept = list(a.data.shape)
    for ax in axes:
        kept[ax] = 1
    count = int(np.prod([a.data.shape[ax] for ax in axes]))

    if op_kind == "sum" or op_kind == "mean":
        y = a.data.sum(axis=axes, keepdims=keepdims)
        if op_kind == "mean":
            y = y / count

        def backward(g):
            gk = g.reshape(kept)
            gk = np.broadcast_to(gk, a.data.shape)
            return (gk / count if op_kind == "mean" else gk.copy(),)

    elif op_kind == "max":
        ym = a.data.max(axis=axes, keepdims=True)
        y = ym if keepdims else ym.reshape([s for i, s in enumerate(kept) if i not in axes])
        mask = a.data == ym
        nmax = mask.sum(axis=axes, keepdims=True)

        def backward(g):
            gk = g.reshape(kept)
            return (mask * (gk / nmax),)

    else:
        raise ValueError(f"unknown reduce op {op_kind!r}")

    return _from_op(y, (a,), backward)


def rsum(a, axes, keepdims: bool = False) -> Tensor:
    return reduce("sum", a, axes, keepdims)


def rmean(a, axes, keepdims: bool = False) -> Tensor:
    return reduce("mean", a, axes, keepdims)


def rmax(a, axes, keepdims: bool = False) -> Tensor:
    return reduce("max", a, axes, keepdims)


def mean_all(a) -> Tensor:
    a = _lift(a)
    return rmean(a, tuple(range(a.data.ndim)))


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old = a.data.shape

    def backward(g):
        return (g.reshape(old),)

    return _from_op(a.data.reshape(shape), (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _from_op(a.data.transpose(axes), (a,), backward)


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(shape)
    old = a.data.shape

    def backward(g):
        return (_unbroadcast(g, old),)

    return _from_op(np.broadcast_to(a.data, shape).copy(), (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty tensor list")
    axis = axis % tensors[0].data.ndim
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _lift(a)
    axis = axis % a.data.ndim
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def backward(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return _from_op(a.data[sl].copy(), (a,), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup: ``ids`` (int array) -> rows of ``table`` [n, d].

    Gradient flows only to the selected rows.
    """
    table = _lift(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding: id out of range [0, {table.data.shape[0]}) in lookup"
        )
    flat = ids.reshape(-1)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, flat, g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _from_op(table.data[ids], (table,), backward)


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted-scaling dropout; call only in training mode."""
    a = _lift(a)
    if rate <= 0.0:
        return a
    mask = (rng.random(a.data.shape) >= rate) / (1.0 - rate)

    def backward(g):
        return (g * mask,)

    return _from_op(a.data * mask, (a,), backward)


# ---------------------------------------------------------------------------
# convolution (channels-last, valid padding)


def conv_output_size(n: int, kernel: int, stride: int) -> int:
    return (n - kernel) // stride + 1


def _as_batched(x: np.ndarray):
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise ShapeError(f"conv: expected rank 3 or 4 input, got shape {x.shape}")


def conv2d(x, kernel, stride: int = 1) -> Tensor:
    """2-D convolution, valid padding.

    ``x``: [H, W, Cin] or [B, H, W, Cin]; ``kernel``: [kh, kw, Cin, Cout].
    Output spatial size per axis is floor((n - k) / stride) + 1. Implemented
    as a sum over kernel offsets of strided-slice matrix products, which
    keeps the gradient rules explicit.
    """
    x, kernel = _lift(x), _lift(kernel)
    xd, batched = _as_batched(x.data)
    kd = kernel.data
    if kd.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be rank 4, got {kd.shape}")
    B, H, W, Cin = xd.shape
    kh, kw, kcin, cout = kd.shape
    if kcin != Cin:
        raise ShapeError(f"conv2d: channel mismatch: input {xd.shape}, kernel {kd.shape}")
    if kh > H or kw > W:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than input {H}x{W} in valid mode"
        )
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    ho = conv_output_size(H, kh, stride)
    wo = conv_output_size(W, kw, stride)

    def window(arr, a, b):
        return arr[:, a : a + (ho - 1) * stride + 1 : stride,
                   b : b + (wo - 1) * stride + 1 : stride, :]

    out = np.zeros((B, ho, wo, cout))
    for a in range(kh):
        for b in range(kw):
            out += window(xd, a, b) @ kd[a, b]

    def backward(g):
        if not batched:
            gb = g[None]
        else:
            gb = g
        gx = np.zeros_like(xd) if x.requires_grad else None
        gk = np.zeros_like(kd) if kernel.requires_grad else None
        for a in range(kh):
            for b in range(kw):
                if gk is not None:
                    gk[a, b] = np.tensordot(window(xd, a, b), gb, axes=([0, 1, 2], [0, 1, 2]))
                if gx is not None:
                    window(gx, a, b).__iadd__(gb @ kd[a, b].T)
        if gx is not None and not batched:
            gx = gx[0]
        return gx, gk

    return _from_op(out if batched else out[0], (x, kernel), backward)


def conv2d_transpose(x, kernel, stride: int, output_padding=(0, 0)) -> Tensor:
    """Transposed 2-D convolution (the adjoint of :func:`conv2d`).

    ``x``: [h, w, Cin] or [B, h, w, Cin]; ``kernel``: [kh, kw, Cin, Cout].
    Output spatial size per axis is (n - 1) * stride + k + output_padding;
    output_padding rows/columns at the far edge receive no contributions.
    """
    x, kernel = _lift(x), _lift(kernel)
    xd, batched = _as_batched(x.data)
    kd = kernel.data
    if kd.ndim != 4:
        raise ShapeError(f"conv2d_transpose: kernel must be rank 4, got {kd.shape}")
    B, h, w, Cin = xd.shape
    kh, kw, kcin, cout = kd.shape
    if kcin != Cin:
        raise ShapeError(
            f"conv2d_transpose: channel mismatch: input {xd.shape}, kernel {kd.shape}"
        )
    ph, pw = output_padding
    if not (0 <= ph < stride and 0 <= pw < stride):
        raise ValueError(
            f"conv2d_transpose: output_padding {output_padding} outside [0, {stride})"
        )
    ho = (h - 1) * stride + kh + ph
    wo = (w - 1) * stride + kw + pw

    def window(arr, a, b):
        return arr[:, a : a + (h - 1) * stride + 1 : stride,
                   b : b + (w - 1) * stride + 1 : stride, :]

    out = np.zeros((B, ho, wo, cout))
    for a in range(kh):
        for b in range(kw):
            window(out, a, b).__iadd__(xd @ kd[a, b])

    def backward(g):
        gb = g if batched else g[None]
        gx = np.zeros_like(xd) if x.requires_grad else None
        gk = np.zeros_like(kd) if kernel.requires_grad else None
        for a in range(kh):
            for b in range(kw):
                gwin = window(gb, a, b)
                if gk is not None:
                    gk[a, b] = np.tensordot(xd, gwin, axes=([0, 1, 2], [0, 1, 2]))
                if gx is not None:
                    gx += gwin @ kd[a, b].T
        if gx is not None and not batched:
            gx = gx[0]
        return gx, gk

    return _from_op(out if batched else out[0], (x, kernel), backward)


# ---------------------------------------------------------------------------
# normalization


def layer_norm(a, gain, bias, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize ``a`` to zero mean / unit variance along ``axis``, then
    apply elementwise ``gain`` and ``bias`` (both of length shape[axis])."""
    a, gain, bias = _lift(a), _lift(gain), _lift(bias)
    ad = a.data
    axis = axis % ad.ndim
    n = ad.shape[axis]
    if n < 2:
        raise ShapeError(f"layer_norm: axis {axis} has length {n} < 2")
    pshape = [1] * ad.ndim
    pshape[axis] = n
    gd = gain.data.reshape(pshape)
    bd = bias.data.reshape(pshape)

    mu = ad.mean(axis=axis, keepdims=True)
    var = ad.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (ad - mu) * inv
    other = tuple(i for i in range(ad.ndim) if i != axis)

    def backward(g):
        ggain = gbias = gx = None
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=other)
        if bias.requires_grad:
            gbias = g.sum(axis=other)
        if a.requires_grad:
            gh = g * gd
            gx = inv * (
                gh
                - gh.mean(axis=axis, keepdims=True)
                - xhat * (gh * xhat).mean(axis=axis, keepdims=True)
            )
        return gx, ggain, gbias

    return _from_op(xhat * gd + bd, (a, gain, bias), backward)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor, free_graph: bool = True):
    """Reverse-mode sweep from a scalar ``loss``.

    Gradients accumulate into ``grad`` on requires-grad leaves; repeated
    forward/backward rounds keep accumulating until ``zero_grad``. The
    recorded graph is dismantled afterwards unless ``free_graph=False``.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    if loss._backward is None:
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad += 1.0
        return

    # iterative topological order (graphs can be thousands of nodes deep)
    order = []
    visited = {id(loss)}
    stack = [(loss, iter(loss._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if parent.requires_grad and id(parent) not in visited:
                visited.add(id(parent))
                if parent._backward is not None:
                    stack.append((parent, iter(parent._parents)))
                    advanced = True
                    break
        if not advanced:
            order.append(node)
            stack.pop()

    grads = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            continue
        gb = np.broadcast_to(g, node.data.shape)
        parent_grads = node._backward(gb)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg
            else:
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg

    if free_graph:
        for node in order:
            node._parents = ()
            node._backward = None
