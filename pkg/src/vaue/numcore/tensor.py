"""A small reverse-mode automatic differentiation engine over numpy arrays.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient the result records its parents and a closure mapping the upstream
gradient to one gradient per parent. :meth:`Tensor.backward` walks the graph
in reverse topological order, accumulates gradients into leaf tensors and
then frees the interior graph.
"""

from __future__ import annotations

import numpy as np

from . import special


class NumericalError(FloatingPointError):
    """An operation produced NaN or infinite values."""


class GraphError(RuntimeError):
    """The computation graph is malformed (cycle, non-scalar root)."""


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericalError("Tensor constructed from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @classmethod
    def _result(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        if not np.isfinite(data).all():
            raise NumericalError(f"{op} produced non-finite values")
        out.data = data
        out.grad = None
        out._op = op
        tracked = any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        if tracked:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic protocol -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __float__(self):
        return float(self.data)

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    # -- reverse pass ---------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into every tracked leaf's ``grad``."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def _topological_order(root: Tensor) -> list:
    order = []
    state = {}  # id -> 1 visiting, 2 done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphError("cycle detected in computation graph")
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            pmark = state.get(id(parent))
            if pmark == 1:
                raise GraphError("cycle detected in computation graph")
            if pmark is None and parent.requires_grad:
                stack.append((parent, False))
    return order


def tensor(value, requires_grad=False) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=requires_grad)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# -- elementwise binary ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._result(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    with np.errstate(all="ignore"):  # non-finite results are reported by _result
        out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._result(out, (a, b), back, "div")


def power(a, exponent: float) -> Tensor:
    a = _lift(a)
    ad = a.data
    p = float(exponent)
    with np.errstate(all="ignore"):
        out = ad**p
    return Tensor._result(out, (a,), lambda g: (g * p * ad ** (p - 1.0),), "pow")


# -- elementwise unary -------------------------------------------------


def exp(a) -> Tensor:
    a = _lift(a)
    with np.errstate(all="ignore"):
        out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    with np.errstate(all="ignore"):
        out = np.log(ad)
    return Tensor._result(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)
    positive = out > 0.0
    safe = np.where(positive, out, 1.0)

    def back(g):
        # subgradient 0 at the origin keeps constant channels finite
        return (np.where(positive, g * 0.5 / safe, 0.0),)

    return Tensor._result(out, (a,), back, "sqrt")


def absolute(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    return Tensor._result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def relu(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    return Tensor._result(np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0.0),), "relu")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _lift(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return Tensor._result(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def maximum(a, floor: float) -> Tensor:
    """Elementwise max against a constant; gradient passes where a > floor."""
    a = _lift(a)
    ad = a.data
    return Tensor._result(np.maximum(ad, floor), (a,), lambda g: (g * (ad > floor),), "maximum")


def digamma(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    return Tensor._result(
        special.digamma(ad), (a,), lambda g: (g * special.trigamma(ad),), "digamma"
    )


def lgamma(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    return Tensor._result(
        special.log_gamma(ad), (a,), lambda g: (g * special.digamma(ad),), "lgamma"
    )


# -- reductions and shape ----------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    shape = a.shape
    return Tensor._result(
        a.data.sum(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand_reduced(g, shape, axis, keepdims).copy(),),
        "sum",
    )


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    shape = a.shape
    count = a.data.size if axis is None else int(np.prod([shape[ax] for ax in np.atleast_1d(axis)]))
    return Tensor._result(
        a.data.mean(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,),
        "mean",
    )


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return Tensor._result(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def take(a, index) -> Tensor:
    a = _lift(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(a.data[index], (a,), back, "index")


def stack(items, axis=0) -> Tensor:
    items = [_lift(t) for t in items]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return Tensor._result(np.stack([t.data for t in items], axis=axis), tuple(items), back, "stack")


def concat(items, axis=0) -> Tensor:
    items = [_lift(t) for t in items]
    bounds = np.cumsum([t.shape[axis] for t in items])[:-1]
    return Tensor._result(
        np.concatenate([t.data for t in items], axis=axis),
        tuple(items),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
        "concat",
    )


# -- linear algebra ----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValueError("matmul expects two 2-D tensors")

    def back(g):
        return g @ bd.T, ad.T @ g

    return Tensor._result(ad @ bd, (a, b), back, "matmul")


def conv2d(x, weight, bias=None, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation. x: B×Cin×H×W, weight: Cout×Cin×k×k."""
    x, weight = _lift(x), _lift(weight)
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {xd.shape}, weight {wd.shape}")
    batch, cin, _, _ = xd.shape
    cout, _, kh, kw = wd.shape
    padded = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(batch * ho * wo, cin * kh * kw)
    wmat = wd.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        bias = _lift(bias)
        out = out + bias.data
    out = out.reshape(batch, ho, wo, cout).transpose(0, 3, 1, 2)

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gmat.T @ cols).reshape(wd.shape)
        # input gradient: correlate the padded upstream grad with the flipped kernel
        ph, pw = kh - 1 - padding, kw - 1 - padding
        gpad = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        gwin = np.lib.stride_tricks.sliding_window_view(gpad, (kh, kw), axis=(2, 3))
        hi, wi = xd.shape[2], xd.shape[3]
        gcols = gwin[:, :, :hi, :wi].transpose(0, 2, 3, 1, 4, 5).reshape(batch * hi * wi, cout * kh * kw)
        flipped = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
        gx = (gcols @ flipped.T).reshape(batch, hi, wi, cin).transpose(0, 3, 1, 2)
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, back, "conv2d")


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = _lift(a)
    shift = a.data.max(axis=axis, keepdims=True)
    out = log(tsum(exp(a - shift), axis=axis, keepdims=True)) + shift
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out
