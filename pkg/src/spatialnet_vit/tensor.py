"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a read-only numpy array. Every primitive below
records its inputs and a local gradient rule on the output tensor, so the
graph reachable from a scalar loss can be traversed backwards by
:func:`backward`.

Broadcasting is deliberately narrow. Binary elementwise ops accept either
identical shapes or a right operand whose shape equals the trailing
dimensions of the left one (bias over rows, positional table over a batch).
Anything else raises :class:`~spatialnet_vit.errors.ShapeError`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float64

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is None:
        if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            dtype = data.dtype
        else:
            dtype = DEFAULT_DTYPE
    arr = np.array(data, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


class Tensor:
    """An immutable N-d array that remembers how it was computed."""

    __slots__ = ("data", "requires_grad", "parents", "grad_fn", "op", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.grad_fn: GradFn | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def from_op(cls, data, parents: Sequence[Tensor], grad_fn: GradFn, op: str) -> Tensor:
        """Build the output of a primitive.

        ``grad_fn`` maps the upstream gradient to one gradient (or ``None``)
        per parent. Parents that do not require gradients are not recorded.
        """
        out = cls.__new__(cls)
        arr = np.asarray(data)
        if arr.flags.writeable:
            arr.setflags(write=False)
        out.data = arr
        out.name = None
        out.op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = tuple(parents)
            out.grad_fn = grad_fn
        else:
            out.requires_grad = False
            out.parents = ()
            out.grad_fn = None
        return out

    # -- introspection -----------------------------------------------------
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

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __float__(self):
        return self.item()

    def __len__(self):
        return self.shape[0]

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{grad})"

    def assign(self, value) -> None:
        """Rebind a leaf's values (optimizer updates, gradient checks)."""
        if self.parents:
            raise ContractError("only leaf tensors can be reassigned")
        arr = _as_array(value, self.data.dtype)
        if arr.shape != self.shape:
            raise ShapeError(f"cannot assign shape {arr.shape} to tensor of shape {self.shape}")
        self.data = arr

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division is only defined by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    """Return ``x`` unchanged if it is a Tensor, else wrap it as a constant."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def _check_trailing(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if 0 < b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may match the trailing dims of ``a``."""
    if _is_scalar(b):
        a = as_tensor(a)
        return Tensor.from_op(a.data + b, (a,), lambda g: (g,), "add_scalar")
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim > a.ndim:
        a, b = b, a
    _check_trailing(a, b, "add")
    shape_b = b.shape
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (g, _unbroadcast(g, shape_b)), "add")


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -b)
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing(a, b, "sub")
    shape_b = b.shape
    return Tensor.from_op(a.data - b.data, (a, b),
                          lambda g: (g, -_unbroadcast(g, shape_b)), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    """Elementwise product, or scaling by a python scalar."""
    a = as_tensor(a)
    if _is_scalar(b):
        c = float(b)
        return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,), "scale")
    b = as_tensor(b)
    if b.ndim > a.ndim:
        a, b = b, a
    _check_trailing(a, b, "mul")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g * bd, _unbroadcast(g * ad, bd.shape)

    return Tensor.from_op(ad * bd, (a, b), grad_fn, "mul")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor.from_op(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def relu(x) -> Tensor:
    """max(0, x). The subgradient at exactly 0 is 0."""
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0.0), (x,),
                          lambda g: (g * mask,), "relu")


def log(x, eps: float = 0.0, cap: float | None = None) -> Tensor:
    """Natural log of ``x + eps``, optionally clipped from above at ``cap``
    (the gradient is zero where the clip is active)."""
    x = as_tensor(x)
    shifted = x.data + eps
    if cap is None:
        return Tensor.from_op(np.log(shifted), (x,), lambda g: (g / shifted,), "log")
    live = shifted < cap
    arg = np.where(live, shifted, cap)
    return Tensor.from_op(np.log(arg), (x,), lambda g: (np.where(live, g / arg, 0.0),), "log")


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(s, (x,), grad_fn, "softmax_rows")


def normalize_rows(x, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance rows (layer normalisation without gain/bias)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def grad_fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_std * (g - gm - xhat * gx),)

    return Tensor.from_op(xhat, (x,), grad_fn, "normalize_rows")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch dims; ``b`` is either a plain matrix shared
    across the batch or a stack with exactly the same leading dims.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor.from_op(ad @ bd, (a, b), grad_fn, "matmul")


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got {x.shape}")
    return Tensor.from_op(np.swapaxes(x.data, -1, -2), (x,),
                          lambda g: (np.swapaxes(g, -1, -2),), "transpose")


# -- reductions and reshaping ------------------------------------------------

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor.from_op(x.data.sum(axis=axis, keepdims=keepdims), (x,), grad_fn, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} into {tuple(shape)}") from exc
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(old),), "reshape")


def index(x, idx) -> Tensor:
    """Basic or integer-array indexing; gradients scatter back with add."""
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def grad_fn(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor.from_op(x.data[idx], (x,), grad_fn, "index")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(data, tensors, grad_fn, "concat")


# -- reverse mode ------------------------------------------------------------

class ComputationRecord:
    """Topologically ordered primitive nodes reachable from a root tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, root: Tensor) -> ComputationRecord:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, params=None, record: ComputationRecord | None = None):
    """Gradients of a scalar ``loss``.

    ``params`` may be a mapping name -> Tensor (returns a dict of arrays), a
    sequence of tensors (returns a list), or ``None`` (returns a dict keyed
    by every leaf tensor that requires a gradient). Parameters the loss does
    not depend on get a zero gradient.
    """
    if not isinstance(loss, Tensor) or loss.size != 1 or loss.ndim > 1:
        shape = getattr(loss, "shape", type(loss).__name__)
        raise ContractError(f"backward needs a scalar loss, got {shape}")
    if record is None:
        record = ComputationRecord.from_output(loss)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(record.nodes):
        g = grads.get(id(node))
        if g is None:
            continue
        if not node.parents:
            leaves[id(node)] = node
            continue
        del grads[id(node)]
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=parent.dtype)

    def lookup(p: Tensor) -> np.ndarray:
        g = grads.get(id(p))
        return np.zeros_like(p.data) if g is None else g

    if params is None:
        return {leaf: grads[key] for key, leaf in leaves.items() if leaf.requires_grad}
    if isinstance(params, Mapping):
        return {name: lookup(p) for name, p in params.items()}
    return [lookup(p) for p in params]


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    """Filter to tensors that require gradients."""
    return [t for t in tensors if t.requires_grad]
