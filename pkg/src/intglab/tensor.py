"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a vector-Jacobian
product. ``backward`` linearizes the recorded graph into a
:class:`ComputationTape` and replays it in reverse.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DegenerateRowError, DimensionError, NonFiniteError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Row-major float64 array plus optional gradient.

    Leaf tensors created with ``requires_grad=True`` accumulate into ``grad``
    on every backward pass; call :meth:`zero_grad` between steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp", "_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name or ''} initialized with non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._vjp: Callable | None = None
        self._op = "leaf"

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], vjp: Callable, op: str) -> "Tensor":
        """Wrap an operation result; ``vjp(g)`` returns one gradient (or None) per parent."""
        data = np.ascontiguousarray(data, dtype=np.float64)
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        needs = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    def backward(self) -> dict:
        return backward(self)

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Computation tape and backward
# ---------------------------------------------------------------------------
class ComputationTape:
    """Topologically ordered list of the recorded operations reachable from a root.

    Every operation appears after all operations producing its inputs, and
    :meth:`replay` visits each one exactly once.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.ops: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.ops.append(node)
                continue
            if id(node) in seen or node._vjp is None:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p._vjp is not None and id(p) not in seen:
                    stack.append((p, False))

    def __len__(self) -> int:
        return len(self.ops)

    def replay(self, seed: np.ndarray) -> dict:
        grads: dict[int, np.ndarray] = {id(self.root): seed}
        leaves: dict[int, Tensor] = {}
        if self.root._vjp is None and self.root.requires_grad:
            leaves[id(self.root)] = self.root
            _accumulate_leaf(self.root, seed)
        for node in reversed(self.ops):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, gp in zip(node._parents, node._vjp(g)):
                if gp is None or not parent.requires_grad:
                    continue
                if parent._vjp is None:
                    leaves[id(parent)] = parent
                    _accumulate_leaf(parent, gp)
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + gp
                    else:
                        grads[key] = gp
        return {t: t.grad for t in leaves.values()}


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf.

    Returns a map from leaf tensor to its (accumulated) gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    tape = ComputationTape(loss)
    return tape.replay(np.ones_like(loss.data))


# ---------------------------------------------------------------------------
# Elementwise and shape operations
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data - b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(ad * bd, (a, b), vjp, "mul")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return Tensor.from_op(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    x = a.data
    return Tensor.from_op(np.log(x), (a,), lambda g: (g / x,), "log")


def tabs(a: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient at 0 is 0."""
    s = np.sign(a.data)
    return Tensor.from_op(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def sign(a: Tensor) -> Tensor:
    """Elementwise sign with sign(0) = 0; piecewise constant, so no gradient."""
    return Tensor(np.sign(a.data))


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    y = x * sig

    def vjp(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return Tensor.from_op(y, (a,), vjp, "silu")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return Tensor.from_op(y, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                          lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a: Tensor, idx) -> Tensor:
    src = a.shape
    y = a.data[idx]
    basic = not _is_advanced(idx)

    def vjp(g):
        full = np.zeros(src)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor.from_op(np.array(y, dtype=np.float64), (a,), vjp, "getitem")


def _is_advanced(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray, Tensor)) for p in parts)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor.from_op(y, (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def stack_sum(tensors: Iterable[Tensor]) -> Tensor:
    tensors = list(tensors)
    out = tensors[0]
    for t in tensors[1:]:
        out = add(out, t)
    return out


# ---------------------------------------------------------------------------
# Matrix product and softmax
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with batch support.

    ``a`` is ``(..., m, k)``; ``b`` is either a ``(k, n)`` matrix shared over the
    batch or ``(..., k, n)`` with the same leading dimensions as ``a``.
    Backward: ``dA = dC B^T``, ``dB = A^T dC``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ in {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    shared = bd.ndim == 2
    # a shared right operand folds the batch into one 2-D product
    y = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:]) if shared else ad @ bd

    def vjp(g):
        ga = gb = None
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g2
        else:
            if a.requires_grad:
                ga = g @ np.swapaxes(bd, -1, -2)
            if b.requires_grad:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor.from_op(y, (a, b), vjp, "matmul")


def _softmax_masked(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, x, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(t: Tensor, mask=None, causal: bool = False) -> Tensor:
    """Softmax over the last axis, restricted to permitted entries.

    ``mask`` is a boolean array broadcastable to ``t`` (True = permitted).
    ``causal=True`` permits ``j <= i`` on the trailing square matrices.
    Excluded logits are replaced by ``-inf`` before the max-shifted
    exponentiation, so they come out exactly zero.
    """
    x = t.data
    if causal and mask is None:
        if x.ndim < 2:
            raise DimensionError(f"causal softmax needs a matrix, got shape {x.shape}")
        y = kernels.causal_softmax(x)

        def vjp(g):
            return (kernels.causal_softmax_backward(y, g),)

        return Tensor.from_op(y, (t,), vjp, "softmax")

    if mask is None:
        m = np.ones(x.shape, dtype=bool)
    else:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
        try:
            m = np.broadcast_to(m, x.shape)
        except ValueError:
            raise DimensionError(f"softmax mask shape {m.shape} does not fit {x.shape}") from None
        if causal:
            m = m & np.tri(x.shape[-2], x.shape[-1], dtype=bool)
    if not m.any(axis=-1).all():
        raise DegenerateRowError("softmax row has no permitted entry")
    y = _softmax_masked(x, m)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(y, (t,), vjp, "softmax")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------
def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5,
               indices: Sequence[int] | None = None, floor: float = 1e-6) -> float:
    """Max relative error between backprop and central differences.

    Error per entry is ``|a - c| / max(|a|, |c|, floor)``. The floor keeps
    difference round-off (about 1e-11 at the default step) from dominating
    where the true gradient vanishes. ``indices`` restricts the comparison to
    selected flat positions.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base, requires_grad=True)
    out = f(xt)
    backward(out)
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad
    flat = base.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + step
            fp = f(Tensor(base)).item()
            flat[i] = orig - step
            fm = f(Tensor(base)).item()
            flat[i] = orig
            c = (fp - fm) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - c) / max(abs(a), abs(c), floor)
            worst = max(worst, err)
    return worst
