"""A small define-by-run reverse-mode autodiff engine on top of numpy.

Every value is a float64 :class:`Tensor`. Operations whose inputs require
gradients record a :class:`Node` on the output (and on the active
:class:`Tape`, if one is open); :func:`backward` walks those nodes in
reverse topological order and accumulates gradients into leaf tensors.

Broadcasting is deliberately limited to scalar-tensor pairs.  Anything
else goes through the explicit :func:`broadcast_to` op.

Forward products use ``np.einsum`` rather than BLAS so that row ``i`` of a
batched result is bit-identical to the same row computed on its own.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, UsageError

EPS_LOG = 1e-12

_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, bank refresh)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    """Ordered record of operation nodes.

    Nodes are appended in creation order, which is already a topological
    order.  Use as a context manager to record everything executed inside
    the block, or build one for an existing graph with :meth:`from_root`.
    """

    nodes: list = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_root(cls, root: "Tensor") -> "Tape":
        tape = cls()
        seen: set[int] = set()
        # iterative post-order DFS; graphs can be deep enough to hit the recursion limit
        stack = [(root._node, False)] if root._node is not None else []
        while stack:
            node, expanded = stack.pop()
            if expanded:
                tape.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in node.inputs:
                if inp._node is not None and id(inp._node) not in seen:
                    stack.append((inp._node, False))
        return tape


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    # basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar ---------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("add", elementwise("mul", self, -1.0), other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    @property
    def T(self):
        if self.ndim != 2:
            raise ShapeError("T is only defined for 2-D tensors")
        return permute(self, (1, 0))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple, op: str, grad_fn) -> Tensor:
    out = Tensor._wrap(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        node = Node(op, inputs, out, grad_fn)
        out._node = node
        out.requires_grad = True
        stack = _tape_stack()
        if stack:
            stack[-1].record(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    # only scalar broadcasting is ever produced by elementwise()
    return np.asarray(g.sum()).reshape(shape)


# elementwise ------------------------------------------------------------

_BINARY = {"add", "sub", "mul", "div"}
_UNARY = {"log_clamped", "relu", "exp", "sqrt"}


def elementwise(op_kind: str, a, b=None, *, eps: float = EPS_LOG) -> Tensor:
    """Elementwise arithmetic with scalar-only broadcasting.

    ``op_kind`` is one of add, sub, mul, div, max_with_scalar, log_clamped,
    relu, exp, sqrt.  ``b`` may be a tensor of the same shape, a 0-d/size-1
    tensor, or a Python number.
    """
    a = as_tensor(a)
    if op_kind in _UNARY:
        return _unary(op_kind, a, eps)
    if op_kind == "max_with_scalar":
        if isinstance(b, Tensor) or not np.isscalar(b):
            raise UsageError("max_with_scalar needs a numeric scalar bound")
        s = float(b)
        mask = a.data > s
        return _make(np.maximum(a.data, s), (a,), "max_with_scalar", lambda g: (g * mask,))
    if op_kind not in _BINARY:
        raise UsageError(f"unknown elementwise op {op_kind!r}")

    if isinstance(b, Tensor):
        if a.shape != b.shape and a.size != 1 and b.size != 1:
            raise ShapeError(f"{op_kind}: shapes {a.shape} and {b.shape} differ")
        bd = b.data
        if a.size == 1 and b.size != 1:
            ad = a.data.reshape(())
        else:
            ad = a.data
        if b.size == 1 and a.size != 1:
            bd = b.data.reshape(())
        inputs = (a, b)
    elif np.isscalar(b):
        ad, bd, inputs = a.data, float(b), (a,)
    else:
        raise UsageError(f"{op_kind}: operand must be a Tensor or a number")

    if op_kind == "add":
        out = ad + bd
        grads = lambda g: (g, g)
    elif op_kind == "sub":
        out = ad - bd
        grads = lambda g: (g, -g)
    elif op_kind == "mul":
        out = ad * bd
        grads = lambda g: (g * bd, g * ad)
    else:
        out = ad / bd
        grads = lambda g: (g / bd, -g * ad / (bd * bd))

    out = np.asarray(out, dtype=np.float64)

    def grad_fn(g):
        ga, gb = grads(g)
        res = [_unbroadcast(np.broadcast_to(ga, out.shape), a.shape)]
        if len(inputs) == 2:
            res.append(_unbroadcast(np.broadcast_to(gb, out.shape), inputs[1].shape))
        return res

    return _make(out, inputs, op_kind, grad_fn)


def _unary(op_kind: str, a: Tensor, eps: float) -> Tensor:
    x = a.data
    if op_kind == "log_clamped":
        inside = x > eps
        out = np.log(np.maximum(x, eps))
        safe = np.where(inside, x, 1.0)
        return _make(out, (a,), op_kind, lambda g: (np.where(inside, g / safe, 0.0),))
    if op_kind == "relu":
        mask = x > 0
        return _make(np.where(mask, x, 0.0), (a,), op_kind, lambda g: (g * mask,))
    if op_kind == "exp":
        out = np.exp(x)
        return _make(out, (a,), op_kind, lambda g: (g * out,))
    # sqrt
    if np.any(x < 0):
        raise UsageError("sqrt of a negative value")
    out = np.sqrt(x)
    safe = np.where(out > 0, out, 1.0)
    return _make(out, (a,), op_kind, lambda g: (np.where(out > 0, 0.5 * g / safe, 0.0),))


def log_clamped(a, eps: float = EPS_LOG) -> Tensor:
    return elementwise("log_clamped", a, eps=eps)


def relu(a) -> Tensor:
    return elementwise("relu", a)


def exp(a) -> Tensor:
    return elementwise("exp", a)


def sqrt(a) -> Tensor:
    return elementwise("sqrt", a)


# linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.einsum("ik,kj->ij", ad, bd)
    return _make(out, (a, b), "matmul", lambda g: (g @ bd.T, ad.T @ g))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D cross-correlation, NCHW layout."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects input B×C×H×W and kernel O×C×kh×kw")
    if stride < 1:
        raise UsageError("stride must be a positive integer")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(f"conv2d channel mismatch: input {C}, kernel {Ck}")
    if kh > H or kw > W:
        raise ShapeError(f"kernel {kh}×{kw} larger than input {H}×{W}")
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1

    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    kflat = kernel.data.reshape(O, C * kh * kw)
    out = np.einsum("nk,ok->no", cols, kflat).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        gf = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gk = (gf.T @ cols).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = (gf @ kflat).reshape(B, Ho, Wo, C, kh, kw)
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
        return gx, gk

    return _make(out, (x, kernel), "conv2d", grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of a B×H×W×D map."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects B×H×W×D, got {x.shape}")
    B, H, W, D = x.shape
    out = x.data.mean(axis=(1, 2))
    return _make(out, (x,), "global_avg_pool",
                 lambda g: (np.broadcast_to(g[:, None, None, :] / (H * W), x.shape).copy(),))


def softmax_axis(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise UsageError(f"axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), "softmax", grad_fn)


# structural ---------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), "sum", grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise UsageError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, (x,), "permute", lambda g: (g.transpose(inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over expanded axes."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    lead = len(shape) - x.ndim

    def grad_fn(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(x.shape) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, (x,), "broadcast_to", grad_fn)


def take(x: Tensor, indices) -> Tensor:
    """Gather rows along axis 0 (differentiable)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("take needs a non-empty 1-D index list")
    if idx.min() < -x.shape[0] or idx.max() >= x.shape[0]:
        raise IndexError(f"row index out of range for {x.shape[0]} rows")
    out = x.data[idx]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(out, (x,), "take", grad_fn)


# reverse pass -------------------------------------------------------------

def backward(root: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients accumulate additively, so call ``zero_grad`` on parameters
    between steps.  A root that does not depend on any trainable tensor is
    a no-op.
    """
    if root.size != 1:
        raise UsageError(f"backward root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    if root._node is None:
        root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1.0
        return
    if tape is None:
        tape = Tape.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64).reshape(inp.shape)
                else:
                    inp.grad += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` may ignore its argument and read ``x`` by closure (e.g. when
    ``x`` is a model parameter); ``x.data`` is perturbed in place and
    restored afterwards.
    """
    y = f(x)
    if y.size != 1:
        raise UsageError(f"f must return a scalar, got shape {y.shape}")
    x.grad = None
    backward(y)
    g_ad = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()

    flat = x.data.reshape(-1)
    if not np.shares_memory(flat, x.data):
        raise UsageError("tensor data must be contiguous for in-place perturbation")
    g_fd = np.empty(x.size)
    with no_grad():
        for i in range(x.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            g_fd[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
    return float(np.max(np.abs(g_ad - g_fd) / denom))
