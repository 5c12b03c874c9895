"""Dense kernels, a small reverse-mode tape, parameter storage and gradient checking.

Every op accepts arrays with arbitrary leading batch dimensions; the last axis is
the feature axis.  A :class:`Tensor` only records its parents when at least one
input requires a gradient, so inference never retains history.

GELU uses the exact Gaussian-CDF form ``0.5 * x * (1 + erf(x / sqrt(2)))`` in
both directions.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

SQRT_2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ContractError(ValueError):
    """A precondition of a public operation was violated."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared; ``where`` names the offending tensor or stage."""

    def __init__(self, where: str, message: str | None = None):
        self.where = where
        super().__init__(message or f"non-finite values in {where}")


def Rng(seed: int) -> np.random.Generator:
    """Deterministic generator: numpy PCG64 seeded with a 64-bit integer."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(where)


class Tensor:
    """An ndarray plus the closure needed to push gradients to its parents."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "grad")

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._backward = backward
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor({self.name or 'anon'}, shape={self.shape})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=f"sg({self.name})" if self.name else "sg")

    def numpy(self) -> np.ndarray:
        return self.data

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return Tensor(arr)


def _make(data, name: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording history only if some parent needs it."""
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(data, name=name)
    return Tensor(data, requires_grad=True, name=name, parents=tuple(parents),
                  backward=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _topo_order(root: Tensor) -> list[Tensor]:
    # iterative DFS over grad-requiring nodes only, so constant leaves never
    # influence the accumulation order
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring ancestor of a scalar ``root``."""
    if root.data.size != 1:
        raise ContractError("backward() needs a scalar output")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise

def _is_scalar(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def add(a, b) -> Tensor:
    if _is_scalar(a):
        a, b = b, a
    if _is_scalar(b):
        a = as_tensor(a)
        return _make(a.data + b, "add", (a,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(out, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -b)
    if _is_scalar(a):
        b = as_tensor(b)
        return _make(a - b.data, "sub", (b,), lambda g: (-g,))
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(out, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    if _is_scalar(a):
        a, b = b, a
    if _is_scalar(b):
        a = as_tensor(a)
        return _make(a.data * b, "mul", (a,), lambda g: (g * b,))
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(out, "mul", (a, b), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype, copy=False)
    return _make(out, "relu", (x,), lambda g: (g * pos,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1 - out),))


def gelu(x) -> Tensor:
    x = as_tensor(x)
    z = x.data
    cdf = 0.5 * (1.0 + erf(z / SQRT_2))
    out = (z * cdf).astype(z.dtype, copy=False)

    def bw(g):
        pdf = INV_SQRT_2PI * np.exp(-0.5 * z * z)
        return (g * (cdf + z * pdf),)
    return _make(out, "gelu", (x,), bw)


def log(x, eps: float = 0.0) -> Tensor:
    x = as_tensor(x)
    shifted = x.data + eps
    out = np.log(shifted)
    return _make(out, "log", (x,), lambda g: (g / shifted,))


def softmax(x) -> Tensor:
    """Softmax along the last axis, computed with max-subtraction."""
    x = as_tensor(x)
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise ContractError("softmax of an empty vector")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return _make(out, "softmax", (x,), bw)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity outside training or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


# ------------------------------------------------------------------ linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != (b.shape[-2] if b.data.ndim > 1 else b.shape[0]):
        raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.data.ndim == 1:
                gb = np.outer(a.data, g)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb
    return _make(out, "matmul", (a, b), bw)


def affine(x, W, b) -> Tensor:
    """``x W + b`` over the last axis of ``x``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ContractError(
            f"affine shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    out = x.data @ W.data + b.data

    def bw(g):
        gx = g @ W.data.T if x.requires_grad else None
        gW = gb = None
        if W.requires_grad:
            gW = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if b.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gW, gb
    return _make(out, "affine", (x, W, b), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit (population) variance."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if n < 2:
        raise ContractError("layer_norm needs at least 2 features")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ContractError("layer_norm gain/bias shape mismatch")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, n).sum(axis=0)
        return gx, ggain, gbias
    return _make(out, "layer_norm", (x, gain, bias), bw)


# -------------------------------------------------------------------- structural

def concat(xs: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(x) for x in xs]
    out = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))
    return _make(out, "concat", tuple(ts), bw)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(x) for x in xs]
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))
    return _make(out, "stack", tuple(ts), bw)


def reshape(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(src),))


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, a1, a2), "swapaxes", (x,),
                 lambda g: (np.swapaxes(g, a1, a2),))


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(out, "sum", (x,), bw)


def tmean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / count)


# ------------------------------------------------------------------- param store

class ParamStore:
    """Ordered name -> parameter map with a same-shaped gradient buffer per entry."""

    def __init__(self):
        self._params: OrderedDict[str, np.ndarray] = OrderedDict()
        self._grads: OrderedDict[str, np.ndarray] = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        value = np.array(value)
        self._params[name] = value
        self._grads[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._params:
            raise KeyError(name)
        value = np.asarray(value, dtype=self._params[name].dtype)
        if value.shape != self._params[name].shape:
            raise ContractError(f"shape change for {name}: "
                                f"{self._params[name].shape} -> {value.shape}")
        self._params[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def grads(self):
        return self._grads.items()

    def zero_grad(self) -> None:
        for name, p in self._params.items():
            self._grads[name] = np.zeros_like(p)

    @property
    def dtype(self):
        return next(iter(self._params.values())).dtype

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, p in self._params.items():
            out.add(name, p.astype(dtype))
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def num_elements(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        """Fresh graph leaves wrapping the current parameter arrays."""
        return {name: Tensor(p, requires_grad=requires_grad, name=name)
                for name, p in self._params.items()}


def gradient_of(loss_fn: Callable[[dict[str, Tensor]], Tensor],
                store: ParamStore) -> float:
    """Evaluate ``loss_fn`` on graph leaves of ``store`` and fill its gradients.

    Returns the scalar loss.  Gradients overwrite (not add to) the buffers.
    """
    leaves = store.leaves()
    loss = loss_fn(leaves)
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError(_first_nonfinite(loss), "non-finite loss")
    backward(loss)
    for name, leaf in leaves.items():
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        # copy: backward may hand the same array to several parents
        store._grads[name] = np.array(g, dtype=store[name].dtype).reshape(store[name].shape)
    return float(loss.data)


def _first_nonfinite(root: Tensor) -> str:
    for node in _topo_order(root):
        if not np.all(np.isfinite(node.data)):
            return node.name or "unnamed"
    return root.name or "loss"


@dataclass
class GradCheckReport:
    worst_rel_err: float
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_rel_err < self.tolerance


def grad_check(loss_fn: Callable[[dict[str, Tensor]], Tensor], store: ParamStore,
               h: float = 1e-4, tolerance: float = 1e-5, samples: int | None = 25,
               rng: np.random.Generator | None = None,
               names: Iterable[str] | None = None,
               numeric_fn: Callable[[dict[str, Tensor]], Tensor] | None = None
               ) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` with central differences.

    ``samples`` elements per tensor are checked (all of them when the tensor is
    smaller, or when ``samples`` is None).  Relative error is
    ``|a - n| / max(1, |a|, |n|)``.  ``numeric_fn`` (default ``loss_fn``) is the
    function that gets differenced; pass it when ``loss_fn`` contains
    stop-gradients, which finite differences cannot see.
    """
    if store.dtype != np.float64:
        raise ContractError("grad_check requires a 64-bit ParamStore")
    rng = rng if rng is not None else Rng(0)
    gradient_of(loss_fn, store)

    numeric_fn = numeric_fn or loss_fn

    def value() -> float:
        return float(numeric_fn(store.leaves(requires_grad=False)).data)

    worst = GradCheckReport(0.0, "", (), 0.0, 0.0, 0, tolerance)
    checked = 0
    for name in (names if names is not None else store.names()):
        p = store[name]
        flat = p.reshape(-1)
        if samples is None or flat.size <= samples:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=samples, replace=False))
        analytic = store.grad(name).reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = float(analytic[i])
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            checked += 1
            if err > worst.worst_rel_err or not worst.worst_param:
                worst = GradCheckReport(err, name, np.unravel_index(i, p.shape),
                                        a, num, 0, tolerance)
    worst.checked = checked
    return worst
