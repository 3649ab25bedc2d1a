"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Operations are recorded on the active :class:`Tape` whenever at least one
input requires a gradient. Outside a tape every operation is a plain numpy
computation, which is how frozen (teacher) forward passes are run.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

_DTYPE = np.float32
_ACTIVE_TAPES: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class TapeError(RuntimeError):
    pass


def default_dtype() -> np.dtype:
    return np.dtype(_DTYPE)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype of newly created tensors (float32/float64)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    old, _DTYPE = _DTYPE, dtype.type
    try:
        yield
    finally:
        _DTYPE = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _DTYPE, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
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
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
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


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed operations; supports exactly one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        out.requires_grad = True
        out._tape = self
        self.nodes.append(_Node(out, inputs, backward))


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on all active tapes."""
    saved = _ACTIVE_TAPES[:]
    _ACTIVE_TAPES.clear()
    try:
        yield
    finally:
        _ACTIVE_TAPES[:] = saved


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=_DTYPE))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite output in {op}")


def _emit(arr: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    _check_finite(arr, op)
    out = Tensor._wrap(arr)
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        _ACTIVE_TAPES[-1].record(out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy-style broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_suffix_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    # only equal shapes or a trailing-suffix operand (bias-style) are allowed
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise ValueError(f"{op}: shapes {sa} and {sb} are not compatible")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(a.data * b.data, "mul", (a, b), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),

    return _emit(out, "gelu", (x,), backward)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    in_shape = x.shape

    def backward(g):
        return g.reshape(in_shape),

    return _emit(x.data.reshape(tuple(shape)), "reshape", (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return g.transpose(inverse),

    return _emit(np.ascontiguousarray(x.data.transpose(axes)), "transpose", (x,), backward)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g):
        return np.broadcast_to(g, shape).copy(),

    return _emit(np.asarray(x.data.sum(), dtype=x.data.dtype), "sum", (x,), backward)


def mean(x: Tensor, axis: int) -> Tensor:
    """Mean over a single axis (axis is removed)."""
    axis = axis % x.ndim
    n = x.shape[axis]

    def backward(g):
        return np.repeat(np.expand_dims(g / n, axis), n, axis=axis),

    return _emit(x.data.mean(axis=axis), "mean", (x,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; batch extents must agree or ``b`` is a plain matrix."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents differ {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch extents differ {a.shape} x {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise ValueError("matmul: left operand must carry the batch dimensions")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _emit(a.data @ b.data, "matmul", (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if x.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    _check_finite(x.data, "softmax input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return s * (g - (g * s).sum(axis=-1, keepdims=True)),

    return _emit(s, "softmax", (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then apply gamma/beta.

    With ``gamma`` and ``beta`` omitted this is the parameter-free form.
    """
    d = x.shape[-1]
    if d < 1:
        raise ValueError("layer_norm needs a non-empty last axis")
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in (gamma, beta):
        if p is not None and p.shape != (d,):
            raise ValueError(f"affine parameter shape {p.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    inputs = tuple(t for t in (x, gamma, beta) if t is not None)

    def backward(g):
        gx_hat = g * gamma.data if gamma is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return tuple(grads)

    return _emit(out.astype(x.data.dtype, copy=False), "layer_norm", inputs, backward)


# ---------------------------------------------------------------- masking


def replace_masked(x: Tensor, mask: np.ndarray, token: Tensor) -> Tensor:
    """Replace rows ``x[b, t, :]`` where ``mask[b, t]`` is true by ``token``."""
    mask = np.asarray(mask, dtype=bool)
    if x.ndim != 3 or mask.shape != x.shape[:2] or token.shape != (x.shape[-1],):
        raise ValueError(f"replace_masked: x {x.shape}, mask {mask.shape}, token {token.shape}")
    m = mask[..., None]
    out = np.where(m, token.data, x.data)

    def backward(g):
        return np.where(m, 0.0, g).astype(g.dtype), g[mask].sum(axis=0)

    return _emit(out, "replace_masked", (x, token), backward)


# ---------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    n, c = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n).astype(logits.data.dtype),

    return _emit(np.asarray(loss, dtype=logits.data.dtype), "cross_entropy", (logits,), backward)


def mse(pred: Tensor, target, mask=None) -> Tensor:
    """Mean squared error over the positions selected by ``mask``.

    ``mask`` has the shape of ``pred`` minus its last axis (one flag per time
    step); the mean runs over the selected positions and the feature axis.
    For 1-D inputs the mask is elementwise.
    """
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    if mask is None:
        weight = np.ones(pred.shape, dtype=pred.data.dtype)
    else:
        mask = np.asarray(mask, dtype=bool)
        if pred.ndim == 1:
            if mask.shape != pred.shape:
                raise ValueError("mse: mask shape mismatch")
            weight = mask.astype(pred.data.dtype)
        else:
            if mask.shape != pred.shape[:-1]:
                raise ValueError(f"mse: mask shape {mask.shape} != {pred.shape[:-1]}")
            weight = np.broadcast_to(mask[..., None], pred.shape).astype(pred.data.dtype)
    count = weight.sum()
    if count == 0:
        raise ValueError("mse: mask selects zero positions")
    loss = (diff * diff * weight).sum() / count

    def backward(g):
        gp = g * 2.0 * diff * weight / count
        return gp.astype(pred.data.dtype), (-gp).astype(target.data.dtype)

    return _emit(np.asarray(loss, dtype=pred.data.dtype), "mse", (pred, target), backward)


def losses(kind: str, pred: Tensor, target, mask=None) -> Tensor:
    if kind == "cross_entropy":
        if mask is not None:
            raise ValueError("cross_entropy takes no mask")
        return cross_entropy(pred, target)
    if kind == "mse":
        return mse(pred, target, mask)
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse traversal of ``tape`` from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` get their ``.grad`` accumulated
    (never overwritten). A tape supports a single backward pass.
    """
    if tape.consumed:
        raise TapeError("backward already run on this tape")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape:
        raise TapeError("loss was not produced on this tape")
    tape.consumed = True
    produced = {id(node.out) for node in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if not inp.requires_grad:
                continue
            if id(inp) in produced:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
            else:
                gi = np.asarray(gi, dtype=inp.data.dtype).reshape(inp.shape)
                if inp.grad is None:
                    inp.grad = gi.copy()
                else:
                    inp.grad += gi
    tape.nodes.clear()


# ---------------------------------------------------------------- parameters


class ParameterSet:
    """Named trainable tensors, iterated in lexicographic name order."""

    def __init__(self, items: dict[str, Tensor] | None = None):
        self._items: dict[str, Tensor] = {}
        for name, t in (items or {}).items():
            self[name] = t

    def __setitem__(self, name: str, value) -> None:
        if name in self._items:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._items[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return sorted(self._items)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._items[k]) for k in self.names()]

    def __iter__(self):
        return iter(self.names())

    def zero_grads(self) -> None:
        for t in self._items.values():
            t.zero_grad()

    def numel(self, exclude: Sequence[str] = ()) -> int:
        return sum(t.size for k, t in self._items.items()
                   if not any(k.startswith(p) for p in exclude))

    def subset(self, prefixes: Sequence[str]) -> "ParameterSet":
        """Shares tensors with ``self`` for names starting with any prefix."""
        out = ParameterSet()
        for k, t in self.items():
            if any(k.startswith(p) for p in prefixes):
                out._items[k] = t
        return out

    def copy(self, dtype=None) -> "ParameterSet":
        out = ParameterSet()
        for k, t in self.items():
            out[k] = Tensor(t.data, dtype=dtype or t.data.dtype)
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, arr in arrays.items():
            t = self._items[k]
            if t.shape != arr.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = np.array(arr, dtype=t.data.dtype)


# ---------------------------------------------------------------- gradient check


def grad_check(f: Callable[[], Tensor], params: ParameterSet, h: float = 1e-5,
               tol: float = 1e-4, floor: float = 1e-6) -> dict:
    """Compare analytic gradients of ``f`` with central differences.

    ``f`` rebuilds the graph from ``params`` on every call. Parameters must
    be float64. The relative error of each element is
    ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps analytically zero
    gradients from producing meaningless ratios.
    """
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    for k, t in params.items():
        if t.data.dtype != np.float64:
            raise ValueError(f"grad_check needs float64 parameters ({k} is {t.data.dtype})")
    params.zero_grads()
    with precision(np.float64), Tape() as tape:
        loss = f()
        backward(tape, loss)
    worst, worst_name = 0.0, None
    per_param = {}
    with precision(np.float64), no_grad():
        for name, t in params.items():
            analytic = t.grad.copy()
            flat = t.data.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NonFiniteError(f"non-finite evaluation while perturbing {name}")
                numeric[i] = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)
            rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
            err = float(rel.max(initial=0.0))
            per_param[name] = err
            if err > worst:
                worst, worst_name = err, name
    return {"max_rel_error": worst, "worst_param": worst_name, "per_param": per_param,
            "passed": worst < tol, "tol": tol}
