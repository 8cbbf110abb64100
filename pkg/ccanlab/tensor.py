# ccanlab/tensor.py
"""
Dense tensors with taped reverse-mode differentiation on top of numpy.

Every operation returns a new Tensor; when gradient recording is on and any
input requires a gradient, the result keeps its parents and a backward
function mapping the upstream gradient to one gradient per parent.
`Tensor.backward()` walks the tape in reverse topological order and
accumulates into the `.grad` of leaf tensors (Parameters).

Masked entries are written as true -inf and softmax maps them to an exact 0.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ccanlab.common import EmptySupportError, GraphError, NonFiniteError, NumericError, ShapeError
from ccanlab.config import DTYPE

logger = logging.getLogger(__name__)

NEG_INF = -np.inf

_state = threading.local()
_default_dtype = np.dtype(DTYPE)


# ==================== PRECISION & GRAD MODE ====================

def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Switch between the float32 training build and the float64 gradient-check build."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise NumericError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextmanager
def default_dtype(dtype):
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def make_rng(seed: int) -> np.random.Generator:
    """RngState: numpy's PCG64 bit generator seeded with a 64-bit integer."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


# ==================== TENSOR ====================

class Tensor:
    """A dense row-major array plus its place on the tape."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.asarray(data)
        if array.dtype.kind == "f":
            array = array.astype(_default_dtype, copy=False)
        self.data = array
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._op: Optional[str] = None

    # ---- basic properties ----
    @property
    def shape(self) -> Tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        tag = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{tag})"

    # ---- operators ----
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

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    # ---- reverse mode ----
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf that requires a gradient."""
        if self._op is None or self._backward is None:
            raise GraphError("backward() called on a tensor with no recorded forward operation")
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"backward() on non-scalar tensor of shape {self.shape} needs an explicit grad")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError("backward", grad.shape, self.shape)

        order = _topological_order(self)
        pending: Dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(node_grad, dtype=node.data.dtype, copy=True)
                else:
                    node.grad += node_grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad


class Parameter(Tensor):
    """A trainable leaf: value, gradient of identical shape and a dotted name."""

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=_default_dtype), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=_default_dtype))


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ==================== ELEMENTWISE ====================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError("div", a.shape, b.shape)

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(data, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return _result(data, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form keeps sigmoid(0) == 0.5 exactly and never overflows
    data = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        return (g * data * (1.0 - data),)

    return _result(data, (x,), backward, "sigmoid")


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise NumericError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ==================== SHAPE ====================

def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape))

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(data, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    data = np.transpose(x.data, axes)
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(data, (x,), backward, "transpose")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(data), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; the backward scatters gradients back onto the looked-up rows."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding", weight.shape, ids.shape, detail=f"ids must lie in [0, {weight.shape[0]})")
    data = weight.data[ids]

    def backward(g):
        grad = np.zeros_like(weight.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _result(data, (weight,), backward, "embedding")


def masked_fill(x: Tensor, mask: np.ndarray, value: float = NEG_INF) -> Tensor:
    """Replace entries where `mask` is True; those entries receive no gradient."""
    mask = np.asarray(mask, dtype=bool)
    try:
        data = np.where(mask, value, x.data).astype(x.data.dtype, copy=False)
    except ValueError:
        raise ShapeError("masked_fill", x.shape, mask.shape)

    def backward(g):
        return (np.where(mask, 0.0, g).astype(g.dtype, copy=False),)

    return _result(data, (x,), backward, "masked_fill")


# ==================== LINEAR ALGEBRA ====================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(data, (a, b), backward, "matmul")


# ==================== NORMALISATION ====================

def softmax_rows(scores: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax over the last axis.

    Entries that are -inf in `scores`, or True in `mask`, are excluded from the
    support and come out as exactly 0. Rows with an empty support raise
    EmptySupportError.
    """
    scores = as_tensor(scores)
    excluded = np.isneginf(scores.data)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != scores.shape:
            try:
                mask = np.broadcast_to(mask, scores.shape)
            except ValueError:
                raise ShapeError("softmax_rows", scores.shape, mask.shape)
        excluded = excluded | mask
    if np.any(np.all(excluded, axis=-1)):
        raise EmptySupportError()

    z = np.where(excluded, 0.0, scores.data)
    row_max = np.max(np.where(excluded, NEG_INF, z), axis=-1, keepdims=True)
    e = np.where(excluded, 0.0, np.exp(z - row_max))
    data = (e / e.sum(axis=-1, keepdims=True)).astype(scores.data.dtype, copy=False)

    def backward(g):
        inner = np.sum(g * data, axis=-1, keepdims=True)
        grad = data * (g - inner)
        return (np.where(excluded, 0.0, grad).astype(g.dtype, copy=False),)

    return _result(data, (scores,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, detail="gain and bias must match the last dimension")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        grad_gain = np.sum(g * xhat, axis=lead)
        grad_bias = np.sum(g, axis=lead)
        gx = g * gain.data
        grad_x = inv_std * (gx - gx.mean(axis=-1, keepdims=True)
                            - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return grad_x, grad_gain, grad_bias

    return _result(data, (x, gain, bias), backward, "layer_norm")


# ==================== LOSS ====================

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets, ignore_mask=None) -> Tensor:
    """Mean natural-log NLL over the positions where `ignore_mask` is False."""
    vocab = logits.shape[-1]
    targets = np.asarray(targets).reshape(-1)
    flat = logits.data.reshape(-1, vocab)
    if flat.shape[0] != targets.shape[0]:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise NumericError(f"cross_entropy: targets must lie in [0, {vocab})")
    keep = np.ones(targets.shape, dtype=bool) if ignore_mask is None else ~np.asarray(ignore_mask, dtype=bool).reshape(-1)
    count = int(keep.sum())
    if count == 0:
        raise NumericError("cross_entropy: every position is ignored")

    logp = log_softmax(flat)
    rows = np.arange(targets.shape[0])
    picked = np.where(keep, logp[rows, targets], 0.0)
    data = np.asarray(-picked.sum() / count, dtype=logits.data.dtype)

    def backward(g):
        probs = np.exp(logp)
        probs[rows, targets] -= 1.0
        probs *= (keep / count)[:, None]
        return ((g * probs).reshape(logits.shape).astype(logits.data.dtype, copy=False),)

    return _result(data, (logits,), backward, "cross_entropy")


# ==================== OPTIMISER ====================

def adam_step(params: Iterable[Parameter], state: Dict[str, Dict[str, np.ndarray]],
              lr: float, beta1: float, beta2: float, eps: float, step: int) -> None:
    """
    One Adam update with bias correction, in place; gradients are zeroed afterwards.

    `state` maps parameter name to its first/second moments and is created on demand.
    """
    if step < 1:
        raise NumericError(f"adam step must be >= 1, got {step}")
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {p.name}")

    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step
    for p in params:
        moments = state.setdefault(p.name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
        moments["m"] = beta1 * moments["m"] + (1.0 - beta1) * p.grad
        moments["v"] = beta2 * moments["v"] + (1.0 - beta2) * p.grad * p.grad
        m_hat = moments["m"] / correction1
        v_hat = moments["v"] / correction2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)
        p.zero_grad()


class Adam:
    def __init__(self, params: Dict[str, Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.state: Dict[str, Dict[str, np.ndarray]] = {}

    def step(self, lr: Optional[float] = None) -> None:
        self.step_count += 1
        adam_step(self.params.values(), self.state, self.lr if lr is None else lr,
                  self.beta1, self.beta2, self.eps, self.step_count)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping."""
    params = list(params)
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params)))
    if max_norm > 0 and np.isfinite(total) and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            p.grad *= scale
    return total


# ==================== GRADIENT CHECK ====================

def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-5,
               samples: Optional[int] = None, rng: Optional[np.random.Generator] = None,
               floor: float = 1e-6) -> float:
    """
    Compare analytic gradients with central finite differences.

    Returns the largest relative error |a - n| / max(|a|, |n|, floor) over the
    checked coordinates. With `samples`, only that many random coordinates per
    parameter are perturbed.
    """
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = {id(p): p.grad.copy() for p in params}

    worst = 0.0
    rng = rng or make_rng(0)
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if samples is not None and samples < flat.size:
                coords = rng.choice(flat.size, size=samples, replace=False)
            grad_flat = analytic[id(p)].reshape(-1)
            for i in coords:
                original = flat[i]
                flat[i] = original + h
                plus = loss_fn().item()
                flat[i] = original - h
                minus = loss_fn().item()
                flat[i] = original
                numeric = (plus - minus) / (2.0 * h)
                denom = max(abs(numeric), abs(grad_flat[i]), floor)
                worst = max(worst, abs(numeric - grad_flat[i]) / denom)
    for p in params:
        p.zero_grad()
    return worst
