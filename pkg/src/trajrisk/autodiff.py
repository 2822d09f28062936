"""Small reverse-mode automatic differentiation over float64 numpy arrays.

Graphs are define-by-run: every forward pass records onto a fresh ``Tape``
and ``backward`` walks that tape once, newest node first.

>>> tape = Tape()
>>> x = tape.watch(np.array([1.0, 2.0]))
>>> y = sum_(x * x)
>>> backward(tape, y)[x.node_id]
array([2., 4.])
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "forward_primitive",
    "backward",
    "grad_check",
    "PRIMITIVES",
]


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


@dataclass
class Node:
    kind: str
    inputs: Tuple[Optional[int], ...]
    ctx: Any
    shape: Tuple[int, ...]


class Tape:
    """Ordered record of primitive applications; node ids are list positions."""

    def __init__(self) -> None:
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, kind: str, inputs, ctx, shape) -> int:
        self.nodes.append(Node(kind, tuple(inputs), ctx, tuple(shape)))
        return len(self.nodes) - 1

    def watch(self, data, name: Optional[str] = None) -> "Tensor":
        """Register ``data`` as a leaf that requires gradients."""
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"leaf {name or ''} has non-finite entries")
        node_id = self._record("leaf", (), name, arr.shape)
        return Tensor(arr, requires_grad=True, node_id=node_id, tape=self)


class Tensor:
    """Immutable value plus an optional reference to the node that made it."""

    __slots__ = ("data", "requires_grad", "node_id", "tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, node_id: Optional[int] = None,
                 tape: Optional[Tape] = None) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __add__(self, other):
        return forward_primitive("add", self, other)

    def __radd__(self, other):
        return forward_primitive("add", other, self)

    def __sub__(self, other):
        return forward_primitive("sub", self, other)

    def __rsub__(self, other):
        return forward_primitive("sub", other, self)

    def __mul__(self, other):
        return forward_primitive("mul", self, other)

    def __rmul__(self, other):
        return forward_primitive("mul", other, self)

    def __truediv__(self, other):
        return forward_primitive("div", self, other)

    def __rtruediv__(self, other):
        return forward_primitive("div", other, self)

    def __neg__(self):
        return forward_primitive("mul", self, -1.0)

    def __pow__(self, p: float):
        return forward_primitive("pow", self, p=p)

    def __matmul__(self, other):
        return forward_primitive("matmul", self, other)

    def __getitem__(self, index):
        return forward_primitive("slice", self, index=index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# broadcasting helpers

def _check_broadcast(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    """Only leading dimensions may be broadcast: the shorter shape must be a suffix."""
    if a == b:
        return a
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ValueError(f"shape mismatch: {a} vs {b} (only leading-dim broadcasting)")
    return long_


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.reshape((-1,) + tuple(shape)).sum(axis=0) if shape else g.sum()
    return g.reshape(shape)


def _batch_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    return _check_broadcast(a, b)


# ---------------------------------------------------------------------------
# primitives: each entry maps arrays (+ attrs) -> (out, ctx) and
# (grad_out, ctx) -> per-input gradients

def _add_fwd(a, b):
    _check_broadcast(a.shape, b.shape)
    return a + b, (a.shape, b.shape)


def _add_bwd(g, ctx):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _sub_fwd(a, b):
    _check_broadcast(a.shape, b.shape)
    return a - b, (a.shape, b.shape)


def _sub_bwd(g, ctx):
    sa, sb = ctx
    return _unbroadcast(g, sa), -_unbroadcast(g, sb)


def _mul_fwd(a, b):
    _check_broadcast(a.shape, b.shape)
    return a * b, (a, b)


def _mul_bwd(g, ctx):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _div_fwd(a, b):
    _check_broadcast(a.shape, b.shape)
    out = a / b
    return out, (a, b, out)


def _div_bwd(g, ctx):
    a, b, out = ctx
    gb = g / b
    return _unbroadcast(gb, a.shape), _unbroadcast(-gb * out, b.shape)


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    _batch_shape(a.shape[:-2], b.shape[:-2])
    return np.matmul(a, b), (a, b)


def _matmul_bwd(g, ctx):
    a, b = ctx
    if b.ndim == 2 and a.ndim > 2:
        ga = g @ b.T
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb
    ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
    gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
    return ga, gb


def _sum_fwd(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims), (a.shape, axis, keepdims)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def _sum_bwd(g, ctx):
    shape, axis, keepdims = ctx
    return (np.array(_expand_reduced(g, shape, axis, keepdims)),)


def _mean_fwd(a, axis=None, keepdims=False):
    out = np.mean(a, axis=axis, keepdims=keepdims)
    count = a.size // max(np.size(out), 1) if a.size else 1
    return out, (a.shape, axis, keepdims, count)


def _mean_bwd(g, ctx):
    shape, axis, keepdims, count = ctx
    return (np.array(_expand_reduced(g, shape, axis, keepdims)) / count,)


def _pow_fwd(a, p):
    if not np.isscalar(p):
        raise ValueError("pow takes a scalar exponent")
    return a ** p, (a, p)


def _pow_bwd(g, ctx):
    a, p = ctx
    return (g * p * a ** (p - 1),)


def _sqrt_fwd(a):
    out = np.sqrt(a)
    return out, out


def _sqrt_bwd(g, out):
    return (g * 0.5 / out,)


def _exp_fwd(a):
    out = np.exp(a)
    return out, out


def _exp_bwd(g, out):
    return (g * out,)


def _log_fwd(a):
    return np.log(a), a


def _log_bwd(g, a):
    return (g / a,)


def _sigmoid_fwd(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out, out


def _sigmoid_bwd(g, out):
    return (g * out * (1.0 - out),)


def _relu_fwd(a):
    keep = a > 0
    return a * keep, keep


def _relu_bwd(g, keep):
    return (g * keep,)


def _clip_fwd(a, lo, hi):
    inside = (a >= lo) & (a <= hi)
    return np.clip(a, lo, hi), inside


def _clip_bwd(g, inside):
    return (g * inside,)


def _softmax_fwd(a, mask=None):
    """Softmax over the last axis; ``mask`` (broadcastable bool) marks usable entries.

    A row with no usable entry yields all zeros.
    """
    if mask is None:
        z = a - a.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)
    else:
        mask = np.broadcast_to(mask, a.shape)
        z = np.where(mask, a, -np.inf)
        zmax = z.max(axis=-1, keepdims=True)
        zmax = np.where(np.isfinite(zmax), zmax, 0.0)
        e = np.exp(z - zmax)
        denom = e.sum(axis=-1, keepdims=True)
        out = e / np.where(denom > 0, denom, 1.0)
    return out, out


def _softmax_bwd(g, out):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _layer_norm_fwd(x, gamma, beta, eps=1e-5):
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ValueError(f"layer_norm params must have shape {x.shape[-1:]}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def _layer_norm_bwd(g, ctx):
    xhat, inv, gamma = ctx
    n = xhat.shape[-1]
    lead = tuple(range(g.ndim - 1))
    dgamma = (g * xhat).sum(axis=lead)
    dbeta = g.sum(axis=lead)
    dxhat = g * gamma
    dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def _dropout_fwd(a, mask):
    """``mask`` already carries the inverted-dropout scale (entries 0 or 1/(1-rate))."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.shape:
        raise ValueError(f"dropout mask shape {mask.shape} != input {a.shape}")
    return a * mask, mask


def _dropout_bwd(g, mask):
    return (g * mask,)


def _concat_fwd(*arrays, axis=0):
    ref = arrays[0]
    ax = axis % ref.ndim
    for arr in arrays[1:]:
        if arr.ndim != ref.ndim or arr.shape[:ax] + arr.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise ValueError(f"concat shape mismatch along axis {axis}: {ref.shape} vs {arr.shape}")
    sizes = [arr.shape[ax] for arr in arrays]
    return np.concatenate(arrays, axis=ax), (ax, np.cumsum(sizes)[:-1])


def _concat_bwd(g, ctx):
    ax, splits = ctx
    return tuple(np.split(g, splits, axis=ax))


def _slice_fwd(a, index):
    out = a[index]
    return np.array(out), (a.shape, index)


def _slice_bwd(g, ctx):
    shape, index = ctx
    full = np.zeros(shape)
    np.add.at(full, index, g) if _has_fancy(index) else full.__setitem__(index, g)
    return (full,)


def _has_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _embedding_fwd(weight, indices):
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ValueError("embedding indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise IndexError(f"embedding index out of range [0, {weight.shape[0]})")
    return weight[idx], (weight.shape, idx)


def _embedding_bwd(g, ctx):
    shape, idx = ctx
    flat = idx.reshape(-1)
    gw = np.zeros(shape)
    np.add.at(gw, flat, g.reshape(flat.size, -1))
    return (gw,)


def _transpose_fwd(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    return np.transpose(a, axes), axes


def _transpose_bwd(g, axes):
    return (np.transpose(g, np.argsort(axes)),)


def _reshape_fwd(a, shape):
    return a.reshape(shape), a.shape


def _reshape_bwd(g, shape):
    return (g.reshape(shape),)


def _broadcast_to_fwd(a, shape):
    shape = tuple(shape)
    _check_broadcast(a.shape, shape)
    return np.array(np.broadcast_to(a, shape)), a.shape


def _broadcast_to_bwd(g, shape):
    return (_unbroadcast(g, shape),)


# primitives whose attrs are not tensors; everything else takes only tensor inputs
PRIMITIVES: Dict[str, Tuple[Callable, Callable]] = {
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "div": (_div_fwd, _div_bwd),
    "matmul": (_matmul_fwd, _matmul_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "pow": (_pow_fwd, _pow_bwd),
    "sqrt": (_sqrt_fwd, _sqrt_bwd),
    "exp": (_exp_fwd, _exp_bwd),
    "log": (_log_fwd, _log_bwd),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "clip": (_clip_fwd, _clip_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "layer_norm": (_layer_norm_fwd, _layer_norm_bwd),
    "dropout": (_dropout_fwd, _dropout_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "slice": (_slice_fwd, _slice_bwd),
    "embedding_lookup": (_embedding_fwd, _embedding_bwd),
    "transpose": (_transpose_fwd, _transpose_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
    "broadcast_to": (_broadcast_to_fwd, _broadcast_to_bwd),
}

# attrs passed positionally to these kinds are constants, not tensors
_CONST_TAIL = {"embedding_lookup": 1}


def forward_primitive(kind: str, *inputs, **attrs) -> Tensor:
    """Apply primitive ``kind`` and record it on the inputs' tape if any needs grad."""
    try:
        fwd, _ = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    n_const = _CONST_TAIL.get(kind, 0)
    tensor_inputs = [as_tensor(x) for x in (inputs[:len(inputs) - n_const] if n_const else inputs)]
    consts = inputs[len(inputs) - n_const:] if n_const else ()

    tape = None
    for t in tensor_inputs:
        if t.requires_grad:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError("inputs recorded on different tapes")

    with np.errstate(all="ignore"):
        out, ctx = fwd(*(t.data for t in tensor_inputs), *consts, **attrs)
    out = np.asarray(out, dtype=np.float64)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{kind} produced non-finite values")
    if tape is None:
        return Tensor(out)
    ids = [t.node_id if t.requires_grad else None for t in tensor_inputs]
    node_id = tape._record(kind, ids, ctx, out.shape)
    return Tensor(out, requires_grad=True, node_id=node_id, tape=tape)


def backward(tape: Tape, root: Tensor, wrt: Optional[Sequence[Tensor]] = None) -> Dict[int, np.ndarray]:
    """Reverse sweep from scalar ``root``.

    Returns node_id -> gradient for every leaf on the tape (zeros when the
    leaf does not influence ``root``), or for the nodes in ``wrt`` only.
    With ``wrt`` the sweep stops below the smallest requested id, so asking
    for gradients w.r.t. a late intermediate is cheap.
    """
    if root.data.size != 1 or root.data.ndim != 0:
        raise ValueError(f"backward root must be a scalar, got shape {root.shape}")
    if root.tape is not tape or root.node_id is None:
        raise ValueError("root is not recorded on this tape")

    if wrt is not None:
        targets = {t.node_id for t in wrt if t.requires_grad and t.tape is tape}
        stop = min(targets) if targets else root.node_id + 1
    else:
        targets = {i for i, n in enumerate(tape.nodes) if n.kind == "leaf"}
        stop = 0

    grads: Dict[int, np.ndarray] = {root.node_id: np.ones(())}
    kept: Dict[int, np.ndarray] = {}
    for i in range(root.node_id, stop - 1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        if i in targets:
            kept[i] = g
        node = tape.nodes[i]
        if node.kind == "leaf" or i == stop and wrt is not None:
            continue
        _, bwd = PRIMITIVES[node.kind]
        in_grads = bwd(g, node.ctx)
        for src, gi in zip(node.inputs, in_grads):
            if src is None or gi is None:
                continue
            prev = grads.get(src)
            grads[src] = gi if prev is None else prev + gi

    return {i: kept[i] if i in kept else np.zeros(tape.nodes[i].shape) for i in targets}


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5,
               coords: Optional[Iterable[int]] = None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |numeric|).

    ``f`` maps a tensor to a scalar tensor and must be deterministic.
    ``coords`` restricts the check to a subset of flat indices.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    tape = Tape()
    xt = tape.watch(x0)
    y = f(xt)
    if y.tape is tape and y.requires_grad:
        analytic = backward(tape, y, wrt=[xt])[xt.node_id].reshape(-1)
    else:
        analytic = np.zeros(x0.size)

    def value(arr):
        return float(as_tensor(f(Tensor(arr))).data)

    base = value(x0)
    if value(x0) != base or float(y.data) != base:
        raise ValueError("f is not deterministic between calls")

    flat = x0.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for k in idx:
        xp = flat.copy()
        xp[k] += h
        xm = flat.copy()
        xm[k] -= h
        numeric = (value(xp.reshape(x0.shape)) - value(xm.reshape(x0.shape))) / (2 * h)
        err = abs(analytic[k] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# functional wrappers

def add(a, b):
    return forward_primitive("add", a, b)


def sub(a, b):
    return forward_primitive("sub", a, b)


def mul(a, b):
    return forward_primitive("mul", a, b)


def div(a, b):
    return forward_primitive("div", a, b)


def matmul(a, b):
    return forward_primitive("matmul", a, b)


def sum_(a, axis=None, keepdims=False):
    return forward_primitive("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return forward_primitive("mean", a, axis=axis, keepdims=keepdims)


def pow_(a, p):
    return forward_primitive("pow", a, p=p)


def sqrt(a):
    return forward_primitive("sqrt", a)


def exp(a):
    return forward_primitive("exp", a)


def log(a):
    return forward_primitive("log", a)


def sigmoid(a):
    return forward_primitive("sigmoid", a)


def relu(a):
    return forward_primitive("relu", a)


def clip(a, lo, hi):
    return forward_primitive("clip", a, lo=lo, hi=hi)


def softmax(a, mask=None):
    return forward_primitive("softmax", a, mask=mask)


def layer_norm(x, gamma, beta, eps=1e-5):
    return forward_primitive("layer_norm", x, gamma, beta, eps=eps)


def dropout(a, mask):
    return forward_primitive("dropout", a, mask=mask)


def concat(tensors, axis=0):
    return forward_primitive("concat", *tensors, axis=axis)


def embedding_lookup(weight, indices):
    return forward_primitive("embedding_lookup", weight, np.asarray(indices))


def transpose(a, axes=None):
    return forward_primitive("transpose", a, axes=axes)


def reshape(a, shape):
    return forward_primitive("reshape", a, shape=tuple(shape))


def broadcast_to(a, shape):
    return forward_primitive("broadcast_to", a, shape=tuple(shape))
