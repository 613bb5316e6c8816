"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Ops executed inside a ``with Tape():`` block are recorded in creation order
(a Wengert list); ``backward`` sweeps the list once in reverse, summing
adjoints into every parameter reached.  Outside a tape, ops just compute
values, which is the evaluation path.  The primitive set is closed: exactly
the operations the models in this package need, each with an exact analytic
adjoint, plus a finite-difference checking harness.
"""

from __future__ import annotations

import struct
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Tape and tensors
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class _Node:
    __slots__ = ("out", "parents", "bwd")

    def __init__(self, out, parents, bwd):
        self.out = out
        self.parents = parents
        self.bwd = bwd


class Tape:
    """Ordered record of primitive applications; parents always precede
    their consumers, so one reverse sweep visits every node exactly once."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def _tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    __slots__ = ("data", "requires_grad", "tracked", "grad", "name", "node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.tracked = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.node: Optional[_Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = self.name or ("param" if self.requires_grad else "tensor")
        return "Tensor<%s shape=%s>" % (tag, self.shape)

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(out_data: np.ndarray, parents: tuple, bwd: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _tape()
    if tape is not None and any(p.tracked for p in parents):
        out.tracked = True
        node = _Node(out, parents, bwd)
        out.node = node
        tape.nodes.append(node)
    return out


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(param) for every requires_grad leaf reached.

    Adjoints of a tensor used several times sum.  Also deposits the result
    on each leaf's ``.grad`` (adding to any existing value) and returns a
    {tensor: gradient} dict.
    """
    tape = _tape()
    if tape is None:
        raise RuntimeError("backward called with no active tape")
    if loss.data.size != 1:
        raise ShapeError("backward: loss must be scalar, got shape %s" % (loss.shape,))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        dy = grads.pop(id(node.out), None)
        if dy is None:
            continue
        for parent, dp in zip(node.parents, node.bwd(dy)):
            if dp is None or not parent.tracked:
                continue
            pid = id(parent)
            acc = grads.get(pid)
            grads[pid] = dp if acc is None else acc + dp
            if parent.requires_grad and parent.node is None:
                leaves[pid] = parent
    out: dict[Tensor, np.ndarray] = {}
    for pid, tensor in leaves.items():
        g = grads.get(pid)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != tensor.data.shape:
            raise ShapeError("gradient shape %s != tensor shape %s" % (g.shape, tensor.data.shape))
        tensor.grad = g if tensor.grad is None else tensor.grad + g
        out[tensor] = g
    return out


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError("%s: shapes %s and %s do not broadcast" % (name, a.shape, b.shape))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.data.shape, b.data.shape
    return _apply(a.data + b.data, (a, b),
                  lambda dy: (_unbroadcast(dy, sa), _unbroadcast(dy, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.data.shape, b.data.shape
    return _apply(a.data - b.data, (a, b),
                  lambda dy: (_unbroadcast(dy, sa), _unbroadcast(-dy, sb)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _apply(-a.data, (a,), lambda dy: (-dy,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _apply(ad * bd, (a, b),
                  lambda dy: (_unbroadcast(dy * bd, ad.shape), _unbroadcast(dy * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _apply(out, (a, b),
                  lambda dy: (_unbroadcast(dy / bd, ad.shape),
                              _unbroadcast(-dy * out / bd, bd.shape)))


def matmul(a, b, transpose_b: bool = False) -> Tensor:
    """a (..., m) @ b (m, n); with transpose_b, b is (n, m)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if bd.ndim != 2 or ad.ndim < 1:
        raise ShapeError("matmul: expects (..., m) @ 2-D, got %s @ %s" % (a.shape, b.shape))
    m = bd.shape[1] if transpose_b else bd.shape[0]
    if ad.shape[-1] != m:
        raise ShapeError("matmul: inner dims differ, %s @ %s (transpose_b=%s)"
                         % (a.shape, b.shape, transpose_b))
    out = ad @ (bd.T if transpose_b else bd)

    def bwd(dy):
        da = dy @ (bd if transpose_b else bd.T)
        a2 = ad.reshape(-1, ad.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        db = dy2.T @ a2 if transpose_b else a2.T @ dy2
        return da, db

    return _apply(out, (a, b), bwd)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    datas = [t.data for t in ts]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes %s along axis %d"
                         % ([t.shape for t in ts], axis))
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(dy):
        return tuple(np.split(dy, splits, axis=axis))

    return _apply(out, tuple(ts), bwd)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.array(ad[key])

    def bwd(dy):
        grad = np.zeros_like(ad)
        grad[key] += dy
        return (grad,)

    return _apply(out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return _apply(a.data.reshape(shape), (a,), lambda dy: (dy.reshape(old),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to: cannot broadcast %s to %s" % (a.shape, shape))
    return _apply(out, (a,), lambda dy: (_unbroadcast(dy, old),))


def repeat_last(a, k: int) -> Tensor:
    """Repeat each entry of the last axis k times consecutively."""
    a = as_tensor(a)
    ad = a.data
    out = np.repeat(ad, k, axis=-1)

    def bwd(dy):
        return (dy.reshape(ad.shape + (k,)).sum(axis=-1),)

    return _apply(out, (a,), bwd)


def take(a, indices) -> Tensor:
    """Gather rows of a along axis 0."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    ad = a.data
    if idx.size and (idx.min() < 0 or idx.max() >= ad.shape[0]):
        raise ShapeError("take: index out of range for axis of length %d" % ad.shape[0])
    out = ad[idx]

    def bwd(dy):
        grad = np.zeros_like(ad)
        np.add.at(grad, idx, dy)
        return (grad,)

    return _apply(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _apply(out, (a,), lambda dy: (dy * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _apply(out, (a,), lambda dy: (dy * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.maximum(ad, 0.0)
    return _apply(out, (a,), lambda dy: (dy * (ad > 0.0),))


def hardtanh(a) -> Tensor:
    """Clamp to [-1, 1]; subgradient at the kinks is 0."""
    a = as_tensor(a)
    ad = a.data
    out = np.clip(ad, -1.0, 1.0)
    return _apply(out, (a,), lambda dy: (dy * ((ad > -1.0) & (ad < 1.0)),))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(dy):
        inner = (dy * out).sum(axis=-1, keepdims=True)
        return ((dy - inner) * out,)

    return _apply(out, (a,), bwd)


def cumsum(a) -> Tensor:
    """Cumulative sum over the last axis."""
    a = as_tensor(a)
    out = np.cumsum(a.data, axis=-1)

    def bwd(dy):
        return (np.flip(np.cumsum(np.flip(dy, axis=-1), axis=-1), axis=-1),)

    return _apply(out, (a,), bwd)


def cumax(a) -> Tensor:
    """cumsum(softmax(x)): a monotone soft step in (0, 1] ending at 1."""
    return cumsum(softmax(a))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = ad.sum(axis=axis, keepdims=keepdims)

    def bwd(dy):
        if axis is None:
            return (np.broadcast_to(dy, ad.shape).copy(),)
        d = dy if keepdims else np.expand_dims(dy, axis)
        return (np.broadcast_to(d, ad.shape).copy(),)

    return _apply(out, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = ad.mean(axis=axis, keepdims=keepdims)
    count = ad.size if axis is None else ad.shape[axis]

    def bwd(dy):
        if axis is None:
            return (np.broadcast_to(dy / count, ad.shape).copy(),)
        d = dy if keepdims else np.expand_dims(dy, axis)
        return (np.broadcast_to(d / count, ad.shape).copy(),)

    return _apply(out, (a,), bwd)


def embedding(weight, ids) -> Tensor:
    """Look up rows of weight (V, E) by an integer id array."""
    weight = as_tensor(weight)
    idx = np.asarray(ids, dtype=np.int64)
    v = weight.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise ShapeError("embedding: id out of range [0, %d)" % v)
    out = weight.data[idx]

    def bwd(dy):
        grad = np.zeros_like(weight.data)
        np.add.at(grad, idx.reshape(-1), dy.reshape(-1, weight.data.shape[1]))
        return (grad,)

    return _apply(out, (weight,), bwd)


def dropout(a, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: keep with prob 1-p and scale by 1/(1-p)."""
    a = as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout: p must be in [0, 1), got %r" % p)
    if p == 0.0:
        return a
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    return _apply(a.data * mask, (a,), lambda dy: (dy * mask,))


def causal_conv1d(x, weight, bias, window: int) -> Tensor:
    """Windowed causal convolution along axis 0.

    x is (S, ..., E); output position t sees x[t : t+window] flattened, so a
    left-padded input of length S yields S-window+1 causal outputs.  weight
    is (window*E, H), bias (H,).
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    xd, wd, bd = x.data, weight.data, bias.data
    s, e = xd.shape[0], xd.shape[-1]
    t_out = s - window + 1
    if t_out < 1:
        raise ShapeError("causal_conv1d: input length %d shorter than window %d" % (s, window))
    if wd.ndim != 2 or wd.shape[0] != window * e or bd.shape != (wd.shape[1],):
        raise ShapeError("causal_conv1d: weight %s bias %s incompatible with window %d x feature %d"
                         % (weight.shape, bias.shape, window, e))
    h = wd.shape[1]
    out = np.broadcast_to(bd, (t_out,) + xd.shape[1:-1] + (h,)).copy()
    for k in range(window):
        out += xd[k : k + t_out] @ wd[k * e : (k + 1) * e]

    def bwd(dy):
        dx = np.zeros_like(xd)
        dw = np.zeros_like(wd)
        dy_flat = dy.reshape(-1, h)
        for k in range(window):
            wk = wd[k * e : (k + 1) * e]
            dx[k : k + t_out] += dy @ wk.T
            xk = xd[k : k + t_out].reshape(-1, e)
            dw[k * e : (k + 1) * e] = xk.T @ dy_flat
        db = dy_flat.sum(axis=0)
        return dx, dw, db

    return _apply(out, (x, weight, bias), bwd)


def cross_entropy_logits(logits, targets) -> Tensor:
    """Per-row cross entropy in nats: logits (N, V), integer targets (N,)."""
    logits = as_tensor(logits)
    ld = logits.data
    tgt = np.asarray(targets, dtype=np.int64)
    if ld.ndim != 2 or tgt.shape != (ld.shape[0],):
        raise ShapeError("cross_entropy_logits: logits %s targets %s" % (logits.shape, tgt.shape))
    if tgt.size and (tgt.min() < 0 or tgt.max() >= ld.shape[1]):
        raise ShapeError("cross_entropy_logits: target id out of range [0, %d)" % ld.shape[1])
    m = ld.max(axis=-1, keepdims=True)
    z = np.exp(ld - m)
    zsum = z.sum(axis=-1)
    lse = m[:, 0] + np.log(zsum)
    rows = np.arange(ld.shape[0])
    out = lse - ld[rows, tgt]

    def bwd(dy):
        grad = z / zsum[:, None]
        grad[rows, tgt] -= 1.0
        return (grad * dy[:, None],)

    return _apply(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of scalar f at x and
    central finite differences with step eps."""
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    was = x.requires_grad
    x.requires_grad = x.tracked = True
    x.grad = None
    with Tape():
        y = f(x)
        if y.data.size != 1:
            raise ShapeError("grad_check: f must be scalar-valued, got %s" % (y.shape,))
        backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    x.requires_grad = x.tracked = was

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        hi = float(f(x).data)
        flat[k] = orig - eps
        lo = float(f(x).data)
        flat[k] = orig
        nflat[k] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


# ---------------------------------------------------------------------------
# Parameter checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SYDLMCK1"


def save_checkpoint(path: str, params: dict, header: Optional[dict] = None) -> None:
    """Flat (name, shape, little-endian float64) records behind a versioned
    magic header; the header dict (JSON) carries the run config."""
    import json

    blob = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name, tensor in params.items():
            data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=np.float64)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_checkpoint(path: str):
    import json

    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("%s is not a checkpoint (bad magic)" % path)
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
            params[name] = data
    return header, params
