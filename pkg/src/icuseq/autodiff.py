"""Minimal reverse-mode tape over numpy arrays.

Just enough operator coverage for the embedding composition, the encoder
stack, and the training losses. Gradients accumulate into ``Tensor.grad``
after calling :func:`backward` on a scalar node; every op keeps the dtype of
its inputs so the same graph runs in float32 for training and float64 for
finite-difference checks.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import ShapeMismatch

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, dtype={self.data.dtype})"

    # Convenience arithmetic used by the losses; heavy lifting goes through
    # the module-level ops below.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)


def parameter(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar node, accumulating into leaf ``grad``s."""
    if loss.data.shape != ():
        raise ShapeMismatch(f"backward expects a scalar, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.data.dtype.type(c)

    def bwd(g):
        a.accumulate(g * a.data.dtype.type(c))

    return _make(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            a.accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            b.accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        a.accumulate(g.reshape(a.data.shape))

    return _make(out, (a,), bwd)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        a.accumulate(g.transpose(inverse))

    return _make(out, (a,), bwd)


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``table[idx]`` with scatter-add on the way back."""
    idx = np.asarray(idx)
    out = table.data[idx]

    def bwd(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        table.accumulate(grad)

    return _make(out, (table,), bwd)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor by integer index."""
    idx = np.asarray(idx)
    out = a.data[idx]

    def bwd(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, idx, g)
        a.accumulate(grad)

    return _make(out, (a,), bwd)


def take_position(a: Tensor, pos: int) -> Tensor:
    """Slice position ``pos`` along axis 1 of a (B, L, d) tensor."""
    out = a.data[:, pos, :]

    def bwd(g):
        grad = np.zeros_like(a.data)
        grad[:, pos, :] = g
        a.accumulate(grad)

    return _make(out, (a,), bwd)


def squeeze_last(a: Tensor) -> Tensor:
    out = a.data[..., 0]

    def bwd(g):
        a.accumulate(g[..., None])

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        a.accumulate(g * (cdf + x * pdf))

    return _make(out.astype(x.dtype, copy=False), (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then apply gain and bias."""
    x = a.data
    dim = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data

    def bwd(g):
        if gain.requires_grad:
            gain.accumulate(_unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            bias.accumulate(_unbroadcast(g, bias.data.shape))
        if a.requires_grad:
            dxhat = g * gain.data
            s1 = dxhat.sum(axis=-1, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
            a.accumulate((inv / dim) * (dim * dxhat - s1 - xhat * s2))

    return _make(out.astype(x.dtype, copy=False), (a, gain, bias), bwd)


def softmax_masked(scores: Tensor, keep: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``keep`` positions.

    Masked entries come out exactly 0; a row with no admissible position
    yields all zeros instead of NaN.
    """
    x = scores.data
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    any_keep = keep.any(axis=-1, keepdims=True)
    m = np.where(any_keep, x.max(axis=-1, keepdims=True, initial=-np.inf, where=keep), 0.0)
    e = np.where(keep, np.exp(x - m), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    p = np.where(any_keep, e / np.where(s == 0.0, 1.0, s), 0.0)
    p = p.astype(x.dtype, copy=False)

    def bwd(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        scores.accumulate(p * (g - inner))

    return _make(p, (scores,), bwd)


def dropout(a: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    factor = a.data.dtype.type(1.0 / (1.0 - rate))
    out = a.data * keep * factor

    def bwd(g):
        a.accumulate(g * keep * factor)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and losses


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum()

    def bwd(g):
        a.accumulate(np.full_like(a.data, g))

    return _make(np.asarray(out), (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = a.data.mean()

    def bwd(g):
        a.accumulate(np.full_like(a.data, g / n))

    return _make(np.asarray(out), (a,), bwd)


def cross_entropy_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer targets against rows of logits."""
    targets = np.asarray(targets)
    n = logits.data.shape[0]
    if targets.shape != (n,):
        raise ShapeMismatch(f"{n} logit rows but targets shape {targets.shape}")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    lse = np.log(e.sum(axis=1)) + m[:, 0]
    picked = x[np.arange(n), targets]
    out = (lse - picked).mean()

    def bwd(g):
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(n), targets] -= 1.0
        logits.accumulate(p * (g / n))

    return _make(np.asarray(out.astype(x.dtype)), (logits,), bwd)


def mae_mean(pred: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.data.shape:
        raise ShapeMismatch(f"prediction shape {pred.data.shape} vs target {target.shape}")
    diff = pred.data - target
    out = np.abs(diff).mean()

    def bwd(g):
        pred.accumulate(np.sign(diff) * (g / diff.size))

    return _make(np.asarray(out), (pred,), bwd)


def bce_logits_mean(logits: Tensor, labels: np.ndarray, pos_weight: np.ndarray | float = 1.0) -> Tensor:
    """Mean binary cross-entropy of 0/1 labels from logits, positives scaled by ``pos_weight``."""
    y = np.asarray(labels, dtype=logits.data.dtype)
    if y.shape != logits.data.shape:
        raise ShapeMismatch(f"logit shape {logits.data.shape} vs labels {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ShapeMismatch("labels must be 0 or 1")
    w = np.broadcast_to(np.asarray(pos_weight, dtype=logits.data.dtype), y.shape)
    z = logits.data
    positive = y > 0.5
    # softplus via logaddexp is stable; the branch keeps infinite logits exact
    per = np.where(positive, w * np.logaddexp(0.0, -z), np.logaddexp(0.0, z))
    out = per.mean()

    def bwd(g):
        sig = expit(z)
        grad = np.where(positive, w * (sig - 1.0), sig)
        logits.accumulate(grad.astype(z.dtype) * (g / y.size))

    return _make(np.asarray(out.astype(z.dtype)), (logits,), bwd)


def collect_parameters(named: Iterable[tuple[str, Tensor]]) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for name, t in named:
        if name in out:
            raise ShapeMismatch(f"duplicate parameter name {name!r}")
        out[name] = t
    return out
