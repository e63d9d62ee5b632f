"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Every operation accepts an optional leading batch axis; gradients are
accumulated into ``Tensor.grad`` of leaf tensors that require them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAKY_SLOPE = 0.3


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class Tensor:
    """An n-dimensional float64 array with an accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    """Wrap ``data`` as a graph node if any parent needs a gradient."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = ""
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` of every reachable leaf.

    Intermediate gradients live only for the duration of the call, so two
    calls without zeroing add exactly twice the gradient to each leaf.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise and structural ops -----------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    return _make(np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def index(x: Tensor, idx) -> Tensor:
    def grad_fn(g):
        out = np.zeros_like(x.data)
        out[idx] += g
        return (out,)
    return _make(x.data[idx], (x,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def grad_fn(g):
        return tuple(np.moveaxis(g, axis, 0))
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, grad_fn)


# --- activations ---------------------------------------------------------------

def leaky_relu(x: Tensor, alpha: float = LEAKY_SLOPE) -> Tensor:
    slope = np.where(x.data > 0, 1.0, alpha)
    return _make(x.data * slope, (x,), lambda g: (g * slope,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


# --- layers --------------------------------------------------------------------

def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``W @ x + b`` for an ``(n,)`` or batched ``(B, n)`` input."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"dense: x {x.shape}, W {W.shape}, b {b.shape}")
    xd = x.data
    out = xd @ W.data.T + b.data

    def grad_fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        return (g @ W.data, g2.T @ x2, g2.sum(axis=0))
    return _make(out, (x, W, b), grad_fn)


def _im2col(xd: np.ndarray) -> np.ndarray:
    """``(B, C, H, W)`` to ``(B*H*W, 9*C)`` patches ordered ``(di, dj, c)``."""
    B, C, H, W = xd.shape
    xp = np.zeros((B, H + 2, W + 2, C))
    xp[:, 1:-1, 1:-1] = xd.transpose(0, 2, 3, 1)
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))     # (B, H, W, C, 3, 3)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, 9 * C)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution (cross-correlation), stride 1, zero 'same' padding.

    ``x`` is ``(C, H, W)`` or ``(B, C, H, W)``; ``w`` is ``(C', C, 3, 3)``.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.data.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: kernel must be (C', C, 3, 3), got {w.shape}")
    if x.data.ndim not in (3, 4) or x.shape[-3] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} for {w.shape[0]} output channels")
    unbatched = x.data.ndim == 3
    xd = x.data[None] if unbatched else x.data
    B, C, H, W_ = xd.shape
    Co = w.shape[0]
    cols = _im2col(xd)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(Co, 9 * C)
    out = (cols @ wmat.T + b.data).reshape(B, H, W_, Co).transpose(0, 3, 1, 2)
    if unbatched:
        out = out[0]

    def grad_fn(g):
        gb = g[None] if unbatched else g
        g2 = gb.transpose(0, 2, 3, 1).reshape(B * H * W_, Co)
        gw = (g2.T @ cols).reshape(Co, 3, 3, C).transpose(0, 3, 1, 2)
        # input gradient is a same-padded conv of g with the flipped, transposed kernel
        wflip = w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(9 * Co, C)
        gx = (_im2col(gb) @ wflip).reshape(B, H, W_, C).transpose(0, 3, 1, 2)
        if unbatched:
            gx = gx[0]
        return (gx, gw, g2.sum(axis=0))
    return _make(np.ascontiguousarray(out), (x, w, b), grad_fn)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, W: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step.

    ``W`` is ``(4d, n + d)`` holding the input, forget, cell and output gate
    blocks in that row order, each acting on ``[x, h]``; ``b`` is ``(4d,)``.
    Returns ``(h', c')``.
    """
    x, h, c, W, b = (as_tensor(t) for t in (x, h, c, W, b))
    d = h.shape[-1]
    n = x.shape[-1]
    if W.shape != (4 * d, n + d) or b.shape != (4 * d,) or c.shape != h.shape:
        raise ShapeError(f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape}, W {W.shape}, b {b.shape}")
    xh = np.concatenate([x.data, h.data], axis=-1)
    z = xh @ W.data.T + b.data
    i = _sigmoid(z[..., :d])
    f = _sigmoid(z[..., d:2 * d])
    gg = np.tanh(z[..., 2 * d:3 * d])
    o = _sigmoid(z[..., 3 * d:])
    c_new = f * c.data + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc

    # h' and c' are slices of one fused node so the gate backward runs once
    def grad_fn(g):
        gh, gc = g[..., :d], g[..., d:]
        dc = gc + gh * o * (1 - tc * tc)
        dz = np.concatenate([
            dc * gg * i * (1 - i),
            dc * c.data * f * (1 - f),
            dc * i * (1 - gg * gg),
            gh * tc * o * (1 - o),
        ], axis=-1)
        dxh = dz @ W.data
        dz2 = dz.reshape(-1, 4 * d)
        return (dxh[..., :n], dxh[..., n:], dc * f,
                dz2.T @ xh.reshape(-1, n + d), dz2.sum(axis=0))

    hc = _make(np.concatenate([h_new, c_new], axis=-1), (x, h, c, W, b), grad_fn)
    if not hc.requires_grad:
        return Tensor(h_new), Tensor(c_new)
    return index(hc, (..., slice(None, d))), index(hc, (..., slice(d, None)))


def mse_loss(pred: Tensor, target) -> Tensor:
    """Sum of squared errors per sample, averaged over the leading batch axis.

    A 1-D input is a single sample. Any axes after the batch axis (time steps,
    channels, spatial) are summed.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: {pred.shape} vs {target.shape}")
    n = pred.shape[0] if pred.data.ndim > 1 else 1
    diff = pred.data - target.data
    val = np.asarray(np.sum(diff * diff) / n)
    return _make(val, (pred, target),
                 lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n))


# --- optimisation ----------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    """Bias-corrected ADAM update of ``params`` in place from their ``grad``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class Adam:
    params: list[Tensor]
    lr: float = 1e-3
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.params = list(self.params)
        self.state = AdamState.zeros_like(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        adam_step(self.params, self.state, self.lr if lr is None else lr)


# --- verification ----------------------------------------------------------------

def grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
               max_entries: int | None = None, seed: int = 0, kink_tol: float | None = None,
               stats: dict | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the graph from the current parameter values. With
    ``max_entries`` set, at most that many entries per parameter are probed,
    chosen by a seeded RNG. With ``kink_tol`` set, entries whose central
    differences at ``h`` and ``h / 4`` disagree by more than ``kink_tol``
    (relative) straddle a non-differentiable point and are skipped; the count
    goes to ``stats["skipped"]``.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    rng = np.random.default_rng(seed)
    worst, skipped, probed = 0.0, 0, 0

    def central(flat, k, step):
        orig = flat[k]
        flat[k] = orig + step
        fp = float(loss_fn().data)
        flat[k] = orig - step
        fm = float(loss_fn().data)
        flat[k] = orig
        return (fp - fm) / (2 * step)

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b), 1e-8)

    for p in params:
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        for k in idx:
            numeric = central(flat, k, h)
            if kink_tol is not None and rel(numeric, central(flat, k, h / 4)) > kink_tol:
                skipped += 1
                continue
            probed += 1
            worst = max(worst, rel(analytic[k], numeric))
    if stats is not None:
        stats.update(skipped=skipped, probed=probed)
    return worst
