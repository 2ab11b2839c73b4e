"""Dense tensors with reverse-mode automatic differentiation.

numpy ndarrays hold the data.  Every op whose inputs are tracked appends
one record to the active Graph: the output tensors plus a closure that
pushes their gradients back to the inputs.  Records accumulate in
execution order, so reverse iteration is a valid backward schedule and
`backward` needs no graph search; it consumes the tape and clears it.

The recurrent hot spots (LSTM step, masked dot attention, cross-entropy)
are single fused records with hand-written backward passes; everything
else is composed from small elementwise and linear-algebra ops.

Training runs in float32 by default; gradient checks construct their
tensors as float64 and everything downstream inherits the dtype.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording, e.g. during decoding."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None \
                and data.dtype in FLOAT_DTYPES:
            arr = data
        else:
            arr = np.asarray(data)
            if dtype is not None:
                arr = arr.astype(dtype, copy=False)
            elif arr.dtype not in FLOAT_DTYPES:
                arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()

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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Constant copy, cut loose from the graph."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray, owned: bool = False) -> None:
        """Add `g` into the gradient; `owned` marks arrays safe to adopt."""
        if self.grad is None:
            self.grad = g if owned else g.copy()
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Light operator sugar; the module functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Ordered record of executed operations.

    Each node is (output tensors, backward closure), appended in forward
    execution order.  A Graph and the tensors flowing through it belong to
    one worker at a time.
    """

    def __init__(self):
        self.nodes: list[tuple[tuple[Tensor, ...], Callable[[], None]]] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


_graph = Graph()


def active_graph() -> Graph:
    return _graph


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """Backpropagate from a scalar loss through the recorded graph.

    Consumes and clears the active graph.  When `params` is given, any
    listed tensor the loss never touched gets an explicit zero gradient.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for outputs, fn in reversed(_graph.nodes):
        for out in outputs:
            if out.grad is not None:
                fn()
                break
    _graph.clear()
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# op plumbing


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(out_data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable[[Tensor], Callable[[], None]]) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        _graph.nodes.append(((out,), backward_fn(out)))
    return out


def _make_pair(first: np.ndarray, second: np.ndarray, parents: Sequence[Tensor],
               backward_fn) -> tuple[Tensor, Tensor]:
    a, b = Tensor(first), Tensor(second)
    if _grad_enabled and any(p.requires_grad for p in parents):
        a.requires_grad = b.requires_grad = True
        a._parents = b._parents = tuple(parents)
        _graph.nodes.append(((a, b), backward_fn(a, b)))
    return a, b


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)

    def bw(out):
        def fn():
            g = out.grad
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.shape), owned=g.shape != a.shape)
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g, b.shape), owned=g.shape != b.shape)
        return fn

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)

    def bw(out):
        def fn():
            g = out.grad
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.shape), owned=g.shape != a.shape)
            if b.requires_grad:
                b.accumulate_grad(-_unbroadcast(g, b.shape), owned=True)
        return fn

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)

    def bw(out):
        def fn():
            g = out.grad
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g * b.data, a.shape), owned=True)
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g * a.data, b.shape), owned=True)
        return fn

    return _make(a.data * b.data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects tensors with ndim >= 2")

    def bw(out):
        def fn():
            g = out.grad
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a.accumulate_grad(_unbroadcast(ga, a.shape), owned=True)
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b.accumulate_grad(_unbroadcast(gb, b.shape), owned=True)
        return fn

    return _make(np.matmul(a.data, b.data), (a, b), bw)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def bw(out):
        def fn():
            if x.requires_grad:
                x.accumulate_grad((1.0 - t * t) * out.grad, owned=True)
        return fn

    return _make(t, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    # 0.5*(1+tanh(x/2)) is stable for large |x|
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bw(out):
        def fn():
            if x.requires_grad:
                x.accumulate_grad(s * (1.0 - s) * out.grad, owned=True)
        return fn

    return _make(s, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`; rows sum to 1."""
    if np.isnan(x.data).any():
        raise ValueError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        def fn():
            if x.requires_grad:
                g = out.grad
                dot = (g * s).sum(axis=axis, keepdims=True)
                x.accumulate_grad(s * (g - dot), owned=True)
        return fn

    return _make(s, (x,), bw)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(out):
        def fn():
            if x.requires_grad:
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                x.accumulate_grad(np.broadcast_to(g, x.shape).copy(), owned=True)
        return fn

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.size

    def bw(out):
        def fn():
            if x.requires_grad:
                x.accumulate_grad(
                    np.full(x.shape, out.grad / n, dtype=x.dtype), owned=True)
        return fn

    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)

    def bw(out):
        def fn():
            g = out.grad
            start = 0
            for t in tensors:
                width = t.shape[axis]
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, start + width)
                if t.requires_grad:
                    t.accumulate_grad(g[tuple(sl)])
                start += width
        return fn

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def bw(out):
        def fn():
            g = out.grad
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    t.accumulate_grad(np.take(g, i, axis=axis), owned=True)
        return fn

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bw(out):
        def fn():
            if x.requires_grad:
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                x.grad[sl] += out.grad
        return fn

    return _make(x.data[sl], (x,), bw)


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """Pick one slice along `axis`, dropping that axis."""

    def bw(out):
        def fn():
            if x.requires_grad:
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                sl = [slice(None)] * x.ndim
                sl[axis] = index
                x.grad[tuple(sl)] += out.grad
        return fn

    return _make(np.take(x.data, index, axis=axis), (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def bw(out):
        def fn():
            if x.requires_grad:
                x.accumulate_grad(out.grad.reshape(x.shape))
        return fn

    return _make(x.data.reshape(shape), (x,), bw)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    def bw(out):
        def fn():
            if x.requires_grad:
                x.accumulate_grad(np.swapaxes(out.grad, a, b))
        return fn

    return _make(np.swapaxes(x.data, a, b), (x,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids of any shape -> ids.shape + (E,)."""
    ids = np.asarray(ids)

    def bw(out):
        def fn():
            if table.requires_grad:
                if table.grad is None:
                    table.grad = np.zeros_like(table.data)
                flat = out.grad.reshape(-1, table.shape[1])
                np.add.at(table.grad, ids.ravel(), flat)
        return fn

    return _make(table.data[ids], (table,), bw)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p), identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def bw(out):
        def fn():
            if x.requires_grad:
                x.accumulate_grad(mask * out.grad, owned=True)
        return fn

    return _make(x.data * mask, (x,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray,
                  mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood over unmasked rows.

    logits: (N, V); targets: (N,) int ids; mask: (N,) with 1 for rows that
    count.  Masked rows contribute exactly zero to the value and to the
    gradient.
    """
    if logits.ndim != 2:
        raise ValueError("cross_entropy expects 2-d logits")
    targets = np.asarray(targets)
    n = logits.shape[0]
    if mask is None:
        mask = np.ones(n, dtype=logits.dtype)
    else:
        mask = np.asarray(mask, dtype=logits.dtype)
    denom = float(mask.sum())
    if denom <= 0.0:
        raise ValueError("cross_entropy: no unmasked positions")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    nll = -logp[np.arange(n), targets] * mask
    value = np.asarray(nll.sum() / denom, dtype=logits.dtype)

    def bw(out):
        def fn():
            if logits.requires_grad:
                probs = np.exp(logp)
                probs[np.arange(n), targets] -= 1.0
                probs *= (mask / denom)[:, None]
                logits.accumulate_grad(probs * out.grad, owned=True)
        return fn

    return _make(value, (logits,), bw)


# ---------------------------------------------------------------------------
# fused recurrent and attention steps


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor,
              w_x: Tensor, w_h: Tensor, b: Tensor,
              mask: Optional[np.ndarray] = None) -> tuple[Tensor, Tensor]:
    """One LSTM step with gates in i, f, g, o order; a single graph record.

    x: (B, In), h_prev/c_prev: (B, H), w_x: (In, 4H), w_h: (H, 4H), b: (4H,).
    `mask` (B, 1), when given, carries the previous state through padded
    rows: out = mask*new + (1-mask)*prev.
    """
    hidden = h_prev.shape[-1]
    if x.shape[-1] != w_x.shape[0] or w_x.shape[1] != 4 * hidden:
        raise ValueError(
            f"lstm_cell dimension mismatch: x {x.shape}, w_x {w_x.shape}, H={hidden}")
    z = x.data @ w_x.data + h_prev.data @ w_h.data + b.data
    i = 0.5 * (1.0 + np.tanh(0.5 * z[:, :hidden]))
    f = 0.5 * (1.0 + np.tanh(0.5 * z[:, hidden:2 * hidden]))
    g = np.tanh(z[:, 2 * hidden:3 * hidden])
    o = 0.5 * (1.0 + np.tanh(0.5 * z[:, 3 * hidden:]))
    c_raw = f * c_prev.data + i * g
    tc = np.tanh(c_raw)
    h_raw = o * tc
    if mask is None:
        h_data, c_data = h_raw, c_raw
    else:
        h_data = mask * h_raw + (1.0 - mask) * h_prev.data
        c_data = mask * c_raw + (1.0 - mask) * c_prev.data

    c_prev_data = c_prev.data
    x_data = x.data
    h_prev_data = h_prev.data

    def bw(h_out, c_out):
        def fn():
            gh = h_out.grad
            gc = c_out.grad
            zero = np.zeros_like(h_raw)
            gh = zero if gh is None else gh
            gc = zero if gc is None else gc
            if mask is None:
                gh_raw, gc_raw = gh, gc
            else:
                gh_raw, gc_raw = gh * mask, gc * mask
                if h_prev.requires_grad:
                    h_prev.accumulate_grad(gh * (1.0 - mask), owned=True)
                if c_prev.requires_grad:
                    c_prev.accumulate_grad(gc * (1.0 - mask), owned=True)
            go = gh_raw * tc
            gc_total = gc_raw + gh_raw * o * (1.0 - tc * tc)
            gz = np.empty_like(z)
            gz[:, :hidden] = gc_total * g * i * (1.0 - i)
            gz[:, hidden:2 * hidden] = gc_total * c_prev_data * f * (1.0 - f)
            gz[:, 2 * hidden:3 * hidden] = gc_total * i * (1.0 - g * g)
            gz[:, 3 * hidden:] = go * o * (1.0 - o)
            if x.requires_grad:
                x.accumulate_grad(gz @ w_x.data.T, owned=True)
            if h_prev.requires_grad:
                h_prev.accumulate_grad(gz @ w_h.data.T, owned=True)
            if c_prev.requires_grad:
                c_prev.accumulate_grad(gc_total * f, owned=True)
            if w_x.requires_grad:
                w_x.accumulate_grad(x_data.T @ gz, owned=True)
            if w_h.requires_grad:
                w_h.accumulate_grad(h_prev_data.T @ gz, owned=True)
            if b.requires_grad:
                b.accumulate_grad(gz.sum(axis=0), owned=True)
        return fn

    return _make_pair(h_data, c_data, (x, h_prev, c_prev, w_x, w_h, b), bw)


def dot_attention(states: Tensor, mask: np.ndarray, query: Tensor
                  ) -> tuple[Tensor, Tensor]:
    """Masked dot-score attention of query (B,H) over states (B,M,H).

    Returns (mixture (B,H), weights (B,M)).  Weights are zero exactly on
    masked positions and sum to 1 over the unmasked ones.
    """
    b, m, hidden = states.shape
    scores = np.matmul(states.data, query.data[:, :, None])[:, :, 0]
    if np.isnan(scores).any():
        raise ValueError("attention scores contain NaN")
    shifted = scores + (mask - 1.0) * 1e9
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    w = e / e.sum(axis=1, keepdims=True)
    mixed = np.matmul(w[:, None, :], states.data)[:, 0, :]

    states_data = states.data
    query_data = query.data

    def bw(mix_out, w_out):
        def fn():
            gmix = mix_out.grad
            gw = np.matmul(states_data, gmix[:, :, None])[:, :, 0] \
                if gmix is not None else np.zeros_like(w)
            if w_out.grad is not None:
                gw = gw + w_out.grad
            gscores = w * (gw - (gw * w).sum(axis=1, keepdims=True))
            if states.requires_grad:
                gstates = w[:, :, None] * (gmix[:, None, :] if gmix is not None
                                           else 0.0)
                gstates += gscores[:, :, None] * query_data[:, None, :]
                states.accumulate_grad(gstates, owned=True)
            if query.requires_grad:
                gq = np.matmul(gscores[:, None, :], states_data)[:, 0, :]
                query.accumulate_grad(gq, owned=True)
        return fn

    return _make_pair(mixed, w, (states, query), bw)


# ---------------------------------------------------------------------------
# optimization


class AdaGrad:
    """AdaGrad with per-parameter accumulated squared gradients."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.eps = eps
        self.accum = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, acc in zip(self.params, self.accum):
            if p.grad is None:
                continue
            acc += p.grad * p.grad
            p.data -= self.lr * p.grad / (np.sqrt(acc) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_global_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most `max_norm`."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def assert_finite(x: Tensor, name: str = "tensor") -> None:
    if not np.isfinite(x.data).all():
        raise FloatingPointError(f"{name} contains NaN or Inf")


def make_rng(seed: int, *tags: int) -> np.random.Generator:
    """Independent, reproducible stream derived from a seed and stream tags."""
    return np.random.default_rng((int(seed),) + tuple(int(t) for t in tags))
