"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Design rules, chosen for auditability at desk scale:

* double precision everywhere (``float64``), row-major storage;
* no implicit broadcasting: elementwise ops require identical shapes, and
  the only shape-mixing primitives are explicit (``scale``, ``linear`` bias,
  ``layer_norm`` gain/bias);
* stochastic ops (``dropout``) take an explicit ``numpy.random.Generator``;
* ``backward`` accumulates into ``.grad`` buffers, so repeated calls
  without ``zero_grad`` add up (documented behaviour, used for batching).

Every differentiable op is validated against central finite differences via
:func:`check_gradients`.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

# Log-space "minus infinity". Large enough that exp() underflows to 0.0 and
# sums of a few thousand of them stay far from float64 overflow.
NEG_INF = -1.0e30


class Tensor:
    """Dense float64 array plus gradient bookkeeping.

    ``data`` is immutable by convention once the tensor has been consumed by
    an op; only ``grad`` buffers are mutated afterwards.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
            self.grad = self.grad.reshape(self.data.shape)
        else:
            self.grad += g

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all strict-shape, see module docstring.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips graph construction (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[["Tensor"], Callable[[], None]]) -> Tensor:
    """Wrap an op result, attaching the backward closure only when needed."""
    out = Tensor(data, requires_grad=_GRAD_ENABLED and any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward(out)
    return out


def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar root.

    Populates ``grad`` on every reachable tensor with ``requires_grad``.
    Leaf grads accumulate across calls until ``zero_grad``; interior node
    grads are per-sweep (reset here), so repeating a backward pass doubles
    leaf grads rather than compounding.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward() requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    for node in topo:
        if node._backward is not None:
            node.grad = None
    root._accumulate(np.ones_like(root.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} requires inputs to have the same shape, got {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# construction helpers


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape, scale: float = 1.0,
          requires_grad: bool = False) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")

    def bw(out: Tensor):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad)
            if b.requires_grad:
                b._accumulate(out.grad)
        return run

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")

    def bw(out: Tensor):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad)
            if b.requires_grad:
                b._accumulate(-out.grad)
        return run

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")

    def bw(out: Tensor):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad * b.data)
            if b.requires_grad:
                b._accumulate(out.grad * a.data)
        return run

    return _make(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    """Scalar-times-tensor, the one sanctioned broadcast."""
    c = float(c)

    def bw(out: Tensor):
        def run():
            a._accumulate(out.grad * c)
        return run

    return _make(a.data * c, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product of a [m, k] by a [k, n] tensor."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul requires [m,k] x [k,n], got {a.shape} and {b.shape}")

    def bw(out: Tensor):
        def run():
            if a.requires_grad:
                a._accumulate(out.grad @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ out.grad)
        return run

    return _make(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose requires a 2-D tensor, got shape {a.shape}")

    def bw(out: Tensor):
        def run():
            a._accumulate(out.grad.T)
        return run

    return _make(np.ascontiguousarray(a.data.T), (a,), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w + b`` with the bias added to every row."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear requires [n,d] x [d,m], got {x.shape} and {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear bias must have shape ({w.shape[1]},), got {b.shape}")
    y = x.data @ w.data
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(out: Tensor):
        def run():
            if x.requires_grad:
                x._accumulate(out.grad @ w.data.T)
            if w.requires_grad:
                w._accumulate(x.data.T @ out.grad)
            if b is not None and b.requires_grad:
                b._accumulate(out.grad.sum(axis=0))
        return run

    return _make(y, parents, bw)


# ---------------------------------------------------------------------------
# reductions and losses


def tsum(a: Tensor) -> Tensor:
    def bw(out: Tensor):
        def run():
            a._accumulate(np.full_like(a.data, float(out.grad.reshape(()))))
        return run

    return _make(np.asarray(a.data.sum()), (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(out: Tensor):
        def run():
            a._accumulate(np.full_like(a.data, float(out.grad.reshape(())) / n))
        return run

    return _make(np.asarray(a.data.mean()), (a,), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    if a.shape != b.shape:
        raise ShapeError(f"mse requires inputs to have the same length, got {a.shape} and {b.shape}")
    diff = a.data - b.data
    n = a.data.size

    def bw(out: Tensor):
        def run():
            g = float(out.grad.reshape(())) * 2.0 / n
            if a.requires_grad:
                a._accumulate(g * diff)
            if b.requires_grad:
                b._accumulate(-g * diff)
        return run

    return _make(np.asarray(np.mean(diff * diff)), (a, b), bw)


# ---------------------------------------------------------------------------
# row-wise nonlinearities


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; rows sum to 1 within 1e-12."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows requires a 2-D tensor, got shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows received non-finite input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(out: Tensor):
        def run():
            dot = (out.grad * y).sum(axis=1, keepdims=True)
            x._accumulate(y * (out.grad - dot))
        return run

    return _make(y, (x,), bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows requires a 2-D tensor, got shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax_rows received non-finite input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse

    def bw(out: Tensor):
        def run():
            rowsum = out.grad.sum(axis=1, keepdims=True)
            x._accumulate(out.grad - np.exp(y) * rowsum)
        return run

    return _make(y, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def bw(out: Tensor):
        def run():
            x._accumulate(out.grad * mask)
        return run

    return _make(x.data * mask, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift.

    ``gain`` and ``bias`` are [d] vectors applied to every row.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm requires a 2-D tensor, got shape {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bw(out: Tensor):
        def run():
            if gain.requires_grad:
                gain._accumulate((out.grad * xhat).sum(axis=0))
            if bias.requires_grad:
                bias._accumulate(out.grad.sum(axis=0))
            if x.requires_grad:
                dxhat = out.grad * gain.data
                m1 = dxhat.mean(axis=1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
                x._accumulate((dxhat - m1 - xhat * m2) * inv)
        return run

    return _make(y, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# lookup, convolution, dropout


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; gradient scatter-adds back into the table."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding id out of range for table with {table.shape[0]} rows")

    def bw(out: Tensor):
        def run():
            g = np.zeros_like(table.data)
            np.add.at(g, idx, out.grad)
            table._accumulate(g)
        return run

    return _make(table.data[idx], (table,), bw)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    """Strided 1-D convolution over time with zero padding.

    ``x`` is [T, c_in], ``w`` is [kernel, c_in, c_out] with kernel odd
    (padding kernel//2), so the output has ceil(T / stride) rows.
    """
    if x.data.ndim != 2 or w.data.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d requires x [T,c_in] and w [k,c_in,c_out], got {x.shape} and {w.shape}")
    k, c_in, c_out = w.shape
    if k % 2 != 1:
        raise ShapeError(f"conv1d kernel must be odd, got {k}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv1d bias must have shape ({c_out},), got {b.shape}")
    t = x.shape[0]
    pad = k // 2
    t_out = (t + 2 * pad - k) // stride + 1
    xp = np.zeros((t + 2 * pad, c_in))
    xp[pad:pad + t] = x.data
    segs = []
    y = None
    for j in range(k):
        seg = xp[j:j + (t_out - 1) * stride + 1:stride]
        segs.append(seg)
        y = seg @ w.data[j] if y is None else y + seg @ w.data[j]
    y += b.data

    def bw(out: Tensor):
        def run():
            if b.requires_grad:
                b._accumulate(out.grad.sum(axis=0))
            if w.requires_grad:
                gw = np.zeros_like(w.data)
                for j in range(k):
                    gw[j] = segs[j].T @ out.grad
                w._accumulate(gw)
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for j in range(k):
                    gxp[j:j + (t_out - 1) * stride + 1:stride] += out.grad @ w.data[j].T
                x._accumulate(gxp[pad:pad + t])
        return run

    return _make(y, (x, w, b), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def bw(out: Tensor):
        def run():
            x._accumulate(out.grad * mask)
        return run

    return _make(x.data * mask, (x,), bw)


def take_per_row(x: Tensor, ids: Sequence[int]) -> Tensor:
    """Pick one entry per row: out[i] = x[i, ids[i]]."""
    idx = np.asarray(ids, dtype=np.int64)
    if x.data.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"take_per_row needs one id per row, got x {x.shape} and ids {idx.shape}")
    rows = np.arange(x.shape[0])

    def bw(out: Tensor):
        def run():
            g = np.zeros_like(x.data)
            g[rows, idx] = out.grad
            x._accumulate(g)
        return run

    return _make(x.data[rows, idx], (x,), bw)


def custom_op(data: np.ndarray, parents: Sequence[Tensor],
              backward_fn: Callable[[Tensor], Callable[[], None]]) -> Tensor:
    """Hook for fused ops defined outside this module (e.g. the CTC loss)."""
    return _make(np.asarray(data, dtype=np.float64), parents, backward_fn)


# ---------------------------------------------------------------------------
# fused blocks
#
# Composites of the primitives above, collapsed into single graph nodes to
# keep desk-scale training fast; each hand-written backward is covered by
# the same finite-difference checks as the primitives.


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    e /= e.sum(axis=1, keepdims=True)
    return e


def attention_readout(q: Tensor, kv: Tensor, inv_temperature: float = 1.0) -> Tensor:
    """softmax(q kv^T * inv_temperature) kv in one node."""
    if q.data.ndim != 2 or kv.data.ndim != 2 or q.shape[1] != kv.shape[1]:
        raise ShapeError(f"attention_readout needs matching feature dims, "
                         f"got {q.shape} and {kv.shape}")
    if not (np.all(np.isfinite(q.data)) and np.all(np.isfinite(kv.data))):
        raise NumericError("attention_readout received non-finite input")
    att = _softmax(q.data @ kv.data.T * inv_temperature)
    y = att @ kv.data

    def bw(out: Tensor):
        def run():
            d_att = out.grad @ kv.data.T
            d_scores = att * (d_att - (d_att * att).sum(axis=1, keepdims=True))
            if q.requires_grad:
                q._accumulate(inv_temperature * (d_scores @ kv.data))
            if kv.requires_grad:
                kv._accumulate(att.T @ out.grad
                               + inv_temperature * (d_scores.T @ q.data))
        return run

    return _make(y, (q, kv), bw)


def self_attention(x: Tensor, head_weights: Sequence[tuple[Tensor, Tensor, Tensor, Tensor]],
                   mask: np.ndarray | None = None) -> Tensor:
    """Multi-head dot-product self-attention, one node.

    ``head_weights`` is a list of (wq, wk, wv, wo) per head; scores use the
    standard 1/sqrt(head_dim) scaling; ``mask`` (e.g. causal) is added to
    the scores before the softmax. Heads are evaluated as one batched
    einsum-free pipeline over stacked weights.
    """
    n, d = x.shape
    nh = len(head_weights)
    dh = head_weights[0][0].shape[1]
    inv = 1.0 / math.sqrt(dh)
    wq = np.stack([hw[0].data for hw in head_weights])   # [H, d, dh]
    wk = np.stack([hw[1].data for hw in head_weights])
    wv = np.stack([hw[2].data for hw in head_weights])
    wo = np.stack([hw[3].data for hw in head_weights])   # [H, dh, d]
    q = x.data @ wq                                      # [H, n, dh]
    k = x.data @ wk
    v = x.data @ wv
    scores = q @ k.transpose(0, 2, 1) * inv              # [H, n, n]
    if mask is not None:
        scores += mask
    scores -= scores.max(axis=2, keepdims=True)
    att = np.exp(scores)
    att /= att.sum(axis=2, keepdims=True)
    ctx = att @ v                                        # [H, n, dh]
    y = np.tensordot(ctx, wo, axes=([0, 2], [0, 1]))     # [n, d]
    parents = [x]
    for hw in head_weights:
        parents.extend(hw)

    def bw(out: Tensor):
        def run():
            d_ctx = out.grad @ wo.transpose(0, 2, 1)     # [H, n, dh]
            d_att = d_ctx @ v.transpose(0, 2, 1)
            dv = att.transpose(0, 2, 1) @ d_ctx
            d_scores = att * (d_att - (d_att * att).sum(axis=2, keepdims=True))
            dq = inv * (d_scores @ k)
            dk = inv * (d_scores.transpose(0, 2, 1) @ q)
            xt = x.data.T
            for h, (pwq, pwk, pwv, pwo) in enumerate(head_weights):
                if pwo.requires_grad:
                    pwo._accumulate(ctx[h].T @ out.grad)
                if pwq.requires_grad:
                    pwq._accumulate(xt @ dq[h])
                if pwk.requires_grad:
                    pwk._accumulate(xt @ dk[h])
                if pwv.requires_grad:
                    pwv._accumulate(xt @ dv[h])
            if x.requires_grad:
                dx = np.tensordot(dq, wq, axes=([0, 2], [0, 2]))
                dx += np.tensordot(dk, wk, axes=([0, 2], [0, 2]))
                dx += np.tensordot(dv, wv, axes=([0, 2], [0, 2]))
                x._accumulate(dx)
        return run

    return _make(y, parents, bw)


def ffn_block(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """relu(x w1 + b1) w2 + b2 in one node."""
    h = x.data @ w1.data + b1.data
    r = np.maximum(h, 0.0)
    y = r @ w2.data + b2.data

    def bw(out: Tensor):
        def run():
            if w2.requires_grad:
                w2._accumulate(r.T @ out.grad)
            if b2.requires_grad:
                b2._accumulate(out.grad.sum(axis=0))
            dr = out.grad @ w2.data.T
            dh = dr * (h > 0.0)
            if w1.requires_grad:
                w1._accumulate(x.data.T @ dh)
            if b1.requires_grad:
                b1._accumulate(dh.sum(axis=0))
            if x.requires_grad:
                x._accumulate(dh @ w1.data.T)
        return run

    return _make(y, (x, w1, b1, w2, b2), bw)


# ---------------------------------------------------------------------------
# verification


def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f`` at ``x`` to central differences.

    Returns max over coordinates of |analytic - fd| / max(1, |fd|).
    ``f`` must be deterministic; NaNs propagate and fail the check.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)

    flat = x.data.copy().reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig - h
        lo = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig
        fd[i] = (hi - lo) / (2.0 * h)

    err = np.abs(analytic.reshape(-1) - fd) / np.maximum(1.0, np.abs(fd))
    return float(err.max()) if err.size else 0.0


def logaddexp(a: float, b: float) -> float:
    """Scalar log(exp(a) + exp(b)) tolerant of the NEG_INF sentinel."""
    if a <= NEG_INF:
        return b
    if b <= NEG_INF:
        return a
    return float(np.logaddexp(a, b))


def logsumexp(values: Iterable[float]) -> float:
    arr = np.asarray([v for v in values if v > NEG_INF])
    if arr.size == 0:
        return NEG_INF
    m = arr.max()
    return float(m + np.log(np.exp(arr - m).sum()))
