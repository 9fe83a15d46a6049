"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations needed by the fixed two-conv classifier are provided:
3x3 same-padding convolution, ReLU, 2x2 max-pooling, global average
pooling, a dense layer, plus the scalar reductions used for training and
attribution (softmax cross-entropy, label-indexed logit sum, plain sum).

Spatial ops use NHWC layout internally for cache-friendly im2col; the
classifier converts from the channels-first layout of its public API at
the boundary. Everything runs in float64.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """Dense n-d array with optional gradient accumulation on a tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Ops hand over freshly allocated gradient arrays, so the first
    # contribution can be adopted without a zero-fill.
    if t.grad is None:
        t.grad = g if g.flags.writeable and g.base is None else g.copy()
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the recorded tape.

    Every tensor on the tape that participates in the result ends up with
    its gradient in ``.grad`` (accumulated, so call ``zero_grad`` between
    uses).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution, zero padding 1, stride 1 (resolution preserving).

    x: (n, h, w, c_in) NHWC; w: (c_out, c_in, 3, 3); b: (c_out,).
    Lowered to im2col + one matmul; the column matrix is reused backward.
    """
    n, h, wd, c_in = x.data.shape
    c_out = w.data.shape[0]
    if w.data.shape[1] != c_in:
        raise ValueError(f"conv weight expects {w.data.shape[1]} input channels, got {c_in}")
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # Window view has per-row layout (c_in, 3, 3), matching w.reshape(c_out, -1).
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    col = np.ascontiguousarray(win).reshape(n * h * wd, c_in * 9)
    wmat = w.data.reshape(c_out, c_in * 9)
    out = (col @ wmat.T + b.data).reshape(n, h, wd, c_out)

    def backward_fn(g: np.ndarray) -> None:
        gm = g.reshape(n * h * wd, c_out)
        if b.requires_grad:
            _accumulate(b, gm.sum(axis=0))
        if w.requires_grad:
            _accumulate(w, (gm.T @ col).reshape(w.data.shape))
        if x.requires_grad:
            dcol = (gm @ wmat).reshape(n, h, wd, c_in, 3, 3)
            dxp = np.zeros_like(xp)
            for di in range(3):
                for dj in range(3):
                    dxp[:, di:di + h, dj:dj + wd, :] += dcol[:, :, :, :, di, dj]
            _accumulate(x, np.ascontiguousarray(dxp[:, 1:-1, 1:-1, :]))

    return _result(out, (x, w, b), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g * mask)

    return _result(x.data * mask, (x,), backward_fn)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2, NHWC. Ties go to the first element in window scan order."""
    n, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = np.ascontiguousarray(
        x.data.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    ).reshape(n, h2, w2, c, 4)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            gw = np.zeros((n, h2, w2, c, 4))
            np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
            dx = np.ascontiguousarray(
                gw.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
            ).reshape(n, h, w, c)
            _accumulate(x, dx)

    return _result(out, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of NHWC activations -> (n, c)."""
    n, h, w, c = x.data.shape
    out = x.data.mean(axis=(1, 2))

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            dx = np.empty_like(x.data)
            dx[:] = g[:, None, None, :] / (h * w)
            _accumulate(x, dx)

    return _result(out, (x,), backward_fn)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine layer: x (n, d) @ w (d, c) + b (c,)."""
    out = x.data @ w.data + b.data

    def backward_fn(g: np.ndarray) -> None:
        if w.requires_grad:
            _accumulate(w, x.data.T @ g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0))
        if x.requires_grad:
            _accumulate(x, g @ w.data.T)

    return _result(out, (x, w, b), backward_fn)


def tsum(x: Tensor) -> Tensor:
    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _result(np.asarray(x.data.sum()), (x,), backward_fn)


def select_sum(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Sum of logits[i, labels[i]] over the batch.

    Backpropagating this gives each sample the gradient of its own selected
    logit; rows do not interact.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    out = np.asarray(logits.data[np.arange(n), labels].sum())

    def backward_fn(g: np.ndarray) -> None:
        if logits.requires_grad:
            dl = np.zeros_like(logits.data)
            dl[np.arange(n), labels] = float(g)
            _accumulate(logits, dl)

    return _result(out, (logits,), backward_fn)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (n, c) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    out = np.asarray((lse - z[np.arange(n), labels]).mean())

    def backward_fn(g: np.ndarray) -> None:
        if logits.requires_grad:
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), labels] -= 1.0
            _accumulate(logits, float(g) * p / n)

    return _result(out, (logits,), backward_fn)
