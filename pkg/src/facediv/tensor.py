"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations needed by the face network and its losses are provided.
Every op accepts either a single sample ``[C, H, W]`` or a batch
``[N, C, H, W]``; the batch axis is carried through untouched.

A :class:`Graph` records operations in execution order.  Besides the usual
backward sweep it can *replay* the forward pass from the current leaf values,
which is what :func:`check_gradients` uses to build finite differences.  Ops
that make data-dependent selections (ReLU, large magnitude filtering) freeze
their selection at record time, so a replay evaluates the same piecewise
branch that the analytic gradient describes.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Graph",
    "conv2d",
    "upsample",
    "concat_channels",
    "gaussian_blur",
    "gaussian_kernel1d",
    "global_avg_pool",
    "relu",
    "linear",
    "multiply",
    "softmax_xent",
    "weighted_sum",
    "check_gradients",
]


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("values", "grad", "graph", "name", "trainable", "requires_grad")

    def __init__(self, values, graph: Optional["Graph"] = None, name: Optional[str] = None,
                 trainable: bool = False, requires_grad: Optional[bool] = None):
        values = np.asarray(values)
        if values.dtype != np.float64:
            values = values.astype(np.float64)
        self.values = values
        self.grad: Optional[np.ndarray] = None
        self.graph = graph
        self.name = name
        self.trainable = trainable
        self.requires_grad = trainable if requires_grad is None else requires_grad

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


class _Op:
    __slots__ = ("inputs", "output", "forward", "backward", "kind")

    def __init__(self, inputs, output, forward, backward, kind):
        self.inputs = inputs
        self.output = output
        self.forward = forward
        self.backward = backward
        self.kind = kind


class Graph:
    """Ordered record of operations plus a registry of trainable tensors."""

    def __init__(self):
        self.ops: list[_Op] = []
        self.params: dict[str, Tensor] = {}

    def param(self, name: str, values: np.ndarray) -> Tensor:
        """Register ``values`` (not copied) as a trainable leaf.

        Asking twice for the same name returns the same tensor, which is how
        the two Siamese branches end up sharing one copy of every weight.
        """
        if name in self.params:
            existing = self.params[name]
            if existing.values is not values:
                raise ValueError(f"parameter {name!r} already bound to different storage")
            return existing
        if not isinstance(values, np.ndarray) or values.dtype != np.float64:
            raise TypeError(f"parameter {name!r} must be a float64 ndarray")
        t = Tensor(values, graph=self, name=name, trainable=True)
        self.params[name] = t
        return t

    def constant(self, values, name: Optional[str] = None) -> Tensor:
        return Tensor(values, graph=self, name=name, requires_grad=False)

    def record(self, inputs: Sequence[Tensor], forward: Callable, backward: Callable,
               kind: str) -> Tensor:
        out_values = forward(*(t.values for t in inputs))
        needs = any(t.requires_grad for t in inputs)
        out = Tensor(out_values, graph=self, requires_grad=needs)
        self.ops.append(_Op(tuple(inputs), out, forward, backward, kind))
        return out

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None
        for op in self.ops:
            op.output.grad = None
            for t in op.inputs:
                t.grad = None

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into ``.grad`` of every upstream tensor."""
        if loss.values.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.values)
        for op in reversed(self.ops):
            g = op.output.grad
            if g is None or not op.output.requires_grad:
                continue
            needs = tuple(t.requires_grad for t in op.inputs)
            grads = op.backward(g, needs)
            for t, gi, need in zip(op.inputs, grads, needs):
                if not need or gi is None:
                    continue
                if t.grad is None:
                    t.grad = np.array(gi, dtype=np.float64, copy=True)
                else:
                    t.grad += gi

    def replay(self) -> None:
        """Recompute every recorded output from the current leaf values."""
        for op in self.ops:
            op.output.values = op.forward(*(t.values for t in op.inputs))


def _graph_of(*tensors: Tensor) -> Graph:
    for t in tensors:
        if t.graph is not None:
            return t.graph
    raise ValueError("operands are not attached to a graph")


def _as_batch(x: np.ndarray, ndim: int):
    """Promote a single sample to a batch of one; returns (array, squeeze_flag)."""
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ValueError(f"expected {ndim - 1}-d or {ndim}-d input, got shape {x.shape}")
    return x, False


# ----------------------------------------------------------------------------
# convolution


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("same padding needs odd kernel sizes")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    return ph, pw, ho, wo


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2-D cross-correlation of ``x`` with ``kernel`` ``[C_out, C_in, kh, kw]``."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if kernel.values.ndim != 4:
        raise ValueError(f"kernel must be 4-d, got shape {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    xb, squeeze = _as_batch(x.values, 4)
    if xb.shape[1] != c_in:
        raise ValueError(
            f"input has {xb.shape[1]} channels but kernel expects {c_in} (kernel shape {kernel.shape})")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} does not match {c_out} output channels")
    h, w = xb.shape[2:]
    ph, pw, ho, wo = _conv_geometry(h, w, kh, kw, stride, padding)
    cache: dict = {}

    def forward(xv, kv, bv=None):
        xv, _ = _as_batch(xv, 4)
        n = xv.shape[0]
        xp = np.pad(xv, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xv
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win[:, :, :ho, :wo].transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * kh * kw)
        cache["cols"] = cols
        cache["n"] = n
        out = cols @ kv.reshape(c_out, -1).T
        if bv is not None:
            out += bv
        out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out[0] if squeeze else out)

    def backward(g, needs):
        gb = g[None] if squeeze else g
        n = cache["n"]
        g2 = gb.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        kv = kernel.values
        dx = dk = db = None
        if needs[1]:
            dk = (g2.T @ cache["cols"]).reshape(kv.shape)
        if len(needs) > 2 and needs[2]:
            db = g2.sum(axis=0)
        if needs[0]:
            dcols = (g2 @ kv.reshape(c_out, -1)).reshape(n, ho, wo, c_in, kh, kw)
            dxp = np.zeros((n, c_in, h + 2 * ph, w + 2 * pw))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, ph:ph + h, pw:pw + w]
            if squeeze:
                dx = dx[0]
        return (dx, dk, db) if bias is not None else (dx, dk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _graph_of(*inputs).record(inputs, forward, backward, "conv2d")


# ----------------------------------------------------------------------------
# resampling and channel plumbing


def _bilinear_matrix(n: int, factor: int) -> np.ndarray:
    """Row-stochastic ``[n*factor, n]`` interpolation matrix, half-pixel centers."""
    m = np.zeros((n * factor, n))
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    rows = np.arange(n * factor)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample(x: Tensor, factor: int, mode: str = "nearest") -> Tensor:
    """Integer-factor spatial upsampling of ``[..., H, W]``."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"upsample factor must be a positive int, got {factor!r}")
    if x.values.ndim < 3:
        raise ValueError("upsample expects [C,H,W] or [N,C,H,W]")
    h, w = x.shape[-2:]
    if mode == "nearest":
        def forward(xv):
            return xv.repeat(factor, axis=-2).repeat(factor, axis=-1)

        def backward(g, needs):
            lead = g.shape[:-2]
            return (g.reshape(*lead, h, factor, w, factor).sum(axis=(-3, -1)),)
    elif mode == "bilinear":
        ah, aw = _bilinear_matrix(h, factor), _bilinear_matrix(w, factor)

        def forward(xv):
            return ah @ xv @ aw.T

        def backward(g, needs):
            return (ah.T @ g @ aw,)
    else:
        raise ValueError(f"unknown upsample mode {mode!r}")
    return _graph_of(x).record((x,), forward, backward, "upsample")


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis, preserving the given order."""
    inputs = tuple(inputs)
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    spatial = inputs[0].shape[-2:]
    lead = inputs[0].values.ndim
    for t in inputs:
        if t.values.ndim != lead or t.shape[-2:] != spatial or t.shape[:-3] != inputs[0].shape[:-3]:
            raise ValueError(f"cannot concatenate shapes {[t.shape for t in inputs]}")
    splits = np.cumsum([t.shape[-3] for t in inputs])[:-1]

    def forward(*xs):
        return np.concatenate(xs, axis=-3)

    def backward(g, needs):
        return tuple(np.split(g, splits, axis=-3))

    return _graph_of(*inputs).record(inputs, forward, backward, "concat")


# ----------------------------------------------------------------------------
# smoothing and pooling


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian truncated at radius ceil(3*sigma)."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (offsets / sigma) ** 2)
    return k / k.sum()


def _reflect_index(i: np.ndarray, n: int) -> np.ndarray:
    # half-sample symmetric reflection (d c b a | a b c d), any overhang
    period = 2 * n
    i = np.mod(i, period)
    return np.where(i >= n, period - 1 - i, i)


def _blur_matrix(n: int, kernel: np.ndarray) -> np.ndarray:
    radius = len(kernel) // 2
    m = np.zeros((n, n))
    rows = np.arange(n)
    for t, wgt in enumerate(kernel):
        cols = _reflect_index(rows + t - radius, n)
        np.add.at(m, (rows, cols), wgt)
    return m


def gaussian_blur(x: Tensor, sigma: float) -> Tensor:
    """Channel-wise separable Gaussian smoothing with reflect padding."""
    kernel = gaussian_kernel1d(sigma)
    h, w = x.shape[-2:]
    bh, bw = _blur_matrix(h, kernel), _blur_matrix(w, kernel)

    def forward(xv):
        return bh @ xv @ bw.T

    def backward(g, needs):
        return (bh.T @ g @ bw,)

    return _graph_of(x).record((x,), forward, backward, "gaussian_blur")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes."""
    h, w = x.shape[-2:]
    if h < 1 or w < 1:
        raise ValueError("empty spatial extent")

    def forward(xv):
        return xv.mean(axis=(-2, -1))

    def backward(g, needs):
        return (np.broadcast_to(g[..., None, None] / (h * w), g.shape + (h, w)).copy(),)

    return _graph_of(x).record((x,), forward, backward, "avg_pool")


# ----------------------------------------------------------------------------
# pointwise and dense


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0

    def forward(xv):
        return xv * mask

    def backward(g, needs):
        return (g * mask,)

    return _graph_of(x).record((x,), forward, backward, "relu")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``[K]`` or ``[N, K]``."""
    if weight.values.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")

    def forward(xv, wv, bv=None):
        out = xv @ wv.T
        return out + bv if bv is not None else out

    def backward(g, needs):
        xv, wv = x.values, weight.values
        dx = g @ wv if needs[0] else None
        dw = (np.outer(g, xv) if g.ndim == 1 else g.T @ xv) if needs[1] else None
        if bias is None:
            return dx, dw
        db = (g if g.ndim == 1 else g.sum(axis=0)) if needs[2] else None
        return dx, dw, db

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _graph_of(*inputs).record(inputs, forward, backward, "linear")


def multiply(x: Tensor, mask) -> Tensor:
    """Elementwise product with a constant array (broadcast over the batch)."""
    mask = np.asarray(mask, dtype=np.float64)

    def forward(xv):
        return xv * mask

    def backward(g, needs):
        return (g * mask,)

    return _graph_of(x).record((x,), forward, backward, "multiply")


def softmax_xent(logits: Tensor, label) -> Tensor:
    """Mean negative log-likelihood of ``label`` under ``softmax(logits)``.

    ``logits`` is ``[M]`` with an int label or ``[N, M]`` with ``N`` labels.
    """
    lv = logits.values
    m = lv.shape[-1]
    labels = np.atleast_1d(np.asarray(label))
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, got {labels.dtype}")
    if labels.min() < 0 or labels.max() >= m:
        raise ValueError(f"label out of range for {m} classes: {label!r}")
    single = lv.ndim == 1
    if (1 if single else lv.shape[0]) != labels.size:
        raise ValueError("one label per row of logits required")
    cache: dict = {}

    def forward(zv):
        z = zv[None] if single else zv
        shifted = z - z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=1))
        logp = shifted - logsum[:, None]
        cache["p"] = np.exp(logp)
        return np.asarray(-logp[np.arange(labels.size), labels].mean())

    def backward(g, needs):
        p = cache["p"].copy()
        p[np.arange(labels.size), labels] -= 1.0
        p *= g / labels.size
        return (p[0] if single else p,)

    return _graph_of(logits).record((logits,), forward, backward, "softmax_xent")


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Scalar ``sum_k weights[k] * terms[k]``."""
    terms = tuple(terms)
    weights = tuple(float(w) for w in weights)
    if len(terms) != len(weights) or not terms:
        raise ValueError("need one weight per term")
    for t in terms:
        if t.values.size != 1:
            raise ValueError(f"weighted_sum terms must be scalars, got {t.shape}")

    def forward(*vs):
        return np.asarray(sum(w * float(v) for w, v in zip(weights, vs)))

    def backward(g, needs):
        return tuple(np.asarray(w * g) for w in weights)

    return _graph_of(*terms).record(terms, forward, backward, "weighted_sum")


# ----------------------------------------------------------------------------
# finite-difference verification


def check_gradients(graph: Graph, loss: Tensor, eps: float = 1e-5,
                    params: Optional[Sequence[str]] = None, max_entries: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None, floor: float = 1e-6,
                    rel_floor: float = 1e-3) -> float:
    """Worst relative error between recorded and central-difference gradients.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, s)`` where
    ``s = max(floor, rel_floor * max|a|)`` over that parameter, so entries
    orders of magnitude below the parameter's largest gradient are judged on
    the parameter's scale rather than on their own roundoff.
    ``max_entries`` caps the number of checked entries per parameter (sampled
    with ``rng``); by default every entry is checked.  Parameter values are
    restored bit-for-bit afterwards.
    """
    if loss.values.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps!r}")
    names = list(graph.params) if params is None else list(params)
    for name in names:
        if not np.all(np.isfinite(graph.params[name].values)):
            raise ValueError(f"parameter {name!r} is not finite")
    graph.replay()
    graph.zero_grad()
    graph.backward(loss)
    analytic = {n: (graph.params[n].grad if graph.params[n].grad is not None
                    else np.zeros_like(graph.params[n].values)).copy() for n in names}
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for name in names:
        values = graph.params[name].values
        flat = values.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        a_flat = analytic[name].reshape(-1)
        scale = max(floor, rel_floor * float(np.abs(a_flat).max(initial=0.0)))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            graph.replay()
            fp = float(loss.values)
            flat[i] = orig - eps
            graph.replay()
            fm = float(loss.values)
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), scale)
            worst = max(worst, err)
    graph.replay()
    return worst
