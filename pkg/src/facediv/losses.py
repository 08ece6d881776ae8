"""Diversity, feature-consistency and identity losses.

All losses operate on :class:`~facediv.tensor.Tensor` objects and record a
single fused op with an analytic backward.  Batched inputs are averaged over
the batch axis; a single sample gives the plain per-sample value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .tensor import (Tensor, _graph_of, gaussian_blur, linear, multiply,
                     softmax_xent, weighted_sum)

__all__ = [
    "LOSS_TERMS",
    "FeatureMask",
    "lmf_keep_count",
    "lmf",
    "sad_filter_loss",
    "sad_response_loss",
    "response_cosine_loss",
    "fad_mask",
    "fad_loss",
    "occluded_id_loss",
    "total_loss",
]

LOSS_TERMS = ("id", "sad_f", "sad_r", "fad", "occ")

_ZERO_NORM = 1e-12


# ----------------------------------------------------------------------------
# large magnitude filtering


def lmf_keep_count(d_percent: float, size: int) -> int:
    """Number of elements kept out of ``size`` at filtering rate ``d_percent``."""
    if not 0.0 <= d_percent < 100.0:
        raise ValueError(f"d_percent must lie in [0, 100), got {d_percent!r}")
    return max(1, int(math.floor((1.0 - d_percent / 100.0) * size + 0.5)))


def _lmf_mask(values: np.ndarray, keep: int) -> np.ndarray:
    lead = values.shape[:-2]
    hw = values.shape[-2] * values.shape[-1]
    flat = np.abs(values.reshape(-1, hw))
    # stable sort on -|x| keeps the earlier row-major element on ties
    order = np.argsort(-flat, axis=1, kind="stable")[:, :keep]
    mask = np.zeros(flat.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask.reshape(*lead, *values.shape[-2:])


def lmf(response: Tensor, d_percent: float) -> Tensor:
    """Zero the ``d_percent`` smallest-magnitude elements of every channel.

    The kept set is chosen from the values at record time and frozen for
    backward and replay; dropped elements receive zero gradient.
    """
    h, w = response.shape[-2:]
    keep = lmf_keep_count(d_percent, h * w)
    mask = _lmf_mask(response.values, keep)

    def forward(xv):
        return xv * mask

    def backward(g, needs):
        return (g * mask,)

    return _graph_of(response).record((response,), forward, backward, "lmf")


# ----------------------------------------------------------------------------
# spatial activation diversity


def sad_filter_loss(bank: Tensor) -> Tensor:
    """Sum over ordered filter pairs of |sum_p cos(F_i^p, F_j^p)|.

    ``bank`` has shape ``[K, C, kh, kw]``; the column at position ``p`` is the
    ``C``-vector ``bank[i, :, p]``.  Where the inner sum is exactly zero the
    subgradient 0 is used.
    """
    if bank.values.ndim != 4:
        raise ValueError(f"filter bank must be [K, C, kh, kw], got {bank.shape}")
    k, c, kh, kw = bank.shape
    norms0 = np.linalg.norm(bank.values.reshape(k, c, kh * kw), axis=1)
    if np.any(norms0 <= 0):
        i, p = map(int, np.argwhere(norms0 <= 0)[0])
        raise ValueError(f"filter {i} has a zero column at position {p}")
    cache: dict = {}

    def forward(fv):
        cols = fv.reshape(k, c, kh * kw)
        norms = np.linalg.norm(cols, axis=1)
        u = cols / norms[:, None, :]
        s = np.einsum("icp,jcp->ij", u, u)
        np.fill_diagonal(s, 0.0)
        cache.update(u=u, norms=norms, s=s)
        return np.asarray(np.abs(s).sum())

    def backward(g, needs):
        u, norms, s = cache["u"], cache["norms"], cache["s"]
        sign = np.sign(s)
        # d/du_i^p of sum_{i!=j}|S_ij| with S symmetric
        gu = 2.0 * np.einsum("ij,jcp->icp", sign, u)
        radial = np.einsum("icp,icp->ip", gu, u)
        gf = (gu - u * radial[:, None, :]) / norms[:, None, :]
        return (float(g) * gf.reshape(k, c, kh, kw),)

    return _graph_of(bank).record((bank,), forward, backward, "sad_filter")


def response_cosine_loss(maps: Tensor) -> Tensor:
    """Sum over ordered channel pairs of the squared cosine between maps.

    ``maps`` is ``[K, H, W]`` or ``[N, K, H, W]`` (batch-averaged).  Channels
    with zero norm contribute 0 to every pair they belong to.
    """
    single = maps.values.ndim == 3
    if maps.values.ndim not in (3, 4):
        raise ValueError(f"expected [K,H,W] or [N,K,H,W], got {maps.shape}")
    cache: dict = {}

    def forward(mv):
        m = mv[None] if single else mv
        n, k = m.shape[:2]
        flat = m.reshape(n, k, -1)
        norms = np.linalg.norm(flat, axis=2)
        live = norms > _ZERO_NORM
        safe = np.where(live, norms, 1.0)
        u = np.where(live[:, :, None], flat / safe[:, :, None], 0.0)
        cos = u @ u.transpose(0, 2, 1)
        idx = np.arange(k)
        cos[:, idx, idx] = 0.0
        cache.update(u=u, safe=safe, live=live, cos=cos, n=n)
        return np.asarray((cos ** 2).sum() / n)

    def backward(g, needs):
        u, safe, live, cos, n = cache["u"], cache["safe"], cache["live"], cache["cos"], cache["n"]
        gu = 4.0 * (cos @ u)
        radial = np.einsum("nkm,nkm->nk", gu, u)
        gm = (gu - u * radial[:, :, None]) / safe[:, :, None]
        gm = np.where(live[:, :, None], gm, 0.0) * (float(g) / n)
        shape = maps.shape if not single else (1,) + maps.shape
        gm = gm.reshape(shape)
        return (gm[0] if single else gm,)

    return _graph_of(maps).record((maps,), forward, backward, "response_cosine")


def sad_response_loss(response: Tensor, d_percent: float, sigma: float) -> Tensor:
    """Decorrelation of the blurred, magnitude-filtered response maps."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    return response_cosine_loss(gaussian_blur(lmf(response, d_percent), sigma))


# ----------------------------------------------------------------------------
# feature activation diversity


@dataclass(frozen=True)
class FeatureMask:
    """Binary selection of occlusion-insensitive feature elements."""

    bits: np.ndarray
    mode: str
    threshold: float
    mean_diff: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mode not in ("count", "value"):
            raise ValueError(f"unknown threshold mode {self.mode!r}")

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def weights(self) -> np.ndarray:
        return self.bits.astype(np.float64)

    @classmethod
    def full(cls, k: int) -> "FeatureMask":
        return cls(np.ones(k, dtype=bool), "count", k)

    @classmethod
    def empty(cls, k: int) -> "FeatureMask":
        return cls(np.zeros(k, dtype=bool), "count", 0)


def fad_mask(features, features_hat, mode: str = "count", t: float = 260) -> FeatureMask:
    """Select elements whose mean |f - f_hat| over the pairs is small.

    ``features`` and ``features_hat`` are ``[N, K]`` arrays (or tensors) of
    clean and occluded features.  In ``count`` mode exactly ``t`` elements are
    selected (the smallest mean differences, lower index first on ties); in
    ``value`` mode element ``i`` is selected iff its mean difference is < t.
    """
    f = np.atleast_2d(getattr(features, "values", features))
    fh = np.atleast_2d(getattr(features_hat, "values", features_hat))
    if f.shape != fh.shape:
        raise ValueError(f"feature shapes differ: {f.shape} vs {fh.shape}")
    if f.shape[0] < 1:
        raise ValueError("need at least one pair")
    k = f.shape[1]
    m = np.abs(f - fh).mean(axis=0)
    if mode == "count":
        t_int = int(t)
        if t_int != t or not 1 <= t_int <= k:
            raise ValueError(f"count threshold must be an int in [1, {k}], got {t!r}")
        bits = np.zeros(k, dtype=bool)
        bits[np.argsort(m, kind="stable")[:t_int]] = True
        return FeatureMask(bits, "count", t_int, m)
    if mode == "value":
        return FeatureMask(m < t, "value", float(t), m)
    raise ValueError(f"unknown threshold mode {mode!r}")


def fad_loss(f: Tensor, f_hat: Tensor, mask: FeatureMask) -> Tensor:
    """sum_i |tau_i (f_i - f_hat_i)|, averaged over the batch if batched."""
    if f.shape != f_hat.shape or f.shape[-1] != len(mask):
        raise ValueError(f"fad_loss shapes {f.shape}, {f_hat.shape}, mask {len(mask)}")
    tau = mask.weights
    rows = 1 if f.values.ndim == 1 else f.shape[0]

    def forward(a, b):
        return np.asarray(np.abs(tau * (a - b)).sum() / rows)

    def backward(g, needs):
        s = np.sign(f.values - f_hat.values) * tau * (float(g) / rows)
        return s, -s

    return _graph_of(f, f_hat).record((f, f_hat), forward, backward, "fad")


def occluded_id_loss(f_hat: Tensor, mask: FeatureMask, weight: Tensor, bias: Optional[Tensor],
                     label) -> Tensor:
    """Identity loss of the classifier applied to ``tau * f_hat``.

    ``weight``/``bias`` must be the very tensors used by the clean branch.
    """
    if f_hat.shape[-1] != len(mask):
        raise ValueError("mask length does not match feature length")
    return softmax_xent(linear(multiply(f_hat, mask.weights), weight, bias), label)


def total_loss(terms: Mapping[str, Tensor], weights: Mapping[str, float]) -> Tensor:
    """Weighted sum of the named loss terms (names from ``LOSS_TERMS``)."""
    names = [n for n in LOSS_TERMS if n in terms]
    unknown = set(terms) - set(LOSS_TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    ws = []
    for n in names:
        w = float(weights.get(n, 1.0))
        if w < 0 or not math.isfinite(w):
            raise ValueError(f"loss weight for {n!r} must be a finite non-negative real, got {w!r}")
        ws.append(w)
    return weighted_sum([terms[n] for n in names], ws)
