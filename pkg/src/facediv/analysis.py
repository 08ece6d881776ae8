"""Interpretability diagnostics over trained models.

Peak statistics are taken on the magnitude-filtered response maps and
aggregated in the canonical template frame; the feature-difference profile
measures how much each feature element moves under a shared occluder; part
retrieval ranks faces by cosine similarity of a subset of feature elements.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import (FaceTemplate, OccluderSpec, default_template, occluder_rect,
                       point_in_polygon, to_canonical_many)
from .io import write_ppm
from .losses import fad_mask
from .network import Model, forward
from .training import make_pair_batch

__all__ = [
    "PeakStats",
    "Spread",
    "DiffProfile",
    "responses",
    "features",
    "peak_stats",
    "spread_of",
    "spreadness",
    "feature_diff",
    "part_filters",
    "cosine_scores",
    "retrieve_by_part",
    "pair_rank1",
    "occluded_accuracy",
    "export_heatmaps",
    "write_peak_csv",
    "write_diff_csv",
]

_CHUNK = 64


def _batched(model: Model, images: np.ndarray, attr: str, d_percent: Optional[float]) -> np.ndarray:
    out = []
    for start in range(0, len(images), _CHUNK):
        r = forward(model, images[start:start + _CHUNK], d_percent=d_percent)
        out.append(getattr(r, attr).values)
    return np.concatenate(out)


def _stack(samples) -> np.ndarray:
    return np.stack([np.asarray(s.image, dtype=np.float64) for s in samples])


def responses(model: Model, samples, d_percent: Optional[float] = None) -> np.ndarray:
    """Magnitude-filtered response maps ``[N, K, hc, hc]``."""
    return _batched(model, _stack(samples), "psi_lmf", d_percent)


def features(model: Model, samples_or_images, d_percent: Optional[float] = None) -> np.ndarray:
    """Feature vectors ``[N, K]`` for samples or an ``[N, C, H, W]`` array."""
    x = samples_or_images if isinstance(samples_or_images, np.ndarray) else _stack(samples_or_images)
    return _batched(model, x, "feature", d_percent)


# ----------------------------------------------------------------------------
# peak locations


@dataclass
class PeakStats:
    """Per-filter peak statistics in the canonical frame (index 0 positive, 1 negative).

    ``mean`` is ``[2, K, 2]`` (weighted average location), ``std`` is ``[2, K]``
    (weighted root-mean-square distance to that average), ``magnitude`` is
    ``[2, K]`` (mean |peak value| over images), ``weight`` is ``[2, K]`` (sum of
    the weights actually used) and ``skipped`` is ``[2, K]`` (peaks outside the
    face mesh, left out).
    """

    mean: np.ndarray
    std: np.ndarray
    magnitude: np.ndarray
    weight: np.ndarray
    skipped: np.ndarray
    num_images: int

    @property
    def valid(self) -> np.ndarray:
        return self.weight > 0

    @property
    def K(self) -> int:
        return self.mean.shape[1]

    def mean_std(self) -> tuple:
        """Average per-filter std over valid filters, (positive, negative)."""
        return tuple(float(self.std[s][self.valid[s]].mean()) if self.valid[s].any() else float("nan")
                     for s in (0, 1))


def _peak_cells(maps: np.ndarray):
    n, k, h, w = maps.shape
    flat = maps.reshape(n, k, h * w)
    pos = flat.argmax(axis=2)
    neg = flat.argmin(axis=2)
    pv = np.take_along_axis(flat, pos[..., None], 2)[..., 0]
    nv = np.take_along_axis(flat, neg[..., None], 2)[..., 0]
    return (pos, neg), (pv, nv)


def cell_centers(index: np.ndarray, hc: int, image_size: int) -> np.ndarray:
    """Image-pixel ``(x, y)`` of flattened response-cell indices."""
    r, c = np.divmod(index, hc)
    scale = image_size / hc
    return np.stack([(c + 0.5) * scale, (r + 0.5) * scale], axis=-1)


def peak_stats(model: Model, samples: Sequence, template: Optional[FaceTemplate] = None,
               d_percent: Optional[float] = None, maps: Optional[np.ndarray] = None) -> PeakStats:
    """Weighted average and spread of every filter's peak locations.

    For each image and filter, the positive peak is the argmax and the negative
    peak the argmin of the response channel (first cell in row-major order on
    ties).  Cell centers are mapped to the canonical frame through each face's
    mesh; the weight of an image is the peak's absolute value.  ``maps`` may
    pass precomputed ``[N, K, hc, hc]`` responses.
    """
    template = default_template() if template is None else template
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one sample")
    maps = responses(model, samples, d_percent) if maps is None else np.asarray(maps)
    n, k, hc, _ = maps.shape
    size = samples[0].image.shape[-1]
    cells, vals = _peak_cells(maps)
    loc = np.full((2, n, k, 2), np.nan)
    inside = np.zeros((2, n, k), dtype=bool)
    for i, s in enumerate(samples):
        for sign in (0, 1):
            pts = cell_centers(cells[sign][i], hc, size)
            mapped, ok = to_canonical_many(pts, s.landmarks, template)
            loc[sign, i], inside[sign, i] = mapped, ok
    mean = np.full((2, k, 2), np.nan)
    std = np.full((2, k), np.nan)
    magnitude = np.zeros((2, k))
    weight = np.zeros((2, k))
    skipped = (~inside).sum(axis=1)
    for sign in (0, 1):
        w = np.abs(vals[sign]) * inside[sign]  # [n, k]
        magnitude[sign] = np.abs(vals[sign]).mean(axis=0)
        weight[sign] = w.sum(axis=0)
        x = np.where(inside[sign][..., None], loc[sign], 0.0)
        for j in range(k):
            tw = weight[sign, j]
            if tw <= 0:
                continue
            mu = (w[:, j, None] * x[:, j]).sum(axis=0) / tw
            d2 = ((x[:, j] - mu) ** 2).sum(axis=1)
            mean[sign, j] = mu
            std[sign, j] = np.sqrt((w[:, j] * d2).sum() / tw)
    return PeakStats(mean, std, magnitude, weight, skipped, n)


@dataclass(frozen=True)
class Spread:
    positive: float
    negative: float

    @property
    def mean(self) -> float:
        return 0.5 * (self.positive + self.negative)


def spread_of(locations) -> float:
    """Mean Euclidean distance of ``[K, 2]`` locations from their centroid."""
    c = np.asarray(locations, dtype=np.float64)
    if c.ndim != 2 or len(c) < 1:
        raise ValueError("need a non-empty [K, 2] array")
    return float(np.linalg.norm(c - c.mean(axis=0), axis=1).mean())


def spreadness(stats: PeakStats) -> Spread:
    """Spread of the valid positive and negative average locations."""
    vals = []
    for sign in (0, 1):
        ok = stats.valid[sign]
        vals.append(spread_of(stats.mean[sign][ok]) if ok.any() else float("nan"))
    return Spread(*vals)


def write_peak_csv(path, stats: PeakStats) -> None:
    """One row per filter with positive/negative location, std, magnitude and skip counts."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filter", "pos_x", "pos_y", "pos_std", "pos_mag", "pos_skipped",
                    "neg_x", "neg_y", "neg_std", "neg_mag", "neg_skipped"])
        for j in range(stats.K):
            row = [j]
            for s in (0, 1):
                row += [repr(float(stats.mean[s, j, 0])), repr(float(stats.mean[s, j, 1])),
                        repr(float(stats.std[s, j])), repr(float(stats.magnitude[s, j])),
                        int(stats.skipped[s, j])]
            w.writerow(row)


# ----------------------------------------------------------------------------
# occlusion sensitivity


@dataclass
class DiffProfile:
    values: np.ndarray  # [K] mean |f - f_hat| per element
    rect: tuple
    occluder: OccluderSpec

    @property
    def order(self) -> np.ndarray:
        """Element indices by decreasing mean difference (stable)."""
        return np.argsort(-self.values, kind="stable")

    @property
    def sorted(self) -> np.ndarray:
        return self.values[self.order]


def _occluded_pairs(model, samples, occluder, rng, template, d_percent):
    """Clean and occluded features with one shared template rectangle."""
    template = default_template() if template is None else template
    rect = occluder_rect(occluder, template, rng)
    fixed = OccluderSpec(occluder.fill, occluder.size_mode, occluder.rng_seed, rect)
    f, fh = [], []
    for start in range(0, len(samples), _CHUNK):
        batch = make_pair_batch(samples[start:start + _CHUNK], fixed, rng, template)
        f.append(features(model, batch.images, d_percent))
        fh.append(features(model, batch.occluded, d_percent))
    return np.concatenate(f), np.concatenate(fh), rect, fixed


def feature_diff(model: Model, samples: Sequence, occluder: OccluderSpec,
                 rng: Optional[np.random.Generator] = None,
                 template: Optional[FaceTemplate] = None,
                 d_percent: Optional[float] = None) -> DiffProfile:
    """Mean absolute feature change when every sample gets the same template occluder."""
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(occluder.rng_seed) if rng is None else rng
    f, fh, rect, fixed = _occluded_pairs(model, samples, occluder, rng, template, d_percent)
    return DiffProfile(np.abs(f - fh).mean(axis=0), rect, fixed)


def write_diff_csv(path, profile: DiffProfile) -> None:
    """Rows ``filter,mean_diff,rank`` (rank 0 = largest difference)."""
    rank = np.empty(len(profile.values), dtype=int)
    rank[profile.order] = np.arange(len(profile.values))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filter", "mean_diff", "rank"])
        for j, v in enumerate(profile.values):
            w.writerow([j, repr(float(v)), int(rank[j])])


def occluded_accuracy(model: Model, samples: Sequence, occluder: OccluderSpec,
                      rng: np.random.Generator, fad_mode: str = "count", t: float = 26,
                      template: Optional[FaceTemplate] = None, batch_size: int = 64) -> float:
    """Accuracy of the shared classifier on masked occluded features.

    Samples are processed in batches; each batch gets its own occluder
    placement and its own feature mask computed from the batch's pairs, as in
    training.
    """
    samples = list(samples)
    w, b = model.params["cls.w"], model.params["cls.b"]
    correct = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = make_pair_batch(chunk, occluder, rng, template)
        f = features(model, batch.images)
        fh = features(model, batch.occluded)
        mask = fad_mask(f, fh, fad_mode, int(t) if fad_mode == "count" else t)
        logits = (fh * mask.weights) @ w.T + b
        correct += int((logits.argmax(axis=1) == batch.labels).sum())
    return correct / len(samples)


# ----------------------------------------------------------------------------
# part retrieval


def part_filters(stats: PeakStats, region, template: Optional[FaceTemplate] = None) -> np.ndarray:
    """Filters whose positive average peak location lies in ``region``.

    ``region`` is a polygon ``[M, 2]`` or the name of a template region.
    """
    if isinstance(region, str):
        template = default_template() if template is None else template
        if region not in template.regions:
            raise KeyError(f"unknown region {region!r}; have {sorted(template.regions)}")
        region = template.regions[region]
    ok = stats.valid[0]
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return idx
    return idx[point_in_polygon(stats.mean[0][idx], region)]


def _part_weights(k: int, part) -> np.ndarray:
    part = np.asarray(sorted(set(int(p) for p in part)), dtype=int)
    if part.size == 0:
        raise ValueError("part must select at least one filter")
    if part.min() < 0 or part.max() >= k:
        raise ValueError(f"part indices must lie in [0, {k})")
    m = np.zeros(k)
    m[part] = 1.0
    return m


def cosine_scores(gallery: np.ndarray, query: np.ndarray, part) -> np.ndarray:
    """Cosine similarity of the part-masked query with each part-masked gallery row.

    A gallery row whose masked part is all zero scores 0.
    """
    g = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    m = _part_weights(g.shape[1], part)
    q = np.asarray(query, dtype=np.float64) * m
    qn = np.linalg.norm(q)
    if qn == 0:
        raise ValueError("masked query feature is all zero; cosine similarity is undefined")
    gm = g * m
    gn = np.linalg.norm(gm, axis=1)
    safe = np.where(gn > 0, gn, 1.0)
    return np.where(gn > 0, gm @ q / (safe * qn), 0.0)


def retrieve_by_part(gallery: np.ndarray, query: np.ndarray, part) -> np.ndarray:
    """Gallery indices by decreasing cosine similarity (lower index first on ties)."""
    return np.argsort(-cosine_scores(gallery, query, part), kind="stable")


def pair_rank1(feats_a: np.ndarray, feats_b: np.ndarray, part) -> float:
    """Rank-1 accuracy of the one-pair-per-identity protocol.

    Row ``i`` of ``feats_a`` and ``feats_b`` are two images of identity ``i``.
    Every image of one set queries the whole other set; the two directions
    are averaged.  Chance level is ``1 / len(feats_a)``.
    """
    a, b = np.asarray(feats_a), np.asarray(feats_b)
    if a.shape != b.shape:
        raise ValueError("pair sets must have equal shapes")
    hits = 0
    for q_set, g_set in ((a, b), (b, a)):
        for i, q in enumerate(q_set):
            hits += int(retrieve_by_part(g_set, q, part)[0] == i)
    return hits / (2 * len(a))


# ----------------------------------------------------------------------------
# heat maps


def heatmap_overlay(image: np.ndarray, response: np.ndarray) -> np.ndarray:
    """RGB overlay ``[3, H, W]`` of one response map on a grayscale image.

    The map is nearest-upsampled to the image size and scaled by its largest
    magnitude; positive responses blend toward red, negative toward blue.
    A zero map returns the gray image in all three channels.
    """
    gray = np.asarray(image, dtype=np.float64).reshape(image.shape[-2:])
    factor = gray.shape[0] // response.shape[0]
    up = np.kron(response, np.ones((factor, factor)))
    peak = np.abs(up).max()
    rgb = np.repeat(gray[None], 3, axis=0)
    if peak == 0:
        return rgb
    pos = np.clip(up, 0, None) / peak
    neg = np.clip(-up, 0, None) / peak
    alpha = pos + neg
    rgb = rgb * (1.0 - alpha)[None]
    rgb[0] += pos
    rgb[2] += neg
    return rgb


def export_heatmaps(model: Model, samples: Sequence, filters: Sequence[int], out_dir,
                    d_percent: Optional[float] = None) -> list:
    """Write one PPM per (sample, filter) named ``sNNNN_fKKK.ppm``; returns the paths."""
    samples = list(samples)
    filters = [int(f) for f in filters]
    k = model.config.K
    if any(not 0 <= f < k for f in filters):
        raise ValueError(f"filter indices must lie in [0, {k})")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maps = responses(model, samples, d_percent)
    paths = []
    for i, s in enumerate(samples):
        for f in filters:
            p = out / f"s{i:04d}_f{f:03d}.ppm"
            write_ppm(p, heatmap_overlay(s.image, maps[i, f]))
            paths.append(p)
    return paths
