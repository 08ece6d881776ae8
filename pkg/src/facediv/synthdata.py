"""Procedural grayscale faces with exact 68-point landmarks.

Identity lives in part geometry (eye spacing and size, brow height, nose
length and width, mouth width and height, jaw shape) and in per-part stroke
intensities, so covering one part removes only part of the identity signal.
Pose is an in-plane similarity with anisotropic scale about the image center.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import (CANONICAL_SIZE, canonical_layout, default_template, load_landmarks,
                       point_in_polygon, save_landmarks)
from .io import read_pgm, write_pgm

__all__ = [
    "IDENTITY_BOUNDS",
    "IdentityParams",
    "Pose",
    "PoseRange",
    "FaceSample",
    "identity_params",
    "identity_landmarks",
    "pose_landmarks",
    "render_face",
    "render_layers",
    "sample_pose",
    "generate_samples",
    "gen_dataset",
    "load_dataset",
    "MANIFEST_COLUMNS",
]

# (low, high) for every identity parameter; geometry in template pixels
IDENTITY_BOUNDS = {
    "eye_spacing": (-3.0, 3.0),
    "eye_size": (0.75, 1.3),
    "brow_raise": (-2.0, 2.0),
    "nose_length": (-3.0, 1.5),
    "nose_width": (0.8, 1.3),
    "mouth_width": (0.8, 1.25),
    "mouth_shift": (-1.0, 2.0),
    "jaw_width": (0.92, 1.08),
    "chin_drop": (-2.0, 2.0),
    "skin_level": (0.45, 0.75),
    "eye_level": (0.0, 0.3),
    "brow_level": (0.0, 0.3),
    "nose_level": (0.1, 0.35),
    "mouth_level": (0.05, 0.35),
}

BACKGROUND_LEVEL = 0.15
NOISE_STD = 0.02
MANIFEST_COLUMNS = ("identity", "split", "image_path", "landmark_path")

_JAW = list(range(0, 17))
_BROWS = (list(range(17, 22)), list(range(22, 27)))
_EYES = (list(range(36, 42)), list(range(42, 48)))
_NOSE = (list(range(27, 31)), list(range(31, 36)))
_MOUTH = (list(range(48, 60)), list(range(60, 68)))


@dataclass(frozen=True)
class IdentityParams:
    eye_spacing: float = 0.0
    eye_size: float = 1.0
    brow_raise: float = 0.0
    nose_length: float = 0.0
    nose_width: float = 1.0
    mouth_width: float = 1.0
    mouth_shift: float = 0.0
    jaw_width: float = 1.0
    chin_drop: float = 0.0
    skin_level: float = 0.6
    eye_level: float = 0.15
    brow_level: float = 0.15
    nose_level: float = 0.2
    mouth_level: float = 0.2

    def __post_init__(self):
        for f in fields(self):
            lo, hi = IDENTITY_BOUNDS[f.name]
            v = getattr(self, f.name)
            if not lo <= v <= hi:
                raise ValueError(f"{f.name}={v} outside [{lo}, {hi}]")


def identity_params(dataset_seed: int, identity_index: int) -> IdentityParams:
    """Deterministic identity drawn uniformly inside ``IDENTITY_BOUNDS``."""
    rng = np.random.default_rng(np.random.SeedSequence([dataset_seed, identity_index, 0x1D]))
    return IdentityParams(**{name: float(rng.uniform(lo, hi))
                             for name, (lo, hi) in IDENTITY_BOUNDS.items()})


@dataclass(frozen=True)
class Pose:
    """Rotation (degrees), per-axis scale and translation (template pixels)."""

    rotation: float = 0.0
    scale_x: float = 1.0
    scale_y: float = 1.0
    tx: float = 0.0
    ty: float = 0.0


@dataclass(frozen=True)
class PoseRange:
    rotation: float = 30.0
    scale: tuple = (0.8, 1.2)
    translation: float = 4.0

    def check(self, pose: Pose) -> None:
        tol = 1e-12
        lo, hi = self.scale
        if abs(pose.rotation) > self.rotation + tol:
            raise ValueError(f"rotation {pose.rotation} outside +-{self.rotation}")
        for s in (pose.scale_x, pose.scale_y):
            if not lo - tol <= s <= hi + tol:
                raise ValueError(f"scale {s} outside [{lo}, {hi}]")
        if max(abs(pose.tx), abs(pose.ty)) > self.translation + tol:
            raise ValueError(f"translation ({pose.tx}, {pose.ty}) outside +-{self.translation}")


def sample_pose(rng: np.random.Generator, pose_range: PoseRange = PoseRange()) -> Pose:
    lo, hi = pose_range.scale
    return Pose(float(rng.uniform(-pose_range.rotation, pose_range.rotation)),
                float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)),
                float(rng.uniform(-pose_range.translation, pose_range.translation)),
                float(rng.uniform(-pose_range.translation, pose_range.translation)))


def _scale_about(pts: np.ndarray, center, sx: float, sy: Optional[float] = None) -> np.ndarray:
    sy = sx if sy is None else sy
    return (pts - center) * np.array([sx, sy]) + center


def identity_landmarks(params: IdentityParams) -> np.ndarray:
    """Frontal landmarks of an identity, in template pixels."""
    lm = canonical_layout().copy()
    mid = CANONICAL_SIZE / 2.0
    jaw = lm[_JAW]
    jaw[:, 0] = mid + (jaw[:, 0] - mid) * params.jaw_width
    # chin drop fades to zero at the ears
    depth = np.clip((jaw[:, 1] - 46.0) / 30.0, 0.0, 1.0)
    jaw[:, 1] += params.chin_drop * depth
    lm[_JAW] = jaw
    for side, (eye, brow) in enumerate(zip(_EYES, _BROWS)):
        shift = params.eye_spacing * (-1.0 if side == 0 else 1.0)
        center = lm[eye].mean(axis=0)
        lm[eye] = _scale_about(lm[eye], center, params.eye_size) + [shift, 0.0]
        lm[brow] = lm[brow] + [shift * 0.7, -params.brow_raise]
    bridge, base = _NOSE
    top = lm[bridge[0]].copy()
    lm[bridge] = top + (lm[bridge] - top) * np.array([1.0, (15.0 + params.nose_length) / 15.0])
    base_center = lm[base].mean(axis=0)
    lm[base] = _scale_about(lm[base], base_center, params.nose_width) + [0.0, params.nose_length]
    outer, inner = _MOUTH
    mouth = outer + inner
    mc = lm[outer].mean(axis=0)
    lm[mouth] = _scale_about(lm[mouth], mc, params.mouth_width, 1.0) + [0.0, params.mouth_shift]
    return lm


def pose_landmarks(landmarks: np.ndarray, pose: Pose, size: int, zoom: float = 1.0) -> np.ndarray:
    """Apply ``pose`` about the canvas center and rescale to a ``size`` image.

    ``zoom`` magnifies about the canvas center, so the image shows the
    central ``96 / zoom`` template pixels.
    """
    t = np.deg2rad(pose.rotation)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    mid = CANONICAL_SIZE / 2.0
    posed = ((landmarks - mid) * np.array([pose.scale_x, pose.scale_y])) @ rot.T + mid
    posed = (posed + np.array([pose.tx, pose.ty]) - mid) * zoom + mid
    return posed * (size / CANONICAL_SIZE)


@dataclass
class FaceSample:
    image: np.ndarray  # [1, H, W] in [0, 1]
    landmarks: np.ndarray  # [68, 2] image pixels
    identity: int
    pose: Pose = Pose()
    split: str = "train"


def _segments(pts: np.ndarray, closed: bool) -> np.ndarray:
    ends = np.roll(pts, -1, axis=0) if closed else pts[1:]
    starts = pts if closed else pts[:-1]
    return np.stack([starts, ends], axis=1)


def _stroke_alpha(centers: np.ndarray, segs: np.ndarray, width: float) -> np.ndarray:
    a, b = segs[:, 0][None], segs[:, 1][None]
    p = centers[:, None, :]
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-12), 0.0, 1.0)
    d2 = ((a + t[..., None] * ab - p) ** 2).sum(-1).min(axis=1)
    return np.exp(-0.5 * d2 / width ** 2)


def _blob_alpha(centers: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    return np.exp(-0.5 * ((centers - center) ** 2).sum(-1) / radius ** 2)


def render_layers(landmarks: np.ndarray, size: int, supersample: int = 3,
                  zoom: float = 1.0) -> dict:
    """Per-part alpha maps ``[H, W]`` for a face with image-space landmarks."""
    unit = zoom * size / CANONICAL_SIZE
    lin = (np.arange(size) + 0.5)
    xx, yy = np.meshgrid(lin, lin)
    centers = np.stack([xx.ravel(), yy.ravel()], axis=1)
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    sub = np.stack(np.meshgrid(offs, offs), axis=-1).reshape(-1, 2)
    fine = (centers[:, None, :] + sub[None]).reshape(-1, 2)
    outline = np.vstack([landmarks[_JAW], landmarks[list(range(26, 16, -1))] - [0, 4 * unit]])
    face = point_in_polygon(fine, outline).reshape(len(centers), -1).mean(axis=1)
    layers = {"face": face}
    w = 1.1 * unit
    layers["brows"] = np.maximum(*(_stroke_alpha(centers, _segments(landmarks[b], False), w * 1.2)
                                   for b in _BROWS))
    eye_alpha = []
    for e in _EYES:
        stroke = _stroke_alpha(centers, _segments(landmarks[e], True), w)
        pupil = _blob_alpha(centers, landmarks[e].mean(axis=0), 1.4 * unit)
        eye_alpha.append(np.maximum(stroke, pupil))
    layers["eyes"] = np.maximum(*eye_alpha)
    bridge, base = _NOSE
    layers["nose"] = np.maximum(_stroke_alpha(centers, _segments(landmarks[bridge], False), w * 0.8),
                                _stroke_alpha(centers, _segments(landmarks[base], False), w * 1.2))
    outer, inner = _MOUTH
    layers["mouth"] = np.maximum(_stroke_alpha(centers, _segments(landmarks[outer], True), w),
                                 _stroke_alpha(centers, _segments(landmarks[inner], True), w * 0.8))
    layers["jaw"] = _stroke_alpha(centers, _segments(landmarks[_JAW], False), w * 0.8)
    return {k: v.reshape(size, size) for k, v in layers.items()}


def render_face(identity: IdentityParams, pose: Pose = Pose(),
                noise_rng: Optional[np.random.Generator] = None, size: int = 32,
                label: int = 0, pose_range: PoseRange = PoseRange(),
                noise_std: float = NOISE_STD, zoom: float = 1.0) -> FaceSample:
    """Draw one face; landmarks are exact by construction."""
    pose_range.check(pose)
    if not zoom > 0:
        raise ValueError(f"zoom must be positive, got {zoom!r}")
    lm = pose_landmarks(identity_landmarks(identity), pose, size, zoom)
    layers = render_layers(lm, size, zoom=zoom)
    img = BACKGROUND_LEVEL + (identity.skin_level - BACKGROUND_LEVEL) * layers["face"]
    for part, level in (("jaw", identity.skin_level * 0.7), ("brows", identity.brow_level),
                        ("eyes", identity.eye_level), ("nose", identity.nose_level),
                        ("mouth", identity.mouth_level)):
        alpha = layers[part]
        img = img * (1.0 - alpha) + level * alpha
    if noise_rng is not None and noise_std > 0:
        img = img + noise_rng.normal(0.0, noise_std, size=img.shape)
    return FaceSample(np.clip(img, 0.0, 1.0)[None], lm, label, pose)


def _sample_rng(seed: int, identity: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, identity, index]))


def generate_samples(num_ids: int, samples_per_id: int, seed: int, size: int = 32,
                     train_fraction: float = 0.8, pose_range: PoseRange = PoseRange(),
                     id_offset: int = 0, zoom: float = 1.0) -> list:
    """In-memory dataset; the first ``train_fraction`` of each identity's samples are train.

    ``id_offset`` shifts the identity indices used to derive parameters while
    labels stay ``0..num_ids-1``.
    """
    if num_ids < 2:
        raise ValueError("need at least two identities")
    if samples_per_id < 2:
        raise ValueError("need at least two samples per identity for a train/test split")
    n_train = min(max(int(round(train_fraction * samples_per_id)), 1), samples_per_id - 1)
    out = []
    for ident in range(num_ids):
        params = identity_params(seed, ident + id_offset)
        for j in range(samples_per_id):
            rng = _sample_rng(seed, ident + id_offset, j)
            pose = sample_pose(rng, pose_range)
            s = render_face(params, pose, rng, size, label=ident, pose_range=pose_range, zoom=zoom)
            s.split = "train" if j < n_train else "test"
            out.append(s)
    return out


def gen_dataset(out_dir, num_ids: int, samples_per_id: int, seed: int, size: int = 32,
                train_fraction: float = 0.8, zoom: float = 1.0) -> Path:
    """Write PGM images, landmark CSVs and ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "landmarks").mkdir(parents=True, exist_ok=True)
    samples = generate_samples(num_ids, samples_per_id, seed, size, train_fraction, zoom=zoom)
    rows = []
    per_id: dict = {}
    for s in samples:
        j = per_id.get(s.identity, 0)
        per_id[s.identity] = j + 1
        stem = f"id{s.identity:04d}_s{j:04d}"
        img_rel, lm_rel = f"images/{stem}.pgm", f"landmarks/{stem}.csv"
        write_pgm(out / img_rel, s.image)
        save_landmarks(out / lm_rel, s.landmarks)
        rows.append((s.identity, s.split, img_rel, lm_rel))
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    return manifest


def load_dataset(path, split: Optional[str] = None) -> list:
    """Read a dataset written by :func:`gen_dataset` (directory or manifest path)."""
    path = Path(path)
    manifest = path / "manifest.csv" if path.is_dir() else path
    root = manifest.parent
    out = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            if split is not None and row["split"] != split:
                continue
            out.append(FaceSample(read_pgm(root / row["image_path"]),
                                  load_landmarks(root / row["landmark_path"]),
                                  int(row["identity"]), split=row["split"]))
    if not out:
        raise ValueError(f"{manifest}: no samples" + (f" in split {split!r}" if split else ""))
    return out


def check_mesh(landmarks: np.ndarray, template=None) -> float:
    """Smallest signed triangle area of a face's mesh relative to the template orientation."""
    from .geometry import extended_points

    template = default_template() if template is None else template
    pts = extended_points(landmarks, template)
    v = pts[template.triangles]
    ref = template.triangle_vertices()
    def area2(t):
        return ((t[:, 1, 0] - t[:, 0, 0]) * (t[:, 2, 1] - t[:, 0, 1])
                - (t[:, 2, 0] - t[:, 0, 0]) * (t[:, 1, 1] - t[:, 0, 1]))
    return float((area2(v) * np.sign(area2(ref))).min() / 2.0)
