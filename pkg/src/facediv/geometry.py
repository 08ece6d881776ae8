"""Face template mesh, barycentric anchoring and occluder warping.

Coordinates are continuous pixel units with the origin at the top-left image
corner; pixel ``(row, col)`` covers ``[col, col+1) x [row, row+1)`` and its
center is ``(col + 0.5, row + 0.5)``.  The canonical template lives on a
96x96 canvas.

The default mesh triangulates the 68 landmarks together with 8 control points
on the canvas border (corners and edge midpoints), giving 142 triangles that
tile the whole canvas.  For a posed face the same topology is reused: its 68
landmarks plus the 8 border points carried through the least-squares affine
map from template landmarks to face landmarks.
"""

from __future__ import annotations

import csv
import functools
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "CANONICAL_SIZE",
    "STATIC_OCCLUDER",
    "DYNAMIC_RANGE",
    "FaceTemplate",
    "BarycentricAnchor",
    "OccluderSpec",
    "DegenerateOccluderWarning",
    "canonical_layout",
    "build_template",
    "default_template",
    "barycentric_coords",
    "anchor_point",
    "reconstruct",
    "extended_points",
    "place_occluder",
    "occluder_rect",
    "rect_corners",
    "warp_anchors",
    "quad_mask",
    "render_occlusion",
    "to_canonical",
    "to_canonical_many",
    "point_in_polygon",
    "save_landmarks",
    "load_landmarks",
]

CANONICAL_SIZE = 96.0
STATIC_OCCLUDER = (32.0, 12.0)  # width, height in template pixels
DYNAMIC_RANGE = (12.0, 32.0)
INSIDE_TOL = -1e-9
_DEGENERATE_AREA = 1e-12


class DegenerateOccluderWarning(UserWarning):
    """An occluder quadrilateral with (near) zero area was requested."""


# ----------------------------------------------------------------------------
# template


def canonical_layout() -> np.ndarray:
    """The 68-point frontal layout (iBUG ordering) on the 96x96 canvas."""
    pts = []
    for k in range(17):  # jaw 0-16, left ear to right ear through the chin
        a = np.pi + 0.12 - (np.pi + 0.24) * k / 16
        pts.append((48 + 25 * np.cos(a), 46 + 30 * np.sin(a)))
    brow = [(27, 35), (31, 32.5), (35.5, 31.5), (40, 32), (44, 33.5)]
    pts += brow  # 17-21
    pts += [(96 - x, y) for x, y in reversed(brow)]  # 22-26
    pts += [(48, 40), (48, 45), (48, 50), (48, 55)]  # nose bridge 27-30
    pts += [(42.5, 58), (45, 59), (48, 60), (51, 59), (53.5, 58)]  # nostrils 31-35
    eye = [(31, 42), (34, 40), (38, 40), (41, 42), (38, 43.8), (34, 43.8)]
    pts += eye  # 36-41
    mirrored = [(96 - x, y) for x, y in eye]
    pts += [mirrored[i] for i in (3, 2, 1, 0, 5, 4)]  # 42-47
    pts += [(38, 67), (41.5, 65), (45, 64), (48, 64.6), (51, 64), (54.5, 65), (58, 67),
            (54.5, 70), (51, 71.2), (48, 71.6), (45, 71.2), (41.5, 70)]  # outer lip 48-59
    pts += [(40.5, 67), (45, 66.2), (48, 66.4), (51, 66.2), (55.5, 67),
            (51, 68.6), (48, 69), (45, 68.6)]  # inner lip 60-67
    return np.array(pts, dtype=np.float64)


def border_points(size: float) -> np.ndarray:
    """Corners and edge midpoints of a ``size`` canvas, clockwise from top-left."""
    h = size / 2.0
    return np.array([(0, 0), (h, 0), (size, 0), (size, h), (size, size), (h, size),
                     (0, size), (0, h)], dtype=np.float64)


def _default_regions() -> dict:
    def box(x0, y0, x1, y1):
        return np.array([(x0, y0), (x1, y0), (x1, y1), (x0, y1)], dtype=np.float64)

    return {
        "eyes": box(24, 34, 72, 48),
        "nose": box(38, 48, 58, 62),
        "mouth": box(33, 62, 63, 76),
    }


@dataclass(frozen=True)
class FaceTemplate:
    """Canonical landmarks, border control points and the shared mesh."""

    landmarks: np.ndarray
    boundary: np.ndarray
    triangles: np.ndarray
    size: float = CANONICAL_SIZE
    regions: dict = field(default_factory=dict)

    @property
    def points(self) -> np.ndarray:
        return np.vstack([self.landmarks, self.boundary])

    def triangle_vertices(self, points: Optional[np.ndarray] = None) -> np.ndarray:
        pts = self.points if points is None else points
        return pts[self.triangles]

    def face_hull(self) -> np.ndarray:
        from scipy.spatial import ConvexHull

        hull = ConvexHull(self.landmarks)
        return self.landmarks[hull.vertices]

    def save(self, path) -> None:
        """Write the text template format.

        Lines are ``size S``, then ``point INDEX X Y KIND`` for the landmarks
        (KIND ``landmark``) followed by the border points (KIND ``boundary``),
        then ``tri A B C`` (indices into the point list), then optional
        ``region NAME X1 Y1 X2 Y2 ...`` polygons.  ``#`` starts a comment.
        """
        lines = ["# face template: point INDEX X Y KIND | tri A B C | region NAME X1 Y1 ...",
                 f"size {self.size!r}"]
        for i, (x, y) in enumerate(self.landmarks):
            lines.append(f"point {i} {float(x)!r} {float(y)!r} landmark")
        n = len(self.landmarks)
        for i, (x, y) in enumerate(self.boundary):
            lines.append(f"point {n + i} {float(x)!r} {float(y)!r} boundary")
        for a, b, c in self.triangles:
            lines.append(f"tri {a} {b} {c}")
        for name, poly in self.regions.items():
            coords = " ".join(f"{float(v)!r}" for v in np.asarray(poly).reshape(-1))
            lines.append(f"region {name} {coords}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "FaceTemplate":
        return cls.from_text(Path(path).read_text())

    @classmethod
    def from_text(cls, text: str) -> "FaceTemplate":
        size = CANONICAL_SIZE
        landmarks, boundary, tris, regions = [], [], [], {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            key = parts[0]
            try:
                if key == "size":
                    size = float(parts[1])
                elif key == "point":
                    idx, x, y, kind = int(parts[1]), float(parts[2]), float(parts[3]), parts[4]
                    target = landmarks if kind == "landmark" else boundary
                    if kind not in ("landmark", "boundary"):
                        raise ValueError(f"unknown point kind {kind!r}")
                    if idx != len(landmarks) + len(boundary):
                        raise ValueError("point indices must be consecutive")
                    target.append((x, y))
                elif key == "tri":
                    tris.append(tuple(int(v) for v in parts[1:4]))
                elif key == "region":
                    regions[parts[1]] = np.array([float(v) for v in parts[2:]]).reshape(-1, 2)
                else:
                    raise ValueError(f"unknown record {key!r}")
            except (IndexError, ValueError) as exc:
                raise ValueError(f"template line {lineno}: {exc}") from None
        return cls(np.array(landmarks, dtype=np.float64), np.array(boundary, dtype=np.float64),
                   np.array(tris, dtype=np.int64), size, regions)


def build_template(landmarks: Optional[np.ndarray] = None,
                   size: float = CANONICAL_SIZE) -> FaceTemplate:
    """Delaunay-triangulate landmarks plus the 8 border control points."""
    from scipy.spatial import Delaunay

    lm = canonical_layout() if landmarks is None else np.asarray(landmarks, dtype=np.float64)
    boundary = border_points(size)
    pts = np.vstack([lm, boundary])
    tris = Delaunay(pts).simplices.astype(np.int64)
    # counter-clockwise in y-down coordinates is a positive cross product here
    v = pts[tris]
    cross = ((v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
             - (v[:, 2, 0] - v[:, 0, 0]) * (v[:, 1, 1] - v[:, 0, 1]))
    tris[cross < 0] = tris[cross < 0][:, [0, 2, 1]]
    tris = tris[np.lexsort(tris.T[::-1])]
    return FaceTemplate(lm, boundary, tris, float(size), _default_regions())


@functools.lru_cache(maxsize=1)
def default_template() -> FaceTemplate:
    """The shipped 68-landmark, 142-triangle template."""
    text = resources.files("facediv").joinpath("data/face_template.txt").read_text()
    return FaceTemplate.from_text(text)


# ----------------------------------------------------------------------------
# barycentric coordinates


def _signed_area2(a, b, c) -> np.ndarray:
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (c[..., 0] - a[..., 0]) * (b[..., 1] - a[..., 1])


def barycentric_coords(point, triangle) -> np.ndarray:
    """(alpha, beta, gamma) with ``alpha*A + beta*B + gamma*C == point``."""
    tri = np.asarray(triangle, dtype=np.float64).reshape(3, 2)
    p = np.asarray(point, dtype=np.float64)
    a, b, c = tri
    area2 = _signed_area2(a, b, c)
    if abs(area2) / 2.0 < _DEGENERATE_AREA:
        raise ValueError(f"degenerate triangle {tri.tolist()}")
    beta = _signed_area2(a, p, c) / area2
    gamma = _signed_area2(a, b, p) / area2
    return np.array([1.0 - beta - gamma, beta, gamma])


def _barycentric_many(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Coordinates of every point w.r.t. every triangle: ``[M, T, 3]``."""
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    area2 = _signed_area2(a, b, c)
    p = points[:, None, :]
    beta = _signed_area2(a[None], p, c[None]) / area2
    gamma = _signed_area2(a[None], b[None], p) / area2
    return np.stack([1.0 - beta - gamma, beta, gamma], axis=-1)


@dataclass(frozen=True)
class BarycentricAnchor:
    """A point expressed in one mesh triangle."""

    triangle: int
    coords: tuple

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(float(c) for c in self.coords))
        if abs(sum(self.coords) - 1.0) > 1e-9:
            raise ValueError(f"barycentric coords must sum to 1, got {self.coords}")


def _locate(points: np.ndarray, tri_vertices: np.ndarray):
    """First containing triangle and coords for each point; -1 when outside."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    idx = np.full(len(points), -1, dtype=np.int64)
    coords = np.zeros((len(points), 3))
    for start in range(0, len(points), 2048):
        chunk = _barycentric_many(points[start:start + 2048], tri_vertices)
        inside = chunk.min(axis=2) >= INSIDE_TOL
        hit = inside.any(axis=1)
        first = inside.argmax(axis=1)
        rows = np.nonzero(hit)[0]
        idx[start + rows] = first[rows]
        coords[start + rows] = chunk[rows, first[rows]]
    return idx, coords


def anchor_point(point, template: FaceTemplate,
                 points: Optional[np.ndarray] = None) -> BarycentricAnchor:
    """Anchor ``point`` in the lowest-index mesh triangle that contains it."""
    idx, coords = _locate(point, template.triangle_vertices(points))
    if idx[0] < 0:
        raise ValueError(f"point {tuple(np.ravel(point))} lies outside the mesh")
    return BarycentricAnchor(int(idx[0]), tuple(coords[0]))


def reconstruct(anchor: BarycentricAnchor, template: FaceTemplate,
                points: Optional[np.ndarray] = None) -> np.ndarray:
    verts = template.triangle_vertices(points)[anchor.triangle]
    return np.asarray(anchor.coords) @ verts


def _affine_fit(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares ``[3, 2]`` matrix M with ``[x, y, 1] @ M ~ dst``."""
    design = np.hstack([src, np.ones((len(src), 1))])
    m, *_ = np.linalg.lstsq(design, dst, rcond=None)
    return m


def extended_points(landmarks, template: FaceTemplate) -> np.ndarray:
    """The 76 mesh vertices of a face: its landmarks plus carried border points."""
    lm = np.asarray(landmarks, dtype=np.float64)
    if lm.shape != template.landmarks.shape:
        raise ValueError(f"expected {template.landmarks.shape} landmarks, got {lm.shape}")
    if not np.all(np.isfinite(lm)):
        raise ValueError("landmarks must be finite")
    m = _affine_fit(template.landmarks, lm)
    carried = np.hstack([template.boundary, np.ones((len(template.boundary), 1))]) @ m
    return np.vstack([lm, carried])


# ----------------------------------------------------------------------------
# occluders


@dataclass(frozen=True)
class OccluderSpec:
    """How to draw a template-space occluding rectangle.

    ``rect`` pins the rectangle as ``(x, y, width, height)`` in template
    pixels; otherwise its size follows ``size_mode`` and its position is drawn
    uniformly until all four corners fall inside the face hull.
    """

    fill: str = "black"
    size_mode: str = "static"
    rng_seed: int = 0
    rect: Optional[tuple] = None

    def __post_init__(self):
        if self.fill not in ("black", "gaussian_noise"):
            raise ValueError(f"unknown fill {self.fill!r}")
        if self.size_mode not in ("static", "dynamic"):
            raise ValueError(f"unknown size mode {self.size_mode!r}")
        if self.rect is not None:
            object.__setattr__(self, "rect", tuple(float(v) for v in self.rect))
            if len(self.rect) != 4 or self.rect[2] < 0 or self.rect[3] < 0:
                raise ValueError(f"rect must be (x, y, w, h) with w, h >= 0, got {self.rect}")


def point_in_polygon(points, polygon) -> np.ndarray:
    """Even-odd rule containment for ``[M, 2]`` points; boundary counts inside for convex polygons."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    poly = np.asarray(polygon, dtype=np.float64)
    x, y = pts[:, 0][:, None], pts[:, 1][:, None]
    x0, y0 = poly[:, 0][None], poly[:, 1][None]
    x1, y1 = np.roll(poly[:, 0], -1)[None], np.roll(poly[:, 1], -1)[None]
    # a point on an edge of a convex polygon is kept by the cross-product test below
    cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
    on_edge = (np.abs(cross) <= 1e-12) & (np.minimum(x0, x1) - 1e-12 <= x) & (x <= np.maximum(x0, x1) + 1e-12) \
        & (np.minimum(y0, y1) - 1e-12 <= y) & (y <= np.maximum(y0, y1) + 1e-12)
    straddle = (y0 > y) != (y1 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    crossing = straddle & (x < xint)
    return (crossing.sum(axis=1) % 2 == 1) | on_edge.any(axis=1)


def rect_corners(rect) -> np.ndarray:
    """Corners of ``(x, y, w, h)`` clockwise from top-left (y axis down)."""
    x, y, w, h = rect
    return np.array([(x, y), (x + w, y), (x + w, y + h), (x, y + h)], dtype=np.float64)


def occluder_rect(spec: OccluderSpec, template: FaceTemplate,
                  rng: np.random.Generator, max_attempts: int = 100) -> tuple:
    """Sample the template-space rectangle ``(x, y, w, h)`` for ``spec``."""
    if spec.rect is not None:
        return spec.rect
    hull = template.face_hull()
    lo, hi = template.landmarks.min(axis=0), template.landmarks.max(axis=0)
    for _ in range(max_attempts):
        if spec.size_mode == "static":
            w, h = STATIC_OCCLUDER
        else:
            w, h = rng.uniform(*DYNAMIC_RANGE, size=2)
        if w > hi[0] - lo[0] or h > hi[1] - lo[1]:
            continue
        x = rng.uniform(lo[0], hi[0] - w)
        y = rng.uniform(lo[1], hi[1] - h)
        rect = (float(x), float(y), float(w), float(h))
        if point_in_polygon(rect_corners(rect), hull).all():
            return rect
    raise ValueError(f"could not place a {spec.size_mode} occluder inside the face after "
                     f"{max_attempts} attempts")


def place_occluder(spec: OccluderSpec, template: FaceTemplate,
                   rng: Optional[np.random.Generator] = None) -> tuple:
    """Four anchors (clockwise from top-left) of a template-space occluder."""
    rng = np.random.default_rng(spec.rng_seed) if rng is None else rng
    rect = occluder_rect(spec, template, rng)
    return tuple(anchor_point(c, template) for c in rect_corners(rect))


def warp_anchors(anchors: Sequence[BarycentricAnchor], landmarks,
                 template: FaceTemplate) -> np.ndarray:
    """Carry template anchors onto a face with the given landmarks: ``[4, 2]``."""
    pts = extended_points(landmarks, template)
    return np.array([reconstruct(a, template, pts) for a in anchors])


def quad_mask(quad, shape) -> np.ndarray:
    """Boolean ``[H, W]`` mask of pixels whose centers fall inside ``quad``.

    The quadrilateral is split along its 0-2 diagonal into two triangles.
    """
    q = np.asarray(quad, dtype=np.float64)
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    lo = np.floor(q.min(axis=0)).astype(int)
    hi = np.ceil(q.max(axis=0)).astype(int)
    c0, c1 = max(lo[0], 0), min(hi[0] + 1, w)
    r0, r1 = max(lo[1], 0), min(hi[1] + 1, h)
    if c0 >= c1 or r0 >= r1:
        return mask
    cc, rr = np.meshgrid(np.arange(c0, c1) + 0.5, np.arange(r0, r1) + 0.5)
    centers = np.stack([cc.ravel(), rr.ravel()], axis=1)
    inside = np.zeros(len(centers), dtype=bool)
    for a, b, c in (q[[0, 1, 2]], q[[0, 2, 3]]):
        area2 = _signed_area2(a, b, c)
        if abs(area2) / 2.0 < _DEGENERATE_AREA:
            continue
        # edge-function signs, no division, so centers on an edge count as inside
        sides = np.stack([_signed_area2(u, v, centers) for u, v in ((a, b), (b, c), (c, a))], axis=1)
        inside |= np.all(sides * np.sign(area2) >= 0.0, axis=1)
    mask[r0:r1, c0:c1] = inside.reshape(r1 - r0, c1 - c0)
    return mask


def _quad_area(q: np.ndarray) -> float:
    x, y = q[:, 0], q[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def render_occlusion(image: np.ndarray, quad, fill: str = "black",
                     rng: Optional[np.random.Generator] = None,
                     max_value: float = 1.0) -> np.ndarray:
    """Copy of ``image`` ``[C, H, W]`` with the quadrilateral filled.

    ``black`` writes 0; ``gaussian_noise`` writes per-pixel noise (shared across
    channels) with mean ``0.5*max_value`` and std ``0.25*max_value``, clipped
    to ``[0, max_value]``.  A zero-area quad returns an unchanged copy and
    emits :class:`DegenerateOccluderWarning`.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected [C, H, W], got {image.shape}")
    q = np.asarray(quad, dtype=np.float64)
    out = image.copy()
    if _quad_area(q) < _DEGENERATE_AREA:
        warnings.warn("zero-area occluder; image left unchanged", DegenerateOccluderWarning,
                      stacklevel=2)
        return out
    mask = quad_mask(q, image.shape[1:])
    if fill == "black":
        out[:, mask] = 0.0
    elif fill == "gaussian_noise":
        if rng is None:
            raise ValueError("gaussian_noise fill needs a random generator")
        noise = rng.normal(0.5 * max_value, 0.25 * max_value, size=int(mask.sum()))
        out[:, mask] = np.clip(noise, 0.0, max_value)[None]
    else:
        raise ValueError(f"unknown fill {fill!r}")
    return out


# ----------------------------------------------------------------------------
# canonical frame


def to_canonical(points, landmarks, template: FaceTemplate) -> np.ndarray:
    """Map image points of a face into the template frame via its mesh.

    Accepts a single ``(x, y)`` or an ``[M, 2]`` array; raises ``ValueError``
    if any point falls outside the face's extended mesh.
    """
    arr = np.asarray(points, dtype=np.float64)
    single = arr.ndim == 1
    mapped, ok = to_canonical_many(np.atleast_2d(arr), landmarks, template)
    if not ok.all():
        bad = np.atleast_2d(arr)[~ok][0]
        raise ValueError(f"point {tuple(bad)} lies outside the face mesh")
    return mapped[0] if single else mapped


def to_canonical_many(points: np.ndarray, landmarks, template: FaceTemplate):
    """Vectorized :func:`to_canonical`; returns ``(mapped, inside_flags)``.

    Points outside the mesh map to NaN.
    """
    pts = extended_points(landmarks, template)
    idx, coords = _locate(points, template.triangle_vertices(pts))
    ok = idx >= 0
    canon = template.triangle_vertices()
    mapped = np.full((len(idx), 2), np.nan)
    mapped[ok] = np.einsum("mk,mkd->md", coords[ok], canon[idx[ok]])
    return mapped, ok


# ----------------------------------------------------------------------------
# landmark files


def save_landmarks(path, landmarks) -> None:
    """CSV with header ``index,x,y`` and one row per point (repr precision)."""
    lm = np.asarray(landmarks, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "x", "y"])
        for i, (x, y) in enumerate(lm):
            writer.writerow([i, repr(float(x)), repr(float(y))])


def load_landmarks(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    pts = np.zeros((len(rows), 2))
    for row in rows:
        i = int(row["index"])
        if not 0 <= i < len(rows):
            raise ValueError(f"{path}: landmark index {i} out of range")
        pts[i] = float(row["x"]), float(row["y"])
    return pts
