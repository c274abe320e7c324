"""Rotated-box algebra.

Boxes live in pixel coordinates; the affine transform derived from a
regression delta lives in normalized proposal coordinates, where the proposal
rectangle occupies [-1, 1]^2.  Angles are radians, normalized to
[-pi/2, pi/2), and rotations are counter-clockwise in the mathematical
(y-up) sense.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Array = np.ndarray

_TWO_PI = 2.0 * math.pi


def normalize_angle(alpha: float) -> float:
    """Wrap an angle into [-pi/2, pi/2); a rectangle is invariant mod pi."""
    return (alpha + math.pi / 2.0) % math.pi - math.pi / 2.0


def _wrap_pi(angle: float) -> float:
    """Wrap into (-pi, pi]."""
    return math.pi - (math.pi - angle) % _TWO_PI


@dataclass(frozen=True)
class HorizontalBox:
    """Axis-aligned proposal: center (x, y) and positive extents (w, h)."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")


@dataclass(frozen=True)
class OrientedBox:
    """Rotated rectangle: center, positive extents, angle in [-pi/2, pi/2)."""

    x: float
    y: float
    w: float
    h: float
    alpha: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")
        object.__setattr__(self, "alpha", normalize_angle(self.alpha))


@dataclass(frozen=True)
class BoxDelta:
    """Regression offsets: dimensionless center shift, log-scale size, rotation."""

    dx: float
    dy: float
    dw: float
    dh: float
    dalpha: float

    def __post_init__(self):
        vals = (self.dx, self.dy, self.dw, self.dh, self.dalpha)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"delta components must be finite, got {vals}")
        object.__setattr__(self, "dalpha", _wrap_pi(self.dalpha))

    @classmethod
    def zero(cls) -> "BoxDelta":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class AffineTransform2D:
    """u -> m @ u + t in normalized proposal coordinates."""

    m: Array
    t: Array

    def __post_init__(self):
        object.__setattr__(self, "m", np.asarray(self.m, dtype=np.float64).reshape(2, 2))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(2))

    def apply(self, pts: Array) -> Array:
        return np.atleast_2d(pts) @ self.m.T + self.t


# ---------------------------------------------------------------------------
# delta codec


def decode_delta(p: HorizontalBox, d: BoxDelta) -> OrientedBox:
    """Apply a regression delta to a horizontal proposal."""
    return OrientedBox(
        x=p.x + p.w * d.dx,
        y=p.y + p.h * d.dy,
        w=p.w * math.exp(d.dw),
        h=p.h * math.exp(d.dh),
        alpha=d.dalpha,
    )


def encode_delta(p: HorizontalBox, b: OrientedBox) -> BoxDelta:
    """Exact inverse of decode_delta; proposals carry no angle, so dalpha = alpha."""
    return BoxDelta(
        dx=(b.x - p.x) / p.w,
        dy=(b.y - p.y) / p.h,
        dw=math.log(b.w / p.w),
        dh=math.log(b.h / p.h),
        dalpha=b.alpha,
    )


# ---------------------------------------------------------------------------
# the affine transform and its step-by-step oracle


def affine_from_delta(d: BoxDelta, p: HorizontalBox) -> AffineTransform2D:
    """Closed-form affine carrying the proposal square onto the decoded box,
    in normalized proposal coordinates."""
    c, s = math.cos(d.dalpha), math.sin(d.dalpha)
    ew, eh = math.exp(d.dw), math.exp(d.dh)
    ar = p.h / p.w
    m = np.array([[c * ew, -s * eh * ar],
                  [s * ew / ar, c * eh]])
    return AffineTransform2D(m, np.array([2.0 * d.dx, 2.0 * d.dy]))


def affine_five_step(d: BoxDelta, p: HorizontalBox) -> AffineTransform2D:
    """Same transform built from explicit factors: map the normalized square
    into pixel offsets, scale, rotate, map back, then translate."""
    to_pixels = np.diag([p.w / 2.0, p.h / 2.0])
    scale = np.diag([math.exp(d.dw), math.exp(d.dh)])
    c, s = math.cos(d.dalpha), math.sin(d.dalpha)
    rotate = np.array([[c, -s], [s, c]])
    to_normalized = np.diag([2.0 / p.w, 2.0 / p.h])
    m = to_normalized @ rotate @ scale @ to_pixels
    return AffineTransform2D(m, np.array([2.0 * d.dx, 2.0 * d.dy]))


# ---------------------------------------------------------------------------
# activation-mask rasterization


def grid_centers(h: int, w: int) -> Array:
    """(h*w, 2) cell-center coordinates of an h x w grid covering [-1,1]^2,
    row-major (row i, column j): ((2j+1)/w - 1, (2i+1)/h - 1)."""
    cx = (2.0 * np.arange(w) + 1.0) / w - 1.0
    cy = (2.0 * np.arange(h) + 1.0) / h - 1.0
    xx, yy = np.meshgrid(cx, cy)
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def rasterize_mask(tf: AffineTransform2D, h: int, w: int) -> Array:
    """Binary h x w mask: cell (i,j) is 1 iff its center lies inside the
    image of [-1,1]^2 under `tf` (tested via the inverse transform)."""
    if h < 1 or w < 1:
        raise ValueError(f"mask grid must be at least 1x1, got {h}x{w}")
    det = tf.m[0, 0] * tf.m[1, 1] - tf.m[0, 1] * tf.m[1, 0]
    if abs(det) < 1e-12:
        raise ValueError("affine transform is singular; cannot rasterize")
    minv = np.array([[tf.m[1, 1], -tf.m[0, 1]],
                     [-tf.m[1, 0], tf.m[0, 0]]]) / det
    u = (grid_centers(h, w) - tf.t) @ minv.T
    inside = (np.abs(u[:, 0]) <= 1.0) & (np.abs(u[:, 1]) <= 1.0)
    return inside.astype(np.float64).reshape(h, w)


# ---------------------------------------------------------------------------
# corners, overlap, suppression


def box_corners(b: OrientedBox) -> Array:
    """(4, 2) counter-clockwise corners of the rotated rectangle."""
    c, s = math.cos(b.alpha), math.sin(b.alpha)
    hw, hh = b.w / 2.0, b.h / 2.0
    local = np.array([[hw, hh], [-hw, hh], [-hw, -hh], [hw, -hh]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([b.x, b.y])


def box_contains(b: OrientedBox, pts: Array) -> Array:
    """Boolean array: which points fall inside the box (edges inclusive)."""
    pts = np.atleast_2d(pts)
    c, s = math.cos(b.alpha), math.sin(b.alpha)
    dx = pts[:, 0] - b.x
    dy = pts[:, 1] - b.y
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= b.w / 2.0) & (np.abs(v) <= b.h / 2.0)


def polygon_area(poly: Array) -> float:
    """Shoelace area (absolute value)."""
    poly = np.asarray(poly, dtype=np.float64)
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _edge_intersection(p1, p2, a, b):
    d = b - a
    e = p2 - p1
    denom = d[0] * e[1] - d[1] * e[0]
    t = (d[0] * (a[1] - p1[1]) - d[1] * (a[0] - p1[0])) / denom
    return p1 + t * e


def clip_convex(subject: Array, clip: Array) -> Array:
    """Sutherland-Hodgman: clip a convex polygon against another convex
    polygon given with counter-clockwise winding."""
    out = [np.asarray(v, dtype=np.float64) for v in subject]
    clip = np.asarray(clip, dtype=np.float64)
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        if not out:
            break
        d = b - a
        pts = out
        out = []
        for j, cur in enumerate(pts):
            prev = pts[j - 1]
            cur_in = d[0] * (cur[1] - a[1]) - d[1] * (cur[0] - a[0]) >= 0.0
            prev_in = d[0] * (prev[1] - a[1]) - d[1] * (prev[0] - a[0]) >= 0.0
            if cur_in:
                if not prev_in:
                    out.append(_edge_intersection(prev, cur, a, b))
                out.append(cur)
            elif prev_in:
                out.append(_edge_intersection(prev, cur, a, b))
    return np.array(out) if out else np.empty((0, 2))


def convex_intersection_area(pa: Array, pb: Array) -> float:
    return polygon_area(clip_convex(pa, pb))


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection-over-union of two rotated rectangles via polygon clipping."""
    inter = convex_intersection_area(box_corners(a), box_corners(b))
    if inter < 1e-12:
        return 0.0
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


def mc_iou_oracle(a: OrientedBox, b: OrientedBox, n: int, seed: int) -> float:
    """Monte-Carlo IoU estimate: uniform rejection sampling over the joint
    axis-aligned bounding rectangle.  Standard error scales like 1/sqrt(n)."""
    if n < 1:
        raise ValueError(f"sample count must be at least 1, got {n}")
    corners = np.vstack([box_corners(a), box_corners(b)])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(n, 2))
    in_a = box_contains(a, pts)
    in_b = box_contains(b, pts)
    union = int(np.count_nonzero(in_a | in_b))
    if union == 0:
        return 0.0
    return float(np.count_nonzero(in_a & in_b)) / union


def rotated_nms(boxes: list[OrientedBox], scores, iou_threshold: float) -> list[int]:
    """Greedy descending-score suppression; ties keep the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) != len(scores):
        raise ValueError(f"got {len(boxes)} boxes but {len(scores)} scores")
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou threshold must lie in [0,1], got {iou_threshold}")
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    for idx in order:
        i = int(idx)
        if all(rotated_iou(boxes[i], boxes[k]) <= iou_threshold for k in kept):
            kept.append(i)
    return kept
