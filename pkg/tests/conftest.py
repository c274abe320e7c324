"""Shared helpers: finite-difference gradients, error norms, box generators,
and an independent point-in-quadrilateral oracle."""

import math

import numpy as np
import pytest

from obbdet.geometry import BoxDelta, HorizontalBox, OrientedBox


def rel_error(analytic, numeric):
    """Max-abs difference scaled by the numeric reference's max-abs value."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(numeric).max(), 1e-10)
    return float(np.abs(analytic - numeric).max() / denom)


def numeric_grad(f, x, h=1e-5):
    """Central-difference gradient of the scalar-valued callable `f` w.r.t.
    tensor `x`, perturbing x.data in place one element at a time."""
    flat = x.data.ravel()
    out = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f()
        flat[i] = keep - h
        fm = f()
        flat[i] = keep
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.data.shape)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def points_in_convex_quad(quad, pts):
    """Inclusive containment against a counter-clockwise convex quadrilateral,
    via edge cross products.  Deliberately independent of the clipping code."""
    quad = np.asarray(quad, dtype=np.float64)
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    inside = np.ones(len(pts), dtype=bool)
    for i in range(len(quad)):
        a = quad[i]
        b = quad[(i + 1) % len(quad)]
        cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
        inside &= cross >= 0.0
    return inside


def random_proposal(rng):
    return HorizontalBox(
        x=float(rng.uniform(-40.0, 40.0)),
        y=float(rng.uniform(-40.0, 40.0)),
        w=float(rng.uniform(2.0, 60.0)),
        h=float(rng.uniform(2.0, 60.0)),
    )


def random_delta(rng):
    return BoxDelta(
        dx=float(rng.uniform(-1.0, 1.0)),
        dy=float(rng.uniform(-1.0, 1.0)),
        dw=float(rng.uniform(-1.0, 1.0)),
        dh=float(rng.uniform(-1.0, 1.0)),
        dalpha=float(rng.uniform(-math.pi / 2, math.pi / 2)),
    )


def random_obox(rng):
    return OrientedBox(
        x=float(rng.uniform(-40.0, 40.0)),
        y=float(rng.uniform(-40.0, 40.0)),
        w=float(rng.uniform(2.0, 60.0)),
        h=float(rng.uniform(2.0, 60.0)),
        alpha=float(rng.uniform(-math.pi / 2, math.pi / 2)),
    )
