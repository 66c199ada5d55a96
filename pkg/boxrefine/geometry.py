# Copyright (c) boxrefine contributors. All rights reserved.
# Licensed under the MIT License.

"""Box representations and box similarity measures.

All boxes are axis-aligned and parameterized by their normalized center and size,
``(cx, cy, w, h)``, with coordinates relative to the image width and height.
Corner form ``(x0, y0, x1, y1)`` is derived on demand.

Values outside of [0, 1] are accepted everywhere in this module: boxes produced during
gradient descent are evaluated as-is, and clamping only happens on serialization
(see :func:`clamp_box`).
"""

from collections import namedtuple
import numpy as np
from scipy.special import expit

PROB_EPS = 1e-7


class Box(namedtuple('Box', ['cx', 'cy', 'w', 'h'])):
    """Axis-aligned box in normalized center/size parameterization.

    Parameters
    ----------
    cx, cy : float
        Normalized center coordinates.

    w, h : float
        Normalized width and height.
    """
    __slots__ = ()

    @property
    def area(self):
        return self.w * self.h

    def to_corners(self):
        return to_corners(self)


class PredBox(namedtuple('PredBox', ['box', 'logits'])):
    """Predicted box with a pair of (object, no-object) logits.

    The objectness probability is the softmax of the two logits, see :func:`objectness_prob`.
    """
    __slots__ = ()

    @property
    def prob(self):
        return objectness_prob(self.logits)


class TargetBox(namedtuple('TargetBox', ['box', 'is_object'])):
    """Matching target; padded targets carry an all-zero box and ``is_object=False``."""
    __slots__ = ()


class ScoredBox(namedtuple('ScoredBox', ['box', 'score'])):
    """Box with a non-negative confidence score. An ordered list of these is a box set."""
    __slots__ = ()


ZERO_BOX = Box(0.0, 0.0, 0.0, 0.0)


def as_box(b):
    """Return the geometric :class:`Box` held by a box-like object."""
    if isinstance(b, Box):
        return b
    if isinstance(b, (ScoredBox, PredBox, TargetBox)):
        return b.box
    return Box(*b)


def objectness_prob(logits):
    """Softmax probability of the object class for a pair of (object, no-object) logits."""
    l_obj, l_noobj = logits
    return float(expit(l_obj - l_noobj))


def to_corners(b):
    """Convert a box to its corner form ``(x0, y0, x1, y1)``."""
    cx, cy, w, h = as_box(b)
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def from_corners(x0, y0, x1, y1):
    """Build a :class:`Box` from corner coordinates."""
    return Box((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def box_area(b):
    """Area of a box given in any box-like form."""
    x0, y0, x1, y1 = to_corners(b)
    return (x1 - x0) * (y1 - y0)


def _overlap_terms(a, b):
    # intersection, union and enclosing areas
    ax0, ay0, ax1, ay1 = to_corners(a)
    bx0, by0, bx1, by1 = to_corners(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    enclose = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter, union, enclose


def iou(a, b):
    """Intersection over union of two boxes.

    Returns 0 when the union has zero area (both boxes degenerate).
    """
    inter, union, _ = _overlap_terms(a, b)
    if union <= 0:
        return 0.0
    return inter / union


def giou(a, b):
    """Generalized intersection over union of two boxes.

    ``giou = iou - |C \\ (a U b)| / |C|`` where ``C`` is the smallest box enclosing both.
    The value lies in (-1, 1]. When the enclosing box or the union has zero area
    (for instance both boxes are the same point) the value is defined as 0.
    """
    inter, union, enclose = _overlap_terms(a, b)
    if enclose <= 0 or union <= 0:
        return 0.0
    return inter / union - (enclose - union) / enclose


def union_box(boxes):
    """Minimal axis-aligned box containing every box of a non-empty collection.

    Parameters
    ----------
    boxes : iterable of box-like
        :class:`Box`, :class:`ScoredBox`, :class:`PredBox` or :class:`TargetBox` entries.

    Returns
    -------
    box : :class:`Box`
    """
    corners = np.array([to_corners(b) for b in boxes], dtype=np.float64).reshape(-1, 4)
    if corners.shape[0] == 0:
        raise ValueError("empty box set")
    return from_corners(corners[:, 0].min(), corners[:, 1].min(), corners[:, 2].max(), corners[:, 3].max())


def corners_array(boxes):
    """Stack the corner forms of a sequence of boxes into an array of shape (n, 4)."""
    return np.array([to_corners(b) for b in boxes], dtype=np.float64).reshape(-1, 4)


def pairwise_iou(corners_a, corners_b):
    """Vectorized IoU between two arrays of corner boxes.

    Parameters
    ----------
    corners_a : array, shape (n, 4)
    corners_b : array, shape (m, 4)

    Returns
    -------
    iou : array, shape (n, m)
    """
    a = np.asarray(corners_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(corners_b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.maximum(0.0, np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]))
    ih = np.maximum(0.0, np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]))
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def clamp_box(b):
    """Clip a box's corners into [0, 1]² (serialization boundary only)."""
    x0, y0, x1, y1 = np.clip(to_corners(b), 0.0, 1.0)
    return from_corners(x0, y0, x1, y1)
