# Copyright (c) boxrefine contributors. All rights reserved.
# Licensed under the MIT License.

"""Heatmap to box extraction.

A localization heatmap ``M`` (values in [0, 1]) is turned into scored boxes by a multi-step
procedure: binarization relative to the map's maximum, outer-border contour tracing,
one box per contour, scoring and greedy non-maximum suppression.

Two variants are provided:

- :func:`extract_boxes` scores each box by the mean of ``M`` inside the box and returns the
  surviving set; this is the pseudo-ground-truth set used to train a detector.

- :func:`enclosing_prediction_box` scores each box by the sum of ``M`` inside its contour and
  returns the minimal box enclosing the survivors; this is the box used by the metrics.
"""

from collections import namedtuple
import numpy as np
import numba
from joblib import Parallel, delayed
from scipy import ndimage
from .geometry import ScoredBox, from_corners, union_box, corners_array, pairwise_iou
from .utilities import check_heatmap, check_mask, EmptyPredictionError

MEAN_IN_BOX = 'mean_in_box'
SUM_IN_CONTOUR = 'sum_in_contour'

# neighbour offsets in clockwise order (rows grow downwards), starting east
_DR = np.array([0, 1, 1, 1, 0, -1, -1, -1], dtype=np.int64)
_DC = np.array([1, 1, 0, -1, -1, -1, 0, 1], dtype=np.int64)
_WEST = 4


class Contour(namedtuple('Contour', ['points', 'label'])):
    """Outer border of one 8-connected foreground component.

    Parameters
    ----------
    points : array of int, shape (n, 2)
        Border pixels as ``(x, y)`` pairs, in tracing order; successive points are 8-neighbours
        and the last point is a neighbour of the first.

    label : int
        Component id, as returned by :func:`connected_components` with 8-connectivity.
    """
    __slots__ = ()


def binarize(M, ratio=0.5):
    """Threshold a heatmap relative to its maximum.

    Parameters
    ----------
    M : array-like, shape (height, width)
        Heatmap with values in [0, 1].

    ratio : float in (0, 1], optional (default=0.5)
        A pixel is foreground iff its value is at least ``ratio * max(M)``.

    Returns
    -------
    mask : array of bool, shape (height, width)
        All false when ``M`` is identically zero.
    """
    if not 0 < ratio <= 1:
        raise ValueError("The ratio must lie in (0, 1], got {0}.".format(ratio))
    M = check_heatmap(M)
    peak = M.max()
    if peak <= 0:
        return np.zeros(M.shape, dtype=bool)
    return M >= ratio * peak


def connected_components(mask, connectivity=8):
    """Label the connected foreground components of a binary mask.

    Parameters
    ----------
    mask : array-like of bool, shape (height, width)

    connectivity : 4 or 8, optional (default=8)

    Returns
    -------
    labels : array of int, shape (height, width)
        0 on background; components numbered from 1 in the order a raster scan first meets them.

    n_components : int
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8, got {0}.".format(connectivity))
    mask = check_mask(mask)
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    labels, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return labels.astype(np.int64), 0
    # relabel by first raster occurrence so the numbering never depends on the labelling backend
    found, first_index = np.unique(labels.ravel(), return_index=True)
    first_index = first_index[found > 0]
    found = found[found > 0]
    remap = np.zeros(n + 1, dtype=np.int64)
    remap[found[np.argsort(first_index, kind='mergesort')]] = np.arange(1, n + 1)
    return remap[labels], int(n)


@numba.njit
def _direction_index(dr, dc):
    for d in range(8):
        if _DR[d] == dr and _DC[d] == dc:
            return d
    return -1


@numba.njit
def _follow_border(image, r0, c0, capacity):
    # outer border following from the raster-first pixel (r0, c0) of a zero-padded component
    rows = np.empty(capacity, dtype=np.int64)
    cols = np.empty(capacity, dtype=np.int64)
    first = -1
    for k in range(8):
        d = (_WEST + k) % 8
        if image[r0 + _DR[d], c0 + _DC[d]]:
            first = d
            break
    if first < 0:
        rows[0] = r0
        cols[0] = c0
        return rows[:1], cols[:1]
    r1 = r0 + _DR[first]
    c1 = c0 + _DC[first]
    r2, c2 = r1, c1
    r3, c3 = r0, c0
    n = 0
    while True:
        d2 = _direction_index(r2 - r3, c2 - c3)
        r4, c4 = r3, c3
        for k in range(1, 9):
            d = (d2 - k + 16) % 8
            r4 = r3 + _DR[d]
            c4 = c3 + _DC[d]
            if image[r4, c4]:
                break
        rows[n] = r3
        cols[n] = c3
        n += 1
        if (r4 == r0 and c4 == c0 and r3 == r1 and c3 == c1) or n >= capacity:
            break
        r2, c2 = r3, c3
        r3, c3 = r4, c4
    return rows[:n], cols[:n]


def trace_contours(mask):
    """Trace the outer border of every 8-connected foreground component.

    Hole borders are not emitted: outer borders fully determine bounding boxes.

    Parameters
    ----------
    mask : array-like of bool, shape (height, width)

    Returns
    -------
    contours : list of :class:`Contour`
        One contour per component, ordered by component label.
    """
    labels, n = connected_components(mask, connectivity=8)
    contours = []
    for label, window in enumerate(ndimage.find_objects(labels), start=1):
        component = np.pad((labels[window] == label).astype(np.uint8), 1, mode='constant')
        start = int(np.argmax(component.ravel()))
        r0, c0 = divmod(start, component.shape[1])
        rows, cols = _follow_border(component, r0, c0, 8 * int(component.sum()) + 8)
        points = np.column_stack((cols - 1 + window[1].start, rows - 1 + window[0].start))
        contours.append(Contour(points=points, label=label))
    return contours


def boxes_from_contours(contours, M, mode=MEAN_IN_BOX):
    """Derive one scored box per contour.

    Parameters
    ----------
    contours : list of :class:`Contour`
        Contours traced on a binarization of ``M``.

    M : array-like, shape (height, width)
        The heatmap the contours were traced on.

    mode : 'mean_in_box' or 'sum_in_contour', optional (default='mean_in_box')
        ``'mean_in_box'`` scores by the mean of ``M`` over the box's pixels;
        ``'sum_in_contour'`` scores by the sum of ``M`` over the pixels enclosed by the contour
        (border included). Every pixel of the filled region counts, so a component nested inside a ring
        adds its mass to the ring's score (and also gets a box of its own).

    Returns
    -------
    boxes : list of :class:`~boxrefine.geometry.ScoredBox`
        Boxes span the half-open pixel range ``[min, max + 1)`` divided by the image size.
    """
    if mode not in (MEAN_IN_BOX, SUM_IN_CONTOUR):
        raise ValueError("Unknown scoring mode {0!r}; expected one of {1}.".format(
            mode, (MEAN_IN_BOX, SUM_IN_CONTOUR)))
    M = check_heatmap(M)
    height, width = M.shape
    boxes = []
    for contour in contours:
        xs, ys = contour.points[:, 0], contour.points[:, 1]
        x0, x1, y0, y1 = xs.min(), xs.max(), ys.min(), ys.max()
        window = M[y0:y1 + 1, x0:x1 + 1]
        if mode == MEAN_IN_BOX:
            score = float(window.mean())
        else:
            inside = np.zeros(window.shape, dtype=bool)
            inside[ys - y0, xs - x0] = True
            # an 8-connected closed border separates 4-connected background, so filling recovers the interior
            inside = ndimage.binary_fill_holes(inside)
            score = float(window[inside].sum())
        box = from_corners(x0 / width, y0 / height, (x1 + 1) / width, (y1 + 1) / height)
        boxes.append(ScoredBox(box, score))
    return boxes


def nms(boxes, iou_thresh=0.05, score_ratio=0.5):
    """Greedy non-maximum suppression.

    Boxes scoring below ``score_ratio`` times the maximal score are dropped first; the rest are
    visited in descending score order (ties by input index) and a box is removed when its IoU
    with an already kept box is at least ``iou_thresh``.

    Parameters
    ----------
    boxes : list of :class:`~boxrefine.geometry.ScoredBox`

    iou_thresh : float, optional (default=0.05)

    score_ratio : float, optional (default=0.5)

    Returns
    -------
    kept : list of :class:`~boxrefine.geometry.ScoredBox`
        Sorted by descending score, ties broken by input index.
    """
    boxes = list(boxes)
    if len(boxes) == 0:
        return []
    scores = np.array([b.score for b in boxes], dtype=np.float64)
    if np.any(scores < 0) or not np.all(np.isfinite(scores)):
        raise ValueError("Box scores must be finite and non-negative.")
    order = np.argsort(-scores, kind='mergesort')
    order = order[scores[order] >= score_ratio * scores.max()]
    corners = corners_array(boxes)
    overlaps = pairwise_iou(corners, corners)
    keep = []
    for i in order:
        if all(overlaps[i, j] < iou_thresh for j in keep):
            keep.append(i)
    return [boxes[i] for i in keep]


def extract_boxes(M, ratio=0.5, iou_thresh=0.05, score_ratio=0.5):
    """Extract the pseudo-ground-truth box set of a heatmap.

    binarize -> trace_contours -> boxes_from_contours('mean_in_box') -> nms.

    Parameters
    ----------
    M : array-like, shape (height, width)

    ratio, iou_thresh, score_ratio : float, optional
        Passed to :func:`binarize` and :func:`nms`.

    Returns
    -------
    boxes : list of :class:`~boxrefine.geometry.ScoredBox`
        Empty for an all-zero map.
    """
    M = check_heatmap(M)
    contours = trace_contours(binarize(M, ratio))
    return nms(boxes_from_contours(contours, M, MEAN_IN_BOX), iou_thresh=iou_thresh, score_ratio=score_ratio)


def enclosing_prediction_box(M, ratio=0.5, iou_thresh=0.05, score_ratio=0.5):
    """Metric-time box of a heatmap: the minimal box enclosing the boxes that survive NMS.

    binarize -> trace_contours -> boxes_from_contours('sum_in_contour') -> nms -> union.

    Raises
    ------
    EmptyPredictionError
        When no box survives (for instance an all-zero map).
    """
    M = check_heatmap(M)
    contours = trace_contours(binarize(M, ratio))
    survivors = nms(boxes_from_contours(contours, M, SUM_IN_CONTOUR), iou_thresh=iou_thresh, score_ratio=score_ratio)
    if not survivors:
        raise EmptyPredictionError()
    return union_box(survivors)


def extract_boxes_batch(maps, metric=False, n_jobs=None):
    """Run :func:`extract_boxes` (or :func:`enclosing_prediction_box` when ``metric``) over many maps.

    Parameters
    ----------
    maps : iterable of array-like
        Heatmaps.

    metric : bool, optional (default=False)
        Whether to produce the single metric-time box per map instead of the training box set.

    n_jobs : int or None, optional (default=None)
        The maximum number of concurrently running jobs, as in joblib.Parallel.

    Returns
    -------
    results : list
        One entry per map, in input order.
    """
    func = enclosing_prediction_box if metric else extract_boxes
    return Parallel(n_jobs=n_jobs, prefer='threads')(delayed(func)(M) for M in maps)
