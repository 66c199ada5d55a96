# Copyright (c) boxrefine contributors. All rights reserved.
# Licensed under the MIT License.

"""Data generating processes for correctness testing."""

import numpy as np
from sklearn.utils import check_random_state
from .geometry import Box, ScoredBox, from_corners


########################################################
# Heatmaps with known boxes
########################################################

def dgp_plateau_heatmap(width, height, n_plateaus, random_state=None, min_size=4, max_size=None,
                        low=0.6, high=1.0, max_tries=1000):
    """Heatmap made of disjoint constant rectangles on a zero background.

    Rectangles are separated by at least two background pixels, so each one is its own
    8-connected component; values are drawn in ``[low, high]`` so that every rectangle survives
    half-max binarization and the default NMS score filter.

    Returns
    -------
    M : array, shape (height, width)

    boxes : list of :class:`~boxrefine.geometry.Box`
        Normalized extents of the rectangles, in generation order.
    """
    random_state = check_random_state(random_state)
    max_size = max_size or max(min_size + 1, min(width, height) // 3)
    M = np.zeros((height, width))
    taken = np.zeros((height, width), dtype=bool)
    boxes = []
    for _ in range(max_tries):
        if len(boxes) == n_plateaus:
            break
        w, h = random_state.randint(min_size, max_size + 1, size=2)
        x0 = random_state.randint(0, width - w + 1)
        y0 = random_state.randint(0, height - h + 1)
        if taken[max(y0 - 2, 0):y0 + h + 2, max(x0 - 2, 0):x0 + w + 2].any():
            continue
        taken[y0:y0 + h, x0:x0 + w] = True
        M[y0:y0 + h, x0:x0 + w] = random_state.uniform(low, high)
        boxes.append(from_corners(x0 / width, y0 / height, (x0 + w) / width, (y0 + h) / height))
    if len(boxes) < n_plateaus:
        raise ValueError("Could not place {0} plateaus on a {1}x{2} map.".format(n_plateaus, width, height))
    return M, boxes


def dgp_scored_boxes(n_boxes, random_state=None):
    """Random scored boxes inside the unit square, for NMS and matching tests."""
    random_state = check_random_state(random_state)
    corners = random_state.uniform(0, 1, size=(n_boxes, 2, 2))
    lo, hi = corners.min(axis=1), corners.max(axis=1)
    scores = random_state.uniform(0, 1, size=n_boxes)
    return [ScoredBox(from_corners(lo[i, 0], lo[i, 1], hi[i, 0], hi[i, 1]), float(scores[i])) for i in range(n_boxes)]


def dgp_random_box(random_state=None):
    """Random box with center in [0.2, 0.8] and sides in [0.05, 0.5]."""
    random_state = check_random_state(random_state)
    cx, cy = random_state.uniform(0.2, 0.8, size=2)
    w, h = random_state.uniform(0.05, 0.5, size=2)
    return Box(cx, cy, w, h)


########################################################
# Patch feature grids
########################################################

def dgp_lost_fixture():
    """2x3 grid: two "object" patches near (1, 0) in the top-left, four "background" ones near (-1, 0.05)."""
    obj, back = [1.0, 0.0], [-1.0, 0.05]
    return np.array([[obj, obj, back], [back, back, back]])


def dgp_planted_blocks(rows, cols, members, dim=8, noise=0.05, random_state=None):
    """Feature grid whose patches in ``members`` share one direction and the others an orthogonal one."""
    random_state = check_random_state(random_state)
    n = rows * cols
    F = np.zeros((n, dim))
    inside = np.zeros(n, dtype=bool)
    inside[list(members)] = True
    F[inside, 0] = 1.0
    F[~inside, 1] = 1.0
    F[:, 2:] += noise * random_state.normal(size=(n, dim - 2))
    return F.reshape(rows, cols, dim)


def dgp_blob_fixture():
    """Displaced-blob refinement fixture: a blob at (0.3, 0.3) and a target blob at (0.6, 0.6), 64x64."""
    blobs = np.array([[0.3, 0.3, 0.08, 0.08, 1.0]])
    target_blobs = np.array([[0.6, 0.6, 0.08, 0.08, 1.0]])
    return blobs, target_blobs, 64, 64
