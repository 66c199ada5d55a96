# Copyright (c) boxrefine contributors. All rights reserved.
# Licensed under the MIT License.

"""Localization metrics: pointing game, bounding-box accuracy and CorLoc."""

from collections import namedtuple
import numpy as np
from joblib import Parallel, delayed
from .geometry import Box, ScoredBox, as_box, corners_array, pairwise_iou, to_corners
from .heatmap import enclosing_prediction_box
from .utilities import check_heatmap, EmptyPredictionError

POINTING = 'pointing'
BBOX = 'bbox'
CORLOC = 'corloc'
METRICS = (POINTING, BBOX, CORLOC)
HIT_IOU = 0.5


class EvalSample(namedtuple('EvalSample', ['prediction', 'ground_truth', 'sample_id'])):
    """One evaluation sample.

    Parameters
    ----------
    prediction : array, shape (height, width), or :class:`~boxrefine.geometry.Box`
        A heatmap or a predicted box.

    ground_truth : non-empty list of boxes

    sample_id : string
        Must be unique within one call to :func:`evaluate`.
    """
    __slots__ = ()

    @property
    def is_heatmap(self):
        return not isinstance(self.prediction, (Box, ScoredBox))


EvalReport = namedtuple('EvalReport', ['metric', 'hits', 'total', 'accuracy', 'per_sample', 'failures'])
EvalReport.__doc__ = """Aggregated evaluation.

``accuracy`` is exactly ``hits / total``; ``per_sample`` maps each sample id to its hit flag and
``failures`` lists the ids whose heatmap yielded no box (counted as misses)."""


def _check_gt(gt):
    gt = [as_box(g) for g in gt]
    if not gt:
        raise ValueError("The ground-truth box set must not be empty.")
    return gt


def pointing_hit(M, gt):
    """Whether the heatmap's maximum falls inside a ground-truth box.

    The first maximum in row-major order is used; its pixel center ``((x + .5) / W, (y + .5) / H)``
    is tested for inclusive containment.
    """
    M = check_heatmap(M)
    height, width = M.shape
    y, x = divmod(int(np.argmax(M)), width)
    px, py = (x + 0.5) / width, (y + 0.5) / height
    for g in _check_gt(gt):
        x0, y0, x1, y1 = to_corners(g)
        if x0 <= px <= x1 and y0 <= py <= y1:
            return True
    return False


def bbox_hit(pred, gt):
    """Whether the predicted box has IoU strictly above 0.5 with some ground-truth box."""
    overlaps = pairwise_iou(corners_array([pred]), corners_array(_check_gt(gt)))
    return bool(overlaps.max() > HIT_IOU)


corloc_hit = bbox_hit


def _score_sample(sample, metric):
    if metric == POINTING:
        return pointing_hit(sample.prediction, sample.ground_truth), False
    prediction = sample.prediction
    if sample.is_heatmap:
        try:
            prediction = enclosing_prediction_box(prediction)
        except EmptyPredictionError:
            return False, True
    return bbox_hit(prediction, sample.ground_truth), False


def evaluate(samples, metric, n_jobs=None):
    """Evaluate a list of samples under one metric.

    Parameters
    ----------
    samples : list of :class:`EvalSample`
        Predictions must all be heatmaps or all be boxes; pointing requires heatmaps.

    metric : 'pointing', 'bbox' or 'corloc'

    n_jobs : int or None, optional (default=None)
        The maximum number of concurrently running jobs, as in joblib.Parallel.

    Returns
    -------
    report : :class:`EvalReport`
    """
    if metric not in METRICS:
        raise ValueError("Unknown metric {0!r}; expected one of {1}.".format(metric, METRICS))
    samples = list(samples)
    if not samples:
        raise ValueError("no samples")
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("Duplicate sample ids: {0}".format(sorted({i for i in ids if ids.count(i) > 1})))
    kinds = {s.is_heatmap for s in samples}
    if len(kinds) > 1:
        raise ValueError("Predictions must be all heatmaps or all boxes.")
    if metric == POINTING and kinds != {True}:
        raise ValueError("The pointing game needs heatmap predictions.")
    outcomes = Parallel(n_jobs=n_jobs, prefer='threads')(delayed(_score_sample)(s, metric) for s in samples)
    per_sample = {s.sample_id: hit for s, (hit, _) in zip(samples, outcomes)}
    failures = [s.sample_id for s, (_, failed) in zip(samples, outcomes) if failed]
    hits = sum(hit for hit, _ in outcomes)
    return EvalReport(metric, hits, len(samples), hits / len(samples), per_sample, failures)
