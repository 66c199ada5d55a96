# Copyright (c) boxrefine contributors. All rights reserved.
# Licensed under the MIT License.

"""Set matching between predicted and target boxes, the detection losses and their gradients.

A detector predicts a fixed number ``k`` of boxes, each with four geometry values
``(cx, cy, w, h)`` and a pair of (object, no-object) logits. Targets are padded to ``k``
with "no object" entries, matched to the predictions by a minimal-cost bijection and the
loss

.. math::

    L_h = \\lambda_1 L_{cls} + \\lambda_2 L_{box} + \\lambda_3 L_{giou}

is evaluated over the matched pairs, every term normalized by ``k``. Pairs whose target is
padding only contribute to :math:`L_{cls}` (through :math:`-\\log(1 - \\bar p)`), both in the
matching cost and in the loss.

The union variant :func:`loss_h_bu` replaces the target set by its enclosing box with a
given probability, so that the matching is done against a single box.
"""

from collections import namedtuple
import numpy as np
from scipy.optimize import linear_sum_assignment
from .geometry import (Box, PredBox, TargetBox, ScoredBox, ZERO_BOX, PROB_EPS, as_box, giou, objectness_prob,
                       to_corners, union_box)
from .utilities import check_rng

DEFAULT_K = 10
# relative errors are only meaningful above this gradient magnitude
GRAD_ABS_FLOOR = 1e-3


class LossWeights(namedtuple('LossWeights', ['lambda_cls', 'lambda_box', 'lambda_giou'])):
    """Weights of the classification, L1 box and GIoU terms.

    Parameters
    ----------
    lambda_cls : float, optional (default=2)
    lambda_box : float, optional (default=5)
    lambda_giou : float, optional (default=2)
    """
    __slots__ = ()

    def __new__(cls, lambda_cls=2.0, lambda_box=5.0, lambda_giou=2.0):
        values = (float(lambda_cls), float(lambda_box), float(lambda_giou))
        if any(not np.isfinite(v) or v < 0 for v in values):
            raise ValueError("Loss weights must be finite and non-negative, got {0}.".format(values))
        return super().__new__(cls, *values)

    def scaled(self, factor):
        """Return these weights multiplied by a non-negative constant."""
        return LossWeights(*(factor * v for v in self))


MatchResult = namedtuple('MatchResult', ['permutation', 'cost'])
MatchResult.__doc__ = """Result of the minimal-cost matching.

``permutation[i]`` is the index of the target assigned to prediction ``i``; ``cost`` is the
total cost of the assignment."""

LossBreakdown = namedtuple('LossBreakdown', ['cls', 'box', 'giou', 'total', 'weights'])
LossBreakdown.__doc__ = """Per-term loss values, each normalized by the number of boxes.

``total = weights.lambda_cls * cls + weights.lambda_box * box + weights.lambda_giou * giou``."""


def _check_weights(weights):
    if weights is None:
        return LossWeights()
    if isinstance(weights, LossWeights):
        return weights
    return LossWeights(*weights)


def _box_score(b):
    return float(getattr(b, 'score', 1.0))


def pad_targets(B, k):
    """Turn a box set into exactly ``k`` matching targets.

    Parameters
    ----------
    B : list of :class:`~boxrefine.geometry.ScoredBox` (or plain boxes, scored 1)

    k : int
        Number of predictions.

    Returns
    -------
    targets : list of :class:`~boxrefine.geometry.TargetBox`, length k
        When ``|B| > k`` only the ``k`` highest-scored boxes are kept (ties by index, in descending
        score order); otherwise ``B`` is followed by zero "no object" targets.
    """
    if k < 1:
        raise ValueError("k must be at least 1, got {0}.".format(k))
    B = list(B)
    if len(B) > k:
        scores = np.array([_box_score(b) for b in B])
        B = [B[i] for i in np.argsort(-scores, kind='mergesort')[:k]]
    targets = [TargetBox(as_box(b), True) for b in B]
    return targets + [TargetBox(ZERO_BOX, False)] * (k - len(targets))


def _clamped_prob(pred):
    return min(max(objectness_prob(pred.logits), PROB_EPS), 1 - PROB_EPS)


def _pair_terms(target, pred):
    # unweighted (cls, box, giou) contributions of one matched pair
    p = _clamped_prob(pred)
    if not target.is_object:
        return -np.log(1 - p), 0.0, 0.0
    l1 = float(np.sum(np.abs(np.subtract(pred.box, target.box))))
    return -np.log(p), l1, 1.0 - giou(pred.box, target.box)


def match_cost(target, pred, weights=None):
    """Cost of assigning a prediction to a target.

    Object targets cost ``l1 * (-log p) + l2 * |b' - b|_1 + l3 * (1 - giou)``; padded targets cost
    ``l1 * (-log(1 - p))``. Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` before the logarithm.
    """
    w = _check_weights(weights)
    cls, box, gi = _pair_terms(target, pred)
    return w.lambda_cls * cls + w.lambda_box * box + w.lambda_giou * gi


def _optimal_cost(cost):
    if cost.size == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return cost[rows, cols].sum()


def hungarian(cost):
    """Minimal-cost perfect matching of a square cost matrix.

    The optimum is found with :func:`scipy.optimize.linear_sum_assignment`; among optimal
    assignments the lexicographically smallest permutation is returned, so the result does not
    depend on solver internals.

    Parameters
    ----------
    cost : array-like, shape (k, k)
        ``cost[i, j]`` is the cost of assigning row ``i`` to column ``j``.

    Returns
    -------
    result : :class:`MatchResult`
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("The cost matrix must be square, got shape {0}.".format(cost.shape))
    if not np.all(np.isfinite(cost)):
        raise ValueError("The cost matrix must only contain finite values.")
    k = cost.shape[0]
    best = _optimal_cost(cost)
    tol = 1e-12 * (1.0 + np.abs(cost).sum())
    permutation = np.empty(k, dtype=np.int64)
    free = list(range(k))
    spent = 0.0
    for i in range(k):
        totals = []
        later = np.arange(i + 1, k)
        for j in free:
            rest = np.array([c for c in free if c != j], dtype=np.int64)
            totals.append(spent + cost[i, j] + _optimal_cost(cost[np.ix_(later, rest)]))
        totals = np.array(totals)
        within = np.flatnonzero(totals <= best + tol)
        pick = within[0] if within.size else int(np.argmin(totals))
        permutation[i] = free.pop(pick)
        spent += cost[i, permutation[i]]
    return MatchResult(permutation, float(cost[np.arange(k), permutation].sum()))


def _cost_matrix(targets, preds, weights):
    return np.array([[match_cost(t, p, weights) for t in targets] for p in preds], dtype=np.float64).reshape(
        len(preds), len(targets))


def _check_preds(preds, k):
    preds = [p if isinstance(p, PredBox) else PredBox(Box(*p[0]), tuple(p[1])) for p in preds]
    if len(preds) != k:
        raise ValueError("Expected k={0} predictions, got {1}.".format(k, len(preds)))
    return preds


def loss_for_assignment(targets, preds, permutation, weights=None):
    """Loss of a fixed assignment of predictions to (already padded) targets.

    Parameters
    ----------
    targets : list of :class:`~boxrefine.geometry.TargetBox`

    preds : list of :class:`~boxrefine.geometry.PredBox`

    permutation : array of int
        ``permutation[i]`` is the target index of prediction ``i``.

    weights : :class:`LossWeights` or None

    Returns
    -------
    breakdown : :class:`LossBreakdown`
    """
    w = _check_weights(weights)
    k = len(preds)
    terms = np.array([_pair_terms(targets[permutation[i]], pred) for i, pred in enumerate(preds)]).reshape(k, 3)
    cls, box, gi = terms.sum(axis=0) / k
    total = w.lambda_cls * cls + w.lambda_box * box + w.lambda_giou * gi
    return LossBreakdown(float(cls), float(box), float(gi), float(total), w)


def loss_h(B, preds, k=DEFAULT_K, weights=None):
    """Matched detection loss between a target box set and ``k`` predictions.

    Parameters
    ----------
    B : list of :class:`~boxrefine.geometry.ScoredBox`
        Target box set (may be empty).

    preds : list of :class:`~boxrefine.geometry.PredBox`, length k

    k : int, optional (default=10)

    weights : :class:`LossWeights` or None, optional
        Defaults to ``LossWeights(2, 5, 2)``.

    Returns
    -------
    breakdown : :class:`LossBreakdown`

    match : :class:`MatchResult`
    """
    w = _check_weights(weights)
    preds = _check_preds(preds, k)
    targets = pad_targets(B, k)
    match = hungarian(_cost_matrix(targets, preds, w))
    return loss_for_assignment(targets, preds, match.permutation, w), match


def draw_union_branch(B, rng=None, union_prob=0.5):
    """Draw ``p ~ Uniform[0, 1)`` and pick the target set of the union loss.

    The union box replaces ``B`` when ``p >= 1 - union_prob``; with the default probability of
    one half this is the rule ``p >= 0.5``.

    Returns
    -------
    targets : list of :class:`~boxrefine.geometry.ScoredBox`
        Either ``B`` or a single union box scored with the maximal score of ``B``.

    used_union : bool
    """
    B = list(B)
    if not B:
        raise ValueError("empty box set")
    if not 0 <= union_prob <= 1:
        raise ValueError("union_prob must lie in [0, 1], got {0}.".format(union_prob))
    p = check_rng(rng).uniform()
    if p >= 1 - union_prob:
        return [ScoredBox(union_box(B), max(_box_score(b) for b in B))], True
    return B, False


def loss_h_bu(B, preds, k=DEFAULT_K, weights=None, rng=None, union_prob=0.5):
    """Union-box variant of :func:`loss_h`.

    With probability ``union_prob`` the target set is replaced by its union box (the matching is
    then done with a single box plus padding); otherwise this is :func:`loss_h`.

    Parameters
    ----------
    B : non-empty list of :class:`~boxrefine.geometry.ScoredBox`

    preds : list of :class:`~boxrefine.geometry.PredBox`, length k

    k : int, optional (default=10)

    weights : :class:`LossWeights` or None, optional

    rng : None, int or :class:`~boxrefine.utilities.SplitMix64`, optional
        Source of the uniform draw.

    union_prob : float, optional (default=0.5)

    Returns
    -------
    breakdown : :class:`LossBreakdown`

    used_union : bool
    """
    targets, used_union = draw_union_branch(B, rng, union_prob)
    breakdown, _ = loss_h(targets, preds, k, weights)
    return breakdown, used_union


def _giou_gradient(b, t):
    # gradient of giou(b, t) with respect to b's (cx, cy, w, h), t held fixed
    x0, y0, x1, y1 = to_corners(b)
    tx0, ty0, tx1, ty1 = to_corners(t)
    iw_raw = min(x1, tx1) - max(x0, tx0)
    ih_raw = min(y1, ty1) - max(y0, ty0)
    iw, ih = max(0.0, iw_raw), max(0.0, ih_raw)
    inter = iw * ih
    union = (x1 - x0) * (y1 - y0) + (tx1 - tx0) * (ty1 - ty0) - inter
    cw = max(x1, tx1) - min(x0, tx0)
    ch = max(y1, ty1) - min(y0, ty0)
    enclose = cw * ch
    if enclose <= 0 or union <= 0:
        return np.zeros(4)
    # derivatives with respect to the corners (x0, y0, x1, y1)
    d_iw = np.array([-float(x0 >= tx0), 0.0, float(x1 <= tx1), 0.0]) if iw_raw > 0 else np.zeros(4)
    d_ih = np.array([0.0, -float(y0 >= ty0), 0.0, float(y1 <= ty1)]) if ih_raw > 0 else np.zeros(4)
    d_inter = d_iw * ih + d_ih * iw
    d_area = np.array([-(y1 - y0), -(x1 - x0), y1 - y0, x1 - x0])
    d_enclose = np.array([-float(x0 <= tx0) * ch, -float(y0 <= ty0) * cw,
                          float(x1 >= tx1) * ch, float(y1 >= ty1) * cw])
    d_corners = (d_inter * (1 / union + inter / union ** 2 - 1 / enclose) +
                 d_area * (1 / enclose - inter / union ** 2) -
                 d_enclose * (union / enclose ** 2))
    return np.array([d_corners[0] + d_corners[2],
                     d_corners[1] + d_corners[3],
                     (d_corners[2] - d_corners[0]) / 2,
                     (d_corners[3] - d_corners[1]) / 2])


def _pair_gradient(target, pred, w):
    # gradient of the weighted pair loss with respect to (cx, cy, w, h, l_obj, l_noobj)
    grad = np.zeros(6)
    p = objectness_prob(pred.logits)
    unclamped = PROB_EPS < p < 1 - PROB_EPS
    if target.is_object:
        if unclamped:
            grad[4:] = w.lambda_cls * np.array([-(1 - p), 1 - p])
        grad[:4] = (w.lambda_box * np.sign(np.subtract(pred.box, target.box)) -
                    w.lambda_giou * _giou_gradient(pred.box, target.box))
    elif unclamped:
        grad[4:] = w.lambda_cls * np.array([p, -p])
    return grad


def _assignment_gradient(targets, preds, permutation, w):
    k = len(preds)
    grads = [_pair_gradient(targets[permutation[i]], pred, w) for i, pred in enumerate(preds)]
    return np.array(grads).reshape(k, 6) / k


def grad_loss_h(B, preds, k=DEFAULT_K, weights=None):
    """Analytic gradient of the total :func:`loss_h` with respect to every prediction parameter.

    The matching is computed first and held constant. The L1 subgradient at 0 is 0, and the
    gradient through an active probability clamp is 0.

    Returns
    -------
    grad : array, shape (k, 6)
        Rows follow ``preds``; columns are ``(cx, cy, w, h, l_obj, l_noobj)``.
    """
    w = _check_weights(weights)
    preds = _check_preds(preds, k)
    targets = pad_targets(B, k)
    match = hungarian(_cost_matrix(targets, preds, w))
    return _assignment_gradient(targets, preds, match.permutation, w)


def _with_param(pred, j, value):
    params = list(pred.box) + list(pred.logits)
    params[j] = value
    return PredBox(Box(*params[:4]), tuple(params[4:]))


def _branch_signature(target, pred):
    # every comparison the pair loss branches on
    p = objectness_prob(pred.logits)
    signature = (p <= PROB_EPS, p >= 1 - PROB_EPS)
    if not target.is_object:
        return signature
    x0, y0, x1, y1 = to_corners(pred.box)
    tx0, ty0, tx1, ty1 = to_corners(target.box)
    return signature + tuple(np.sign(np.subtract(pred.box, target.box))) + (
        x0 >= tx0, x0 <= tx0, x1 >= tx1, x1 <= tx1, y0 >= ty0, y0 <= ty0, y1 >= ty1, y1 <= ty1,
        min(x1, tx1) - max(x0, tx0) > 0, min(y1, ty1) - max(y0, ty0) > 0)


def finite_diff_check(B, preds, k=DEFAULT_K, weights=None, step=1e-5):
    """Compare :func:`grad_loss_h` against central finite differences.

    The matching is frozen at the unperturbed configuration. A parameter is skipped when moving it
    by ``2 * step`` in either direction changes any branch of the pair loss (L1 kinks, GIoU
    min/max switches, empty intersections, the probability clamp).

    Parameters
    ----------
    B, preds, k, weights
        As in :func:`loss_h`.

    step : float, optional (default=1e-5)

    Returns
    -------
    error : float
        Worst error over the checked parameters: relative when either gradient exceeds 1e-3 in
        magnitude, absolute otherwise.
    """
    if not step > 0:
        raise ValueError("The step must be positive, got {0}.".format(step))
    w = _check_weights(weights)
    preds = _check_preds(preds, k)
    targets = pad_targets(B, k)
    permutation = hungarian(_cost_matrix(targets, preds, w)).permutation
    analytic = _assignment_gradient(targets, preds, permutation, w)
    worst = 0.0
    for i, pred in enumerate(preds):
        target = targets[permutation[i]]
        signature = _branch_signature(target, pred)
        params = list(pred.box) + list(pred.logits)
        for j in range(6):
            if any(_branch_signature(target, _with_param(pred, j, params[j] + s)) != signature
                   for s in (-2 * step, 2 * step)):
                continue
            plus = match_cost(target, _with_param(pred, j, params[j] + step), w)
            minus = match_cost(target, _with_param(pred, j, params[j] - step), w)
            numeric = (plus - minus) / (2 * step * k)
            scale = max(abs(analytic[i, j]), abs(numeric))
            error = abs(analytic[i, j] - numeric)
            worst = max(worst, error / scale if scale >= GRAD_ABS_FLOOR else error)
    return worst
