# Copyright (c) boxrefine contributors. All rights reserved.
# Licensed under the MIT License.

"""Desk-scale teacher/student refinement of parametric heatmaps.

The loop has two phases:

1. A box predictor ``h`` is fitted to the boxes that :func:`~boxrefine.heatmap.extract_boxes`
   produces from a set of heatmaps (:func:`phase1_fit`).
2. ``h`` is frozen and the heatmap itself is refined by gradient descent so that ``h``'s box
   moves toward a teacher box set, under the union-box loss plus a penalty that keeps the map
   close to its initial value (:func:`phase2_refine`).

Here heatmaps are sums of axis-aligned Gaussian blobs (:func:`render`) and ``h`` is a moment
predictor (:func:`soft_boxes`): the box center is the mass-weighted mean of the map, its size an
affine function of the mass-weighted standard deviation and its objectness logit grows with the
mean map value. Both are differentiable in closed form, so gradients flow from the box loss back
to the blob parameters. Updates are plain fixed-step gradient descent projected onto valid
parameters (standard deviations at least 1e-3, amplitudes in [1e-3, 1]).

The full generator objective also carries map-level CLIP terms with weights 64, 2 and 1 next to
the regularizer weight 1; only the box loss and the regularizer are reproduced here. Networks in
the original setting were trained with Adam (learning rates 1e-5 for ``h``, 1e-7 and 5e-7 for the
refined models, batch 36, weight decay 1e-4, 3000 + 10000 iterations); the fixed-step rates used
here suit the eight calibration parameters and the handful of blob parameters instead.
"""

import logging
import warnings
from collections import namedtuple
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from .geometry import Box, PredBox, ScoredBox, as_box, iou
from .heatmap import extract_boxes
from .matching import LossWeights, draw_union_branch, grad_loss_h, loss_h
from .utilities import check_heatmap, check_rng, DataError, NumericalError

logger = logging.getLogger(__name__)

MIN_SIGMA = 1e-3
MIN_AMPLITUDE = 1e-3
MIN_SCALE = 1e-3
# mean map value at which the objectness probability is one half
MASS_REFERENCE = 0.01
_VAR_EPS = 1e-12
_LOG_EVERY = 100

BLOB_FIELDS = ('mx', 'my', 'sx', 'sy', 'amplitude')


class Calibration(namedtuple('Calibration', ['scales', 'offsets'])):
    """Affine map from the moments ``(mean_x, mean_y, std_x, std_y)`` of a heatmap to a box.

    ``cx = scales[0] * mean_x + offsets[0]`` and likewise for ``cy``, ``w`` (from ``std_x``) and
    ``h`` (from ``std_y``). The default scales ``(1, 1, 2*sqrt(3), 2*sqrt(3))`` map a uniform
    rectangle exactly onto its extent.
    """
    __slots__ = ()

    def __new__(cls, scales=None, offsets=None):
        scales = np.array([1.0, 1.0, 2 * np.sqrt(3), 2 * np.sqrt(3)] if scales is None else scales, dtype=np.float64)
        offsets = np.zeros(4) if offsets is None else np.array(offsets, dtype=np.float64)
        if scales.shape != (4,) or offsets.shape != (4,):
            raise ValueError("A calibration needs 4 scales and 4 offsets.")
        if np.any(scales <= 0):
            raise ValueError("Calibration scales must be positive, got {0}.".format(scales))
        return super().__new__(cls, scales, offsets)

    def apply(self, moments):
        return Box(*(self.scales * _moment_vector(moments) + self.offsets))


class Schedule(namedtuple('Schedule', ['phase1_iters', 'phase2_iters', 'phase1_lr', 'phase2_lr', 'seed'])):
    """Iteration counts, fixed learning rates and the seed of the union-branch draws."""
    __slots__ = ()

    def __new__(cls, phase1_iters=300, phase2_iters=1000, phase1_lr=1e-3, phase2_lr=5e-4, seed=0):
        if phase1_iters < 0 or phase2_iters < 0:
            raise ValueError("Iteration counts must be non-negative.")
        if not (phase1_lr > 0 and phase2_lr > 0):
            raise ValueError("Learning rates must be positive.")
        return super().__new__(cls, int(phase1_iters), int(phase2_iters), float(phase1_lr), float(phase2_lr), seed)


Moments = namedtuple('Moments', ['mass', 'mean_x', 'mean_y', 'std_x', 'std_y'])

RefinementTrace = namedtuple('RefinementTrace', ['total', 'cls', 'box', 'giou', 'reg', 'union', 'centers'])
RefinementTrace.__doc__ = """Per-iteration record of phase 2, taken before each update: the objective,
its box-loss terms, the regularizer, whether the union branch ran and the predicted box center."""

DemoResult = namedtuple('DemoResult', ['calibration', 'phase1_trace', 'params', 'trace', 'teacher',
                                       'initial_box', 'refined_box', 'initial_iou', 'refined_iou'])


def _moment_vector(moments):
    return np.array([moments.mean_x, moments.mean_y, moments.std_x, moments.std_y])


def _pixel_centers(height, width):
    return (np.arange(width) + 0.5) / width, (np.arange(height) + 0.5) / height


def check_blob_params(params):
    """Validate blob parameters and return them as an array of shape (n_blobs, 5).

    Rows are ``(mx, my, sx, sy, amplitude)`` in normalized image coordinates.
    """
    params = np.array(params, dtype=np.float64, ndmin=2)
    if params.ndim != 2 or params.shape[1] != 5:
        raise ValueError("Blob parameters must have shape (n_blobs, 5), got {0}.".format(params.shape))
    if not np.all(np.isfinite(params)):
        raise DataError("Blob parameters must be finite.")
    if np.any(params[:, 2:4] <= 0):
        raise ValueError("Blob standard deviations must be positive.")
    return params


def _blob_factors(params, width, height):
    xs, ys = _pixel_centers(height, width)
    gx = np.exp(-(xs[None, :] - params[:, 0:1]) ** 2 / (2 * params[:, 2:3] ** 2))
    gy = np.exp(-(ys[None, :] - params[:, 1:2]) ** 2 / (2 * params[:, 3:4] ** 2))
    return xs, ys, gx, gy


def _blob_sum(params, width, height):
    _, _, gx, gy = _blob_factors(params, width, height)
    return np.einsum('b,by,bx->yx', params[:, 4], gy, gx)


def render(params, width, height):
    """Render Gaussian blobs at pixel centers, clamped to [0, 1].

    Parameters
    ----------
    params : array-like, shape (n_blobs, 5)
        ``(mx, my, sx, sy, amplitude)`` per blob, in normalized coordinates.

    width, height : int

    Returns
    -------
    M : array, shape (height, width)
    """
    return np.clip(_blob_sum(check_blob_params(params), width, height), 0.0, 1.0)


def render_backward(params, width, height, grad_map):
    """Pull a gradient with respect to the rendered map back to the blob parameters.

    Pixels where the clamp at 1 is active pass no gradient.

    Returns
    -------
    grad : array, shape (n_blobs, 5)
    """
    params = check_blob_params(params)
    xs, ys, gx, gy = _blob_factors(params, width, height)
    total = np.einsum('b,by,bx->yx', params[:, 4], gy, gx)
    g = np.where(total <= 1.0, grad_map, 0.0)
    dx = xs[None, :] - params[:, 0:1]
    dy = ys[None, :] - params[:, 1:2]
    sx, sy, amp = params[:, 2:3], params[:, 3:4], params[:, 4]
    # contractions of g against the separable factors of each blob
    base = np.einsum('yx,by,bx->b', g, gy, gx)
    along_x = np.einsum('yx,by,bx->b', g, gy, gx * dx / sx ** 2)
    along_y = np.einsum('yx,by,bx->b', g, gy * dy / sy ** 2, gx)
    spread_x = np.einsum('yx,by,bx->b', g, gy, gx * dx ** 2 / sx ** 3)
    spread_y = np.einsum('yx,by,bx->b', g, gy * dy ** 2 / sy ** 3, gx)
    return np.column_stack((amp * along_x, amp * along_y, amp * spread_x, amp * spread_y, base))


def heatmap_moments(M):
    """Mass and mass-weighted mean and standard deviation of a heatmap, in normalized coordinates."""
    M = check_heatmap(M)
    mass = M.sum()
    if not mass > 0:
        raise DataError("Cannot predict a box from a zero-mass heatmap.")
    xs, ys = _pixel_centers(*M.shape)
    px, py = M.sum(axis=0) / mass, M.sum(axis=1) / mass
    mean_x, mean_y = px @ xs, py @ ys
    std_x = np.sqrt(px @ (xs - mean_x) ** 2 + _VAR_EPS)
    std_y = np.sqrt(py @ (ys - mean_y) ** 2 + _VAR_EPS)
    return Moments(float(mass), float(mean_x), float(mean_y), float(std_x), float(std_y))


def _objectness_logits(mass, size):
    return (float(np.log(mass / size / MASS_REFERENCE)), 0.0)


def soft_boxes(M, calibration=None):
    """Differentiable single-box prediction from the moments of a heatmap.

    Parameters
    ----------
    M : array-like, shape (height, width)
        Heatmap with positive mass.

    calibration : :class:`Calibration` or None, optional
        Defaults to ``Calibration()``.

    Returns
    -------
    pred : :class:`~boxrefine.geometry.PredBox`
        The objectness probability is ``mean(M) / (mean(M) + 0.01)``.
    """
    calibration = Calibration() if calibration is None else calibration
    M = check_heatmap(M)
    moments = heatmap_moments(M)
    return PredBox(calibration.apply(moments), _objectness_logits(moments.mass, M.size))


def soft_boxes_backward(M, calibration, grad_pred):
    """Pull a gradient with respect to ``(cx, cy, w, h, l_obj, l_noobj)`` back to the map values.

    Returns
    -------
    grad_map : array, shape (height, width)
    """
    calibration = Calibration() if calibration is None else calibration
    M = check_heatmap(M)
    moments = heatmap_moments(M)
    xs, ys = _pixel_centers(*M.shape)
    g = np.asarray(grad_pred, dtype=np.float64)
    s = calibration.scales
    dx, dy = xs - moments.mean_x, ys - moments.mean_y
    var_x, var_y = moments.std_x ** 2 - _VAR_EPS, moments.std_y ** 2 - _VAR_EPS
    along_x = g[0] * s[0] * dx + g[2] * s[2] * (dx ** 2 - var_x) / (2 * moments.std_x)
    along_y = g[1] * s[1] * dy + g[3] * s[3] * (dy ** 2 - var_y) / (2 * moments.std_y)
    return (along_y[:, None] + along_x[None, :] + g[4]) / moments.mass


def reg_loss_f(M, M0):
    """Mean squared difference between two maps of identical shape."""
    M, M0 = np.asarray(M, dtype=np.float64), np.asarray(M0, dtype=np.float64)
    if M.shape != M0.shape:
        raise ValueError("Maps must have identical shapes, got {0} and {1}.".format(M.shape, M0.shape))
    return float(np.mean((M - M0) ** 2))


def _check_teacher(teacher):
    teacher = [b if isinstance(b, ScoredBox) else ScoredBox(as_box(b), 1.0) for b in teacher]
    if not teacher:
        raise ValueError("empty box set")
    return teacher


def phase1_fit(dataset, calibration=None, schedule=None, weights=None):
    """Fit the calibration of the moment predictor to the boxes extracted from a set of heatmaps.

    Minimizes the mean single-box :func:`~boxrefine.matching.loss_h` between
    ``extract_boxes(M)`` and ``soft_boxes(M, calibration)`` by fixed-step gradient descent and
    returns the best iterate, so the final loss never exceeds the initial one.

    Parameters
    ----------
    dataset : list of array-like
        Heatmaps; maps without any extracted box are skipped with a warning.

    calibration : :class:`Calibration` or None, optional
        Starting point.

    schedule : :class:`Schedule` or None, optional
        ``phase1_iters`` and ``phase1_lr`` are used.

    weights : :class:`~boxrefine.matching.LossWeights` or None, optional

    Returns
    -------
    calibration : :class:`Calibration`

    trace : array, shape (phase1_iters + 1,)
        Mean loss of every iterate, the starting point included.
    """
    calibration = Calibration() if calibration is None else calibration
    schedule = Schedule() if schedule is None else schedule
    weights = LossWeights() if weights is None else weights
    samples = []
    for index, M in enumerate(dataset):
        M = check_heatmap(M)
        targets = extract_boxes(M)
        if not targets:
            warnings.warn("Heatmap {0} yields no teacher box and is skipped.".format(index), UserWarning)
            continue
        moments = heatmap_moments(M)
        samples.append((targets, _moment_vector(moments), _objectness_logits(moments.mass, M.size)))
    if not samples:
        raise ValueError("empty dataset")

    def loss_and_grad(scales, offsets):
        loss, g_scales, g_offsets = 0.0, np.zeros(4), np.zeros(4)
        for targets, moment, logits in samples:
            pred = PredBox(Box(*(scales * moment + offsets)), logits)
            loss += loss_h(targets, [pred], 1, weights)[0].total
            g_box = grad_loss_h(targets, [pred], 1, weights)[0, :4]
            g_scales += g_box * moment
            g_offsets += g_box
        return loss / len(samples), g_scales / len(samples), g_offsets / len(samples)

    scales, offsets = calibration.scales.copy(), calibration.offsets.copy()
    best = (np.inf, scales, offsets)
    trace = []
    for it in range(schedule.phase1_iters + 1):
        loss, g_scales, g_offsets = loss_and_grad(scales, offsets)
        if not np.isfinite(loss):
            raise NumericalError("Non-finite loss at phase 1 iteration {0}".format(it), iteration=it)
        trace.append(loss)
        if loss < best[0]:
            best = (loss, scales, offsets)
        if it % _LOG_EVERY == 0:
            logger.debug("phase 1 iteration %d: loss %.6g", it, loss)
        if it < schedule.phase1_iters:
            scales = np.maximum(scales - schedule.phase1_lr * g_scales, MIN_SCALE)
            offsets = offsets - schedule.phase1_lr * g_offsets
    logger.info("phase 1 done: loss %.6g -> %.6g over %d maps", trace[0], best[0], len(samples))
    return Calibration(best[1], best[2]), np.array(trace)


def _project(params):
    params = params.copy()
    params[:, 2:4] = np.maximum(params[:, 2:4], MIN_SIGMA)
    params[:, 4] = np.clip(params[:, 4], MIN_AMPLITUDE, 1.0)
    return params


def phase2_refine(params, teacher, width, height, calibration=None, schedule=None, reg_weight=1.0,
                  union_prob=0.5, weights=None):
    """Refine blob parameters so the frozen predictor's box moves toward a teacher box set.

    Each iteration draws the union branch from a :class:`~boxrefine.utilities.SplitMix64` seeded
    with ``schedule.seed`` and descends
    ``loss_h_bu(teacher, soft_boxes(render(params)), k=1) + reg_weight * reg_loss_f(render(params), M0)``
    where ``M0`` is the initial rendering.

    Parameters
    ----------
    params : array-like, shape (n_blobs, 5)

    teacher : non-empty list of :class:`~boxrefine.geometry.ScoredBox`

    width, height : int
        Rendering size.

    calibration : :class:`Calibration` or None, optional
        The frozen predictor.

    schedule : :class:`Schedule` or None, optional
        ``phase2_iters``, ``phase2_lr`` and ``seed`` are used.

    reg_weight : float, optional (default=1)

    union_prob : float, optional (default=0.5)

    weights : :class:`~boxrefine.matching.LossWeights` or None, optional

    Returns
    -------
    params : array, shape (n_blobs, 5)

    trace : :class:`RefinementTrace`

    Raises
    ------
    NumericalError
        When the objective becomes non-finite; ``iteration`` holds the iteration index.
    """
    params = _project(check_blob_params(params))
    teacher = _check_teacher(teacher)
    calibration = Calibration() if calibration is None else calibration
    schedule = Schedule() if schedule is None else schedule
    weights = LossWeights() if weights is None else weights
    if reg_weight < 0:
        raise ValueError("reg_weight must be non-negative, got {0}.".format(reg_weight))
    rng = check_rng(schedule.seed)
    M0 = render(params, width, height)
    records = []
    for it in range(schedule.phase2_iters):
        M = render(params, width, height)
        try:
            pred = soft_boxes(M, calibration)
        except DataError:
            # every blob has left the frame
            raise NumericalError("Heatmap mass vanished at phase 2 iteration {0}".format(it), iteration=it)
        targets, used_union = draw_union_branch(teacher, rng, union_prob)
        breakdown, _ = loss_h(targets, [pred], 1, weights)
        reg = reg_loss_f(M, M0)
        total = breakdown.total + reg_weight * reg
        if not np.isfinite(total):
            raise NumericalError("Non-finite loss at phase 2 iteration {0}".format(it), iteration=it)
        records.append((total, breakdown.cls, breakdown.box, breakdown.giou, reg, used_union,
                        (pred.box.cx, pred.box.cy)))
        if it % _LOG_EVERY == 0:
            logger.debug("phase 2 iteration %d: total %.6g (reg %.6g, union %s)", it, total, reg, used_union)
        grad_map = (soft_boxes_backward(M, calibration, grad_loss_h(targets, [pred], 1, weights)[0]) +
                    reg_weight * 2 * (M - M0) / M.size)
        step = render_backward(params, width, height, grad_map)
        if not np.all(np.isfinite(step)):
            raise NumericalError("Non-finite gradient at phase 2 iteration {0}".format(it), iteration=it)
        params = _project(params - schedule.phase2_lr * step)
    if records:
        logger.info("phase 2 done: total %.6g -> %.6g", records[0][0], records[-1][0])
    columns = list(zip(*records)) if records else [()] * 7
    trace = RefinementTrace(*(np.array(c, dtype=bool if i == 5 else np.float64) for i, c in enumerate(columns)))
    return params, trace


class SurrogateDetector(BaseEstimator):
    """Moment-based box predictor fitted on heatmaps (phase 1).

    Parameters
    ----------
    calibration : :class:`Calibration` or None, optional
        Starting calibration.

    n_iter : int, optional (default=300)

    learning_rate : float, optional (default=1e-3)

    weights : :class:`~boxrefine.matching.LossWeights` or None, optional
    """

    def __init__(self, calibration=None, n_iter=300, learning_rate=1e-3, weights=None):
        self.calibration = calibration
        self.n_iter = n_iter
        self.learning_rate = learning_rate
        self.weights = weights

    def fit(self, X):
        """Fit the calibration on a list of heatmaps.

        Returns
        -------
        self
        """
        schedule = Schedule(phase1_iters=self.n_iter, phase1_lr=self.learning_rate)
        self.calibration_, self.loss_trace_ = phase1_fit(X, self.calibration, schedule, self.weights)
        return self

    def predict(self, M):
        """Predict the single box of a heatmap."""
        if not hasattr(self, 'calibration_'):
            raise NotFittedError('This {0} instance is not fitted yet.'.format(self.__class__.__name__))
        return soft_boxes(M, self.calibration_)


class HeatmapRefiner(BaseEstimator):
    """Phase-2 refinement of blob parameters against a teacher box set.

    Parameters
    ----------
    calibration : :class:`Calibration` or None, optional
        Frozen predictor; a fitted :class:`SurrogateDetector`'s ``calibration_`` typically.

    width, height : int, optional (default=64)

    n_iter : int, optional (default=1000)

    learning_rate : float, optional (default=5e-4)

    reg_weight : float, optional (default=1)

    union_prob : float, optional (default=0.5)

    seed : int or None, optional
        Seed of the union-branch draws; defaults to ``BBR_SEED`` or 0.

    weights : :class:`~boxrefine.matching.LossWeights` or None, optional
    """

    def __init__(self, calibration=None, width=64, height=64, n_iter=1000, learning_rate=5e-4, reg_weight=1.0,
                 union_prob=0.5, seed=None, weights=None):
        self.calibration = calibration
        self.width = width
        self.height = height
        self.n_iter = n_iter
        self.learning_rate = learning_rate
        self.reg_weight = reg_weight
        self.union_prob = union_prob
        self.seed = seed
        self.weights = weights

    def fit(self, params, teacher):
        """Refine ``params`` toward ``teacher``; sets ``params_`` and ``trace_``.

        Returns
        -------
        self
        """
        seed = check_rng(self.seed).seed
        schedule = Schedule(phase2_iters=self.n_iter, phase2_lr=self.learning_rate, seed=seed)
        self.params_, self.trace_ = phase2_refine(params, teacher, self.width, self.height, self.calibration,
                                                  schedule, self.reg_weight, self.union_prob, self.weights)
        return self

    def transform(self, params=None):
        """Render the refined parameters (or the given ones) at the refiner's resolution."""
        if params is None:
            if not hasattr(self, 'params_'):
                raise NotFittedError('This {0} instance is not fitted yet.'.format(self.__class__.__name__))
            params = self.params_
        return render(params, self.width, self.height)


def random_blob_params(rng, n_maps, center_range=(0.25, 0.75), sigma_range=(0.04, 0.1)):
    """Draw single-blob parameter sets of unit amplitude from a :class:`~boxrefine.utilities.SplitMix64`."""
    rng = check_rng(rng)

    def draw(bounds):
        return bounds[0] + (bounds[1] - bounds[0]) * rng.uniform()

    return [np.array([[draw(center_range), draw(center_range), draw(sigma_range), draw(sigma_range), 1.0]])
            for _ in range(n_maps)]


def _top_box(M):
    boxes = extract_boxes(M)
    return boxes[0].box if boxes else None


def _box_iou(box, teacher):
    return 0.0 if box is None else max(iou(box, t) for t in teacher)


def run_demo(blobs, width=64, height=64, teacher=None, target_blobs=None, n_train=8, schedule=None,
             reg_weight=1.0, union_prob=0.5, weights=None):
    """Run both phases on a blob fixture.

    Phase 1 fits the predictor on ``n_train`` random single-blob maps drawn from the schedule's
    seed; phase 2 refines ``blobs`` toward ``teacher`` (or toward the boxes extracted from the
    rendering of ``target_blobs`` when no teacher is given).

    Returns
    -------
    result : :class:`DemoResult`
        IoUs compare the top extracted box of the initial and refined renderings with the teacher.
    """
    schedule = Schedule() if schedule is None else schedule
    if teacher is None:
        if target_blobs is None:
            raise ValueError("Either a teacher box set or target blobs are needed.")
        teacher = extract_boxes(render(target_blobs, width, height))
    teacher = _check_teacher(teacher)
    train = [render(p, width, height) for p in random_blob_params(check_rng(schedule.seed).spawn(), n_train)]
    calibration, phase1_trace = phase1_fit(train, Calibration(), schedule, weights)
    params, trace = phase2_refine(blobs, teacher, width, height, calibration, schedule, reg_weight, union_prob,
                                  weights)
    initial_box = _top_box(render(blobs, width, height))
    refined_box = _top_box(render(params, width, height))
    return DemoResult(calibration, phase1_trace, params, trace, teacher, initial_box, refined_box,
                      _box_iou(initial_box, teacher), _box_iou(refined_box, teacher))
