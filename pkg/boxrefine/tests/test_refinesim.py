# Copyright (c) boxrefine contributors. All rights reserved.
# Licensed under the MIT License.

import unittest
from unittest import mock
import numpy as np
import pytest
from sklearn.exceptions import NotFittedError
from boxrefine.geometry import Box, ScoredBox, iou, objectness_prob
from boxrefine.heatmap import connected_components, binarize, extract_boxes
from boxrefine.refinesim import (Calibration, Schedule, check_blob_params, render, render_backward, heatmap_moments,
                                 soft_boxes, soft_boxes_backward, reg_loss_f, phase1_fit, phase2_refine, run_demo,
                                 random_blob_params, SurrogateDetector, HeatmapRefiner)
from boxrefine.utilities import DataError, NumericalError
from boxrefine.dgp import dgp_blob_fixture, dgp_plateau_heatmap

FAST = Schedule(phase1_iters=50, phase2_iters=300, seed=0)


def numeric_gradient(f, x, step=1e-6):
    grad = np.zeros_like(x)
    for index in np.ndindex(*x.shape):
        up, down = x.copy(), x.copy()
        up[index] += step
        down[index] -= step
        grad[index] = (f(up) - f(down)) / (2 * step)
    return grad


def teacher_box(center, size=0.2):
    return [ScoredBox(Box(center, center, size, size), 1.0)]


class TestRendering(unittest.TestCase):

    def test_render(self):
        M = render([[.5, .5, .1, .1, 1.]], 15, 15)
        assert M.shape == (15, 15)
        assert np.unravel_index(np.argmax(M), M.shape) == (7, 7)
        assert M.max() == 1.0 and M.min() >= 0
        assert not render([[.5, .5, .1, .1, 0.]], 8, 6).any()
        # overlapping blobs are clamped
        assert render([[.5, .5, .1, .1, 1.], [.5, .5, .1, .1, 1.]], 9, 9).max() == 1.0
        two = render([[.25, .25, .05, .05, 1.], [.75, .75, .05, .05, 1.]], 64, 64)
        assert connected_components(binarize(two))[1] == 2

    def test_check_blob_params(self):
        assert check_blob_params([.5, .5, .1, .1, 1.]).shape == (1, 5)
        with self.assertRaises(ValueError):
            check_blob_params([[.5, .5, .1, 1.]])
        with self.assertRaises(ValueError):
            check_blob_params([[.5, .5, 0., .1, 1.]])
        with self.assertRaises(DataError):
            check_blob_params([[np.nan, .5, .1, .1, 1.]])

    def test_render_backward(self):
        rs = np.random.RandomState(123)
        params = np.array([[.4, .45, .12, .08, .5], [.6, .55, .07, .1, .4]])
        G = rs.normal(size=(12, 10))
        analytic = render_backward(params, 10, 12, G)
        numeric = numeric_gradient(lambda p: np.sum(G * render(p, 10, 12)), params)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-7)

    def test_render_backward_clamp(self):
        params = np.array([[.5, .5, 2., 2., 1.], [.5, .5, 2., 2., 1.]])
        grad = render_backward(params, 5, 5, np.ones((5, 5)))
        # every pixel is clamped
        np.testing.assert_array_equal(grad, 0)


class TestSurrogate(unittest.TestCase):

    def test_uniform_map(self):
        pred = soft_boxes(np.full((64, 64), 0.5))
        np.testing.assert_allclose(pred.box, (.5, .5, 1., 1.), atol=1e-3)
        self.assertAlmostEqual(objectness_prob(pred.logits), 0.5 / 0.51)
        with self.assertRaises(DataError):
            soft_boxes(np.zeros((4, 4)))

    def test_rectangle_extent(self):
        M, (truth,) = dgp_plateau_heatmap(48, 48, 1, random_state=3, min_size=12)
        pred = soft_boxes(np.where(M > 0, 1.0, 0.0))
        assert iou(pred.box, truth) > 0.95

    def test_moments(self):
        M = np.zeros((4, 4))
        M[1, 2] = 1.0
        moments = heatmap_moments(M)
        assert moments.mass == 1.0
        self.assertAlmostEqual(moments.mean_x, 2.5 / 4)
        self.assertAlmostEqual(moments.mean_y, 1.5 / 4)
        assert moments.std_x < 1e-5

    def test_calibration(self):
        calibration = Calibration([1, 1, 2, 2], [.1, 0, 0, 0])
        moments = heatmap_moments(np.full((8, 8), 0.3))
        box = calibration.apply(moments)
        self.assertAlmostEqual(box.cx, .6)
        self.assertAlmostEqual(box.w, 2 * moments.std_x)
        with self.assertRaises(ValueError):
            Calibration([1, 1, 0, 1])
        with self.assertRaises(ValueError):
            Calibration([1, 1, 1])

    def test_soft_boxes_backward(self):
        rs = np.random.RandomState(7)
        M = rs.uniform(0.1, 0.9, size=(6, 7))
        calibration = Calibration([1.1, .9, 3., 3.5], [.01, -.02, 0, 0])
        g = np.array([.3, -.7, 1.2, .4, -.5, .8])
        analytic = soft_boxes_backward(M, calibration, g)

        def f(X):
            pred = soft_boxes(X, calibration)
            return g @ np.array(list(pred.box) + list(pred.logits))

        np.testing.assert_allclose(analytic, numeric_gradient(f, M), rtol=1e-5, atol=1e-7)

    def test_reg_loss_f(self):
        M = np.full((3, 4), .25)
        assert reg_loss_f(M, M) == 0
        assert reg_loss_f(np.ones((2, 2)), np.zeros((2, 2))) == 1
        with self.assertRaises(ValueError):
            reg_loss_f(np.ones((2, 2)), np.ones((2, 3)))


class TestPhaseOne(unittest.TestCase):

    def test_fit_on_plateaus(self):
        maps = [dgp_plateau_heatmap(48, 48, 1, random_state=i, min_size=6)[0] for i in range(6)]
        calibration, trace = phase1_fit(maps, schedule=Schedule(phase1_iters=100))
        assert len(trace) == 101
        assert trace.min() <= trace[0]
        for M in maps:
            (target,) = extract_boxes(M)
            assert iou(soft_boxes(M, calibration).box, target.box) >= 0.9

    def test_deterministic(self):
        maps = [render(p, 32, 32) for p in random_blob_params(4, 5)]
        first, second = phase1_fit(maps, schedule=FAST), phase1_fit(maps, schedule=FAST)
        np.testing.assert_array_equal(first[1], second[1])
        np.testing.assert_array_equal(first[0].scales, second[0].scales)

    def test_empty_dataset(self):
        with self.assertRaises(ValueError) as cm:
            phase1_fit([])
        assert str(cm.exception) == 'empty dataset'
        with self.assertRaises(ValueError):
            with self.assertWarns(UserWarning):
                phase1_fit([np.zeros((8, 8))])

    def test_surrogate_detector(self):
        maps = [render(p, 32, 32) for p in random_blob_params(1, 4)]
        detector = SurrogateDetector(n_iter=10)
        with self.assertRaises(NotFittedError):
            detector.predict(maps[0])
        detector.fit(maps)
        assert len(detector.loss_trace_) == 11
        assert detector.predict(maps[0]).box.w > 0
        assert detector.get_params()['n_iter'] == 10


class TestPhaseTwo(unittest.TestCase):

    def test_demo_moves_toward_teacher(self):
        blobs, target_blobs, width, height = dgp_blob_fixture()
        result = run_demo(blobs, width, height, target_blobs=target_blobs, schedule=FAST)
        trace = result.trace
        assert len(trace.total) == FAST.phase2_iters
        assert trace.total[-1] <= 0.5 * trace.total[0]
        assert result.refined_iou - result.initial_iou >= 0.2
        (target,) = result.teacher
        start = np.hypot(*np.subtract(trace.centers[0], (target.box.cx, target.box.cy)))
        end = np.hypot(*np.subtract(trace.centers[-1], (target.box.cx, target.box.cy)))
        assert end < start
        assert len(result.phase1_trace) == FAST.phase1_iters + 1

    def test_demo_is_deterministic(self):
        blobs, target_blobs, width, height = dgp_blob_fixture()
        schedule = Schedule(phase1_iters=10, phase2_iters=40, seed=11)
        first = run_demo(blobs, width, height, target_blobs=target_blobs, schedule=schedule)
        second = run_demo(blobs, width, height, target_blobs=target_blobs, schedule=schedule)
        for a, b in zip(first.trace, second.trace):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(first.params, second.params)
        with self.assertRaises(ValueError):
            run_demo(blobs, width, height)

    def test_regularizer_limits_motion(self):
        blobs, _, width, height = dgp_blob_fixture()
        schedule = Schedule(phase2_iters=200)
        start = np.array(blobs[0, :2])
        _, trace = phase2_refine(blobs, teacher_box(.6), width, height, schedule=schedule, reg_weight=200.)
        assert np.hypot(*(np.array(trace.centers[-1]) - trace.centers[0])) < 0.05
        params, trace = phase2_refine(blobs, teacher_box(.6), width, height, schedule=schedule, reg_weight=0.)
        assert np.hypot(*(params[0, :2] - start)) > 0.2

    def test_union_branch_record(self):
        blobs, _, width, height = dgp_blob_fixture()
        teacher = teacher_box(.6) + teacher_box(.3)
        _, trace = phase2_refine(blobs, teacher, width, height, schedule=Schedule(phase2_iters=50), union_prob=1.)
        assert trace.union.all()
        _, trace = phase2_refine(blobs, teacher, width, height, schedule=Schedule(phase2_iters=50), union_prob=0.)
        assert not trace.union.any()
        _, trace = phase2_refine(blobs, teacher, width, height, schedule=Schedule(phase2_iters=0))
        assert len(trace.total) == 0

    def test_divergence(self):
        blobs, _, width, height = dgp_blob_fixture()
        with mock.patch('boxrefine.refinesim.render_backward', return_value=np.full((1, 5), np.inf)):
            with self.assertRaises(NumericalError) as cm:
                phase2_refine(blobs, teacher_box(.6), width, height, schedule=Schedule(phase2_iters=5))
        assert cm.exception.iteration == 0
        with self.assertRaises(NumericalError) as cm:
            phase2_refine([[5., 5., .05, .05, 1.]], teacher_box(.6), width, height)
        assert cm.exception.iteration == 0

    def test_bad_arguments(self):
        blobs, _, width, height = dgp_blob_fixture()
        with self.assertRaises(ValueError) as cm:
            phase2_refine(blobs, [], width, height)
        assert str(cm.exception) == 'empty box set'
        with self.assertRaises(ValueError):
            phase2_refine(blobs, teacher_box(.6), width, height, reg_weight=-1)

    def test_heatmap_refiner(self):
        blobs, _, width, height = dgp_blob_fixture()
        refiner = HeatmapRefiner(n_iter=20, seed=3)
        with self.assertRaises(NotFittedError):
            refiner.transform()
        refiner.fit(blobs, teacher_box(.6))
        assert refiner.transform().shape == (height, width)
        assert len(refiner.trace_.total) == 20
        assert refiner.params_[0, 0] > blobs[0, 0]

    @pytest.mark.slow
    def test_full_schedule(self):
        blobs, target_blobs, width, height = dgp_blob_fixture()
        result = run_demo(blobs, width, height, target_blobs=target_blobs)
        assert result.refined_iou - result.initial_iou >= 0.2
        assert result.trace.total[-1] <= 0.5 * result.trace.total[0]
