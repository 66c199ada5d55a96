# Copyright (c) boxrefine contributors. All rights reserved.
# Licensed under the MIT License.

import unittest
import numpy as np
import pytest
from boxrefine.geometry import ScoredBox, from_corners, iou, to_corners
from boxrefine.heatmap import (binarize, connected_components, trace_contours, boxes_from_contours, nms,
                               extract_boxes, enclosing_prediction_box, extract_boxes_batch, MEAN_IN_BOX,
                               SUM_IN_CONTOUR)
from boxrefine.utilities import EmptyPredictionError
from boxrefine.dgp import dgp_plateau_heatmap, dgp_scored_boxes


def plateau(shape, x0, y0, x1, y1, value=1.0, M=None):
    M = np.zeros(shape) if M is None else M
    M[y0:y1, x0:x1] = value
    return M


def assert_closed_walk(points):
    # successive points (and last/first) are distinct 8-neighbours
    if len(points) == 1:
        return
    steps = np.abs(np.diff(np.vstack([points, points[:1]]), axis=0))
    assert np.all(steps.max(axis=1) == 1)


class TestHeatmap(unittest.TestCase):

    def test_binarize(self):
        mask = binarize([[0.2, 0.8], [0.4, 0.1]])
        np.testing.assert_array_equal(mask, [[False, True], [True, False]])
        assert binarize(np.full((3, 3), 0.3)).all()
        assert not binarize(np.zeros((3, 3))).any()
        for ratio in (0, -0.5, 1.5):
            with self.assertRaises(ValueError):
                binarize(np.ones((2, 2)), ratio)

    def test_connected_components(self):
        _, n = connected_components([[1, 1, 0], [0, 0, 1]], connectivity=4)
        assert n == 2
        assert connected_components([[1, 0], [0, 1]], connectivity=8)[1] == 1
        assert connected_components([[1, 0], [0, 1]], connectivity=4)[1] == 2
        labels, n = connected_components(np.zeros((3, 3), dtype=bool))
        assert n == 0 and not labels.any()
        with self.assertRaises(ValueError):
            connected_components([[1]], connectivity=6)

    def test_component_numbering_follows_raster_order(self):
        mask = np.zeros((6, 6), dtype=bool)
        mask[4, 0] = True  # met last in raster order
        mask[0, 4] = True
        mask[2, 2] = True
        labels, n = connected_components(mask)
        assert n == 3
        assert labels[0, 4] == 1 and labels[2, 2] == 2 and labels[4, 0] == 3

    def test_trace_contours(self):
        contours = trace_contours(np.ones((2, 2), dtype=bool))
        assert len(contours) == 1
        pts = contours[0].points
        assert (pts[:, 0].min(), pts[:, 0].max(), pts[:, 1].min(), pts[:, 1].max()) == (0, 1, 0, 1)

        mask = np.zeros((5, 5), dtype=bool)
        mask[1:4, 1:4] = True
        (contour,) = trace_contours(mask)
        border = {(x, y) for x in range(1, 4) for y in range(1, 4)} - {(2, 2)}
        assert len(contour.points) == 8
        assert {tuple(p) for p in contour.points} == border
        assert_closed_walk(contour.points)

        single = np.zeros((4, 4), dtype=bool)
        single[2, 1] = True
        (contour,) = trace_contours(single)
        np.testing.assert_array_equal(contour.points, [[1, 2]])

    def test_trace_contours_shapes(self):
        mask = np.zeros((8, 10), dtype=bool)
        mask[1:3, 1:5] = True
        mask[5:7, 6:9] = True
        contours = trace_contours(mask)
        assert [c.label for c in contours] == [1, 2]
        extents = [(c.points[:, 0].min(), c.points[:, 1].min(), c.points[:, 0].max(), c.points[:, 1].max())
                   for c in contours]
        assert extents == [(1, 1, 4, 2), (6, 5, 8, 6)]
        # a ring only yields its outer border
        ring = np.zeros((7, 7), dtype=bool)
        ring[1:6, 1:6] = True
        ring[2:5, 2:5] = False
        (contour,) = trace_contours(ring)
        assert {tuple(p) for p in contour.points} == {(x, y) for x in range(1, 6) for y in range(1, 6)
                                                     if x in (1, 5) or y in (1, 5)}
        assert_closed_walk(contour.points)
        # a one-pixel-wide line is walked out and back
        line = np.zeros((3, 6), dtype=bool)
        line[1, 1:5] = True
        (contour,) = trace_contours(line)
        assert {tuple(p) for p in contour.points} == {(x, 1) for x in range(1, 5)}
        assert_closed_walk(contour.points)

    def test_boxes_from_contours(self):
        M = plateau((10, 10), 2, 2, 5, 5)
        contours = trace_contours(binarize(M))
        (box,) = boxes_from_contours(contours, M, MEAN_IN_BOX)
        assert box.score == 1.0
        np.testing.assert_allclose(to_corners(box.box), (.2, .2, .5, .5))
        (box,) = boxes_from_contours(contours, M, SUM_IN_CONTOUR)
        assert box.score == 9.0
        assert boxes_from_contours([], M) == []
        with self.assertRaises(ValueError):
            boxes_from_contours(contours, M, 'median')

    def test_sum_in_contour_mixed_values(self):
        # an L-shaped region: the bounding box contains background, the contour does not
        M = np.zeros((6, 6))
        M[1, 1:4] = [0.6, 0.7, 0.8]
        M[2:4, 1] = [0.9, 1.0]
        contours = trace_contours(binarize(M))
        (box,) = boxes_from_contours(contours, M, SUM_IN_CONTOUR)
        self.assertAlmostEqual(box.score, 0.6 + 0.7 + 0.8 + 0.9 + 1.0)
        (box,) = boxes_from_contours(contours, M, MEAN_IN_BOX)
        self.assertAlmostEqual(box.score, (0.6 + 0.7 + 0.8 + 0.9 + 1.0) / 9)

    def test_sum_in_contour_nested_component(self):
        M = np.zeros((7, 7))
        M[1:6, 1:6] = 1.0
        M[2:5, 2:5] = 0.0
        M[3, 3] = 1.0
        contours = trace_contours(binarize(M))
        assert len(contours) == 2
        ring, dot = boxes_from_contours(contours, M, SUM_IN_CONTOUR)
        # the enclosed pixel counts toward the ring and also scores on its own
        assert ring.score == 17.0
        assert dot.score == 1.0
        np.testing.assert_allclose(to_corners(dot.box), (3 / 7, 3 / 7, 4 / 7, 4 / 7))

    def test_nms_rules(self):
        a = ScoredBox(from_corners(0, 0, 1, 1), 1.0)
        b = ScoredBox(from_corners(0, 0, 1, 0.5), 0.9)
        c = ScoredBox(from_corners(2, 2, 3, 3), 0.3)
        assert iou(a.box, b.box) == 0.5
        assert nms([c, b, a]) == [a]
        disjoint = [ScoredBox(from_corners(i, 0, i + 0.5, 1), 0.7) for i in range(4)]
        assert nms(disjoint) == disjoint
        assert nms([a]) == [a]
        assert nms([]) == []
        with self.assertRaises(ValueError):
            nms([ScoredBox(a.box, -1.0)])

    def test_nms_properties(self):
        np.random.seed(123)
        for trial in range(200):
            boxes = dgp_scored_boxes(np.random.randint(1, 15), random_state=trial)
            kept = nms(boxes)
            assert kept
            assert nms(kept) == kept
            shuffled = [boxes[i] for i in np.random.permutation(len(boxes))]
            assert nms(shuffled) == kept
            scores = [b.score for b in kept]
            assert scores == sorted(scores, reverse=True)

    def test_extract_boxes_examples(self):
        M = plateau((12, 12), 3, 4, 8, 10, 0.7)
        (box,) = extract_boxes(M)
        self.assertAlmostEqual(box.score, 0.7)
        np.testing.assert_allclose(to_corners(box.box), (3 / 12, 4 / 12, 8 / 12, 10 / 12))

        M = plateau((20, 20), 1, 1, 4, 4, 1.0)
        plateau((20, 20), 8, 8, 12, 12, 0.9, M)
        plateau((20, 20), 15, 15, 19, 19, 0.3, M)
        boxes = extract_boxes(M)
        np.testing.assert_allclose([b.score for b in boxes], [1.0, 0.9])

        # two overlapping plateaus form one component
        M = plateau((10, 10), 1, 1, 5, 4, 0.8)
        plateau((10, 10), 3, 2, 8, 7, 0.8, M)
        (box,) = extract_boxes(M)
        np.testing.assert_allclose(to_corners(box.box), (.1, .1, .8, .7))
        assert extract_boxes(np.zeros((5, 5))) == []

    def test_enclosing_prediction_box(self):
        M = plateau((10, 10), 2, 2, 5, 5)
        np.testing.assert_allclose(to_corners(enclosing_prediction_box(M)), (.2, .2, .5, .5))
        plateau((10, 10), 6, 6, 9, 9, 1.0, M)
        np.testing.assert_allclose(to_corners(enclosing_prediction_box(M)), (.2, .2, .9, .9))
        with self.assertRaises(EmptyPredictionError) as cm:
            enclosing_prediction_box(np.zeros((4, 4)))
        assert str(cm.exception) == 'empty prediction'

    @pytest.mark.slow
    def test_plateau_recovery(self):
        np.random.seed(123)
        for trial in range(100):
            n = np.random.randint(1, 4)
            M, truth = dgp_plateau_heatmap(64, 48, n, random_state=trial)
            boxes = extract_boxes(M)
            assert len(boxes) == n
            for t in truth:
                assert max(iou(b.box, t) for b in boxes) >= 0.9

    def test_extract_boxes_batch(self):
        maps = [dgp_plateau_heatmap(32, 32, 2, random_state=i)[0] for i in range(6)]
        assert extract_boxes_batch(maps, n_jobs=2) == [extract_boxes(M) for M in maps]
        assert extract_boxes_batch(maps, metric=True) == [enclosing_prediction_box(M) for M in maps]
