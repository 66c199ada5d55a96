# Copyright (c) boxrefine contributors. All rights reserved.
# Licensed under the MIT License.

import unittest
from unittest import mock
import numpy as np
import scipy.linalg
from boxrefine.geometry import Box, ScoredBox, from_corners, to_corners
from boxrefine.discovery import (lost_adjacency, lost_seed, lost_expand, lost_discover, lost_inverse_degree,
                                 tokencut_affinity, fiedler_vector, tokencut_discover, move_box, PatchGraph,
                                 LOST, TOKENCUT)
from boxrefine.utilities import DataError, EmptySegmentationError
from boxrefine.dgp import dgp_lost_fixture, dgp_planted_blocks


def row_grid(*features):
    return np.array([features], dtype=np.float64)


class TestLost(unittest.TestCase):

    def test_adjacency(self):
        graph = lost_adjacency(dgp_lost_fixture())
        assert graph.flavor == LOST
        np.testing.assert_array_equal(graph.degrees, [2, 2, 4, 4, 4, 4])
        assert lost_adjacency(row_grid([1, 0], [0, 1])).adjacency[0, 1] == 1
        assert lost_adjacency(row_grid([1, 0], [-1, 0])).adjacency[0, 1] == 0
        np.testing.assert_array_equal(graph.adjacency, graph.adjacency.T)

    def test_seed(self):
        assert lost_seed(lost_adjacency(dgp_lost_fixture())) == 0
        # a star: the center sees every leaf, the leaves repel each other
        angles = np.deg2rad([0, 120, 240])
        leaves = [[np.cos(t), np.sin(t), 0.1] for t in angles]
        graph = lost_adjacency(row_grid([0, 0, 1], *leaves))
        np.testing.assert_array_equal(graph.degrees, [4, 2, 2, 2])
        assert lost_seed(graph) == 1
        assert lost_seed(np.ones((3, 3))) == 0

    def test_expand(self):
        F = dgp_lost_fixture()
        expansion = lost_expand(F, lost_adjacency(F), 3)
        assert expansion.seed == 0
        np.testing.assert_array_equal(expansion.candidates, [0, 1])
        np.testing.assert_array_equal(expansion.expanded, [0, 1])
        np.testing.assert_array_equal(expansion.component, [0, 1])
        for a in (0, 7):
            with self.assertRaises(ValueError):
                lost_expand(F, lost_adjacency(F), a)

    def test_disconnected_expansion(self):
        A, B = [1.0, 0.0], [-1.0, 0.0]
        F = row_grid(A, B, A, B, B)
        expansion = lost_expand(F, lost_adjacency(F), 2)
        np.testing.assert_array_equal(expansion.expanded, [0, 2])
        np.testing.assert_array_equal(expansion.component, [0])
        result = lost_discover(F, a=2)
        np.testing.assert_allclose(to_corners(result.box), (0, 0, .2, 1))

    def test_discover(self):
        result = lost_discover(dgp_lost_fixture(), a=3)
        np.testing.assert_array_equal(result.selected, [0, 1])
        assert result.seed == 0 and result.eigenvector is None
        np.testing.assert_allclose(to_corners(result.box), (0, 0, 2 / 3, 1 / 2))
        np.testing.assert_array_equal(result.attention_map(), [[1, 1, 0], [0, 0, 0]])
        (target,) = result.to_boxset()
        assert target == ScoredBox(result.box, 1.0)
        # a is clipped to the number of patches
        np.testing.assert_array_equal(lost_discover(dgp_lost_fixture(), a=100).selected, [0, 1])

    def test_scale_invariance(self):
        np.random.seed(123)
        F = np.random.normal(size=(4, 5, 6))
        np.testing.assert_array_equal(lost_discover(F, a=5).selected, lost_discover(3.5 * F, a=5).selected)

    def test_uniform_features(self):
        result = lost_discover(np.ones((3, 4, 2)))
        assert len(result.selected) == 12
        np.testing.assert_allclose(result.box, Box(.5, .5, 1, 1))

    def test_inverse_degree(self):
        np.testing.assert_allclose(lost_inverse_degree(dgp_lost_fixture()), [[.5, .5, .25], [.25, .25, .25]])

    def test_bad_features(self):
        with self.assertRaises(DataError):
            lost_discover(np.ones((3, 4)))
        with self.assertRaises(DataError):
            lost_discover(np.full((2, 2, 2), np.nan))


class TestTokenCut(unittest.TestCase):

    def test_affinity(self):
        F = dgp_planted_blocks(2, 2, [0, 1], noise=0)
        graph = tokencut_affinity(F)
        assert graph.flavor == TOKENCUT
        eps = 1e-5
        np.testing.assert_allclose(graph.adjacency, [[1, 1, eps, eps], [1, 1, eps, eps],
                                                     [eps, eps, 1, 1], [eps, eps, 1, 1]])
        np.testing.assert_allclose(tokencut_affinity(F, eps=0.1).adjacency[0, 2], 0.1)
        with self.assertRaises(DataError) as cm:
            tokencut_affinity(row_grid([1, 0], [0, 0]))
        assert str(cm.exception) == 'zero feature vector'

    def test_two_node_fiedler(self):
        result = fiedler_vector(np.array([[1, .3], [.3, 1]]))
        np.testing.assert_allclose(result.vector, np.array([1, -1]) / np.sqrt(2.6))
        self.assertAlmostEqual(result.eigenvalue, .6 / 1.3)
        assert result.gap == np.inf
        with self.assertRaises(ValueError):
            fiedler_vector(np.ones((1, 1)))
        with self.assertRaises(ValueError):
            fiedler_vector(np.ones((2, 3)))
        with self.assertRaises(DataError):
            fiedler_vector(np.array([[0, 0], [0, 1.]]))

    def test_fiedler_against_generalized_problem(self):
        rs = np.random.RandomState(123)
        for n in (3, 8, 20):
            W = rs.uniform(0.1, 1, size=(n, n))
            W = (W + W.T) / 2
            result = fiedler_vector(PatchGraph(W, TOKENCUT))
            D = np.diag(W.sum(axis=1))
            values, vectors = scipy.linalg.eigh(D - W, D)
            self.assertAlmostEqual(result.eigenvalue, values[1])
            reference = vectors[:, 1] * np.sign(vectors[np.argmax(np.abs(vectors[:, 1])), 1])
            np.testing.assert_allclose(result.vector, reference, atol=1e-8)
            # D-normalized and D-orthogonal to the constant vector
            self.assertAlmostEqual(result.vector @ D @ result.vector, 1)
            self.assertAlmostEqual(np.sum(D @ result.vector), 0)
            self.assertAlmostEqual(result.gap, values[2] - values[1])
            assert result.residual <= 1e-8 * np.linalg.norm(D @ result.vector)

    def test_two_blocks(self):
        result = tokencut_discover(dgp_planted_blocks(2, 2, [0, 1], noise=0))
        np.testing.assert_array_equal(result.selected, [0, 1])
        np.testing.assert_allclose(to_corners(result.box), (0, 0, 1, .5))
        assert result.seed is None
        assert result.attention_map().shape == (2, 2)

    def test_planted_object(self):
        result = tokencut_discover(dgp_planted_blocks(4, 4, [5, 6, 9], random_state=123))
        np.testing.assert_array_equal(result.selected, [5, 6, 9])
        np.testing.assert_allclose(to_corners(result.box), (.25, .25, .75, .75))

    def test_random_planted_objects(self):
        rs = np.random.RandomState(123)
        for trial in range(30):
            rows, cols = rs.randint(3, 9, size=2)
            n = rows * cols
            members = np.sort(rs.choice(n, size=rs.randint(1, n // 3 + 1), replace=False))
            result = tokencut_discover(dgp_planted_blocks(rows, cols, members, random_state=trial))
            np.testing.assert_array_equal(result.selected, members)

    def test_degenerate_spectrum(self):
        with self.assertWarns(UserWarning):
            result = tokencut_discover(np.ones((2, 2, 3)))
        np.testing.assert_array_equal(result.selected, [0, 1, 2, 3])
        np.testing.assert_allclose(result.box, Box(.5, .5, 1, 1))
        single = tokencut_discover(np.ones((1, 1, 3)))
        np.testing.assert_array_equal(single.selected, [0])

    def test_scale_invariance(self):
        F = dgp_planted_blocks(3, 4, [0, 1, 4], random_state=5)
        np.testing.assert_array_equal(tokencut_discover(F).selected, tokencut_discover(10 * F).selected)

    def test_iterative_solver(self):
        rs = np.random.RandomState(7)
        W = rs.uniform(0.1, 1, size=(30, 30))
        W = (W + W.T) / 2
        dense = fiedler_vector(W)
        with mock.patch('boxrefine.discovery.DENSE_SOLVER_MAX', 10):
            iterative = fiedler_vector(W)
        np.testing.assert_allclose(iterative.vector, dense.vector, atol=1e-7)
        self.assertAlmostEqual(iterative.eigenvalue, dense.eigenvalue)


class TestMove(unittest.TestCase):

    def test_largest_component(self):
        M = np.zeros((10, 10))
        M[1:4, 1:5] = 0.9  # 12 pixels
        M[6:7, 3:8] = 0.6  # 5 pixels
        np.testing.assert_allclose(to_corners(move_box(M)), (.1, .1, .5, .4))
        with self.assertRaises(EmptySegmentationError) as cm:
            move_box(M, threshold=0.95)
        assert str(cm.exception) == 'empty segmentation'

    def test_threshold_and_ties(self):
        with self.assertRaises(EmptySegmentationError):
            move_box(np.full((4, 4), 0.4))
        assert move_box(np.full((4, 4), 0.5)) == from_corners(0, 0, 1, 1)
        M = np.zeros((6, 6))
        M[4, 4:6] = 1.0
        M[0, 0:2] = 1.0
        np.testing.assert_allclose(to_corners(move_box(M)), (0, 0, 2 / 6, 1 / 6))
        # diagonal neighbours are connected
        M = np.eye(4)
        np.testing.assert_allclose(to_corners(move_box(M)), (0, 0, 1, 1))
