# Copyright (c) boxrefine contributors. All rights reserved.
# Licensed under the MIT License.

"""Unsupervised single-object discovery from a grid of patch features.

Three discovery rules are provided:

- LOST: a binary patch graph from the signs of feature dot products; the patch with the
  fewest connections seeds a set that is expanded and reduced to its 4-connected component
  (:func:`lost_discover`).
- TokenCut: a thresholded cosine-affinity graph split by the second eigenvector of its
  normalized-cut problem (:func:`tokencut_discover`).
- MOVE: the largest connected component of a segmentation map (:func:`move_box`).

Feature grids are arrays of shape ``(rows, cols, d)``; patches are indexed in row-major order.
"""

import logging
import warnings
from collections import namedtuple
import numpy as np
import scipy.linalg
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import eigsh, ArpackNoConvergence
from .geometry import ScoredBox, from_corners
from .heatmap import connected_components
from .utilities import check_features, check_heatmap, DataError, EmptySegmentationError, NumericalError

logger = logging.getLogger(__name__)

LOST = 'lost'
TOKENCUT = 'tokencut'
# grids up to this many patches use the dense symmetric eigensolver
DENSE_SOLVER_MAX = 1000
DEGENERATE_GAP = 1e-10


class PatchGraph(namedtuple('PatchGraph', ['adjacency', 'flavor'])):
    """Symmetric patch graph.

    Parameters
    ----------
    adjacency : array, shape (N, N)
        Binary for ``flavor='lost'``; entries in ``{eps, 1}`` for ``flavor='tokencut'``.

    flavor : 'lost' or 'tokencut'
    """
    __slots__ = ()

    @property
    def degrees(self):
        return self.adjacency.sum(axis=1)


class DiscoveryResult(namedtuple('DiscoveryResult', ['selected', 'seed', 'box', 'eigenvector', 'grid_shape'])):
    """Outcome of a discovery rule.

    Parameters
    ----------
    selected : array of int
        Sorted indices of the selected patches (never empty).

    seed : int or None
        LOST seed patch.

    box : :class:`~boxrefine.geometry.Box`
        Tight normalized bounding box of the selected patch cells.

    eigenvector : array or None
        TokenCut eigenvector, one entry per patch.

    grid_shape : tuple of int
        ``(rows, cols)`` of the patch grid.
    """
    __slots__ = ()

    def to_boxset(self, score=1.0):
        """Return the discovered box as a single-box set usable as a matching target."""
        return [ScoredBox(self.box, float(score))]

    def attention_map(self):
        """Per-patch map on the grid: the eigenvector for TokenCut, the selection mask otherwise."""
        if self.eigenvector is not None:
            return np.asarray(self.eigenvector).reshape(self.grid_shape)
        mask = np.zeros(self.grid_shape[0] * self.grid_shape[1])
        mask[self.selected] = 1.0
        return mask.reshape(self.grid_shape)


LostExpansion = namedtuple('LostExpansion', ['seed', 'candidates', 'expanded', 'component'])
LostExpansion.__doc__ = """Intermediate sets of the LOST expansion: the seed, the seed-compatible
low-degree patches, the expanded set and its 4-connected component containing the seed."""

FiedlerResult = namedtuple('FiedlerResult', ['vector', 'eigenvalue', 'gap', 'residual'])
FiedlerResult.__doc__ = """Second generalized eigenpair of a patch graph, the gap to the third
eigenvalue (infinite for two nodes) and the residual norm of the pair."""


def _flatten(F):
    F = check_features(F)
    rows, cols, d = F.shape
    return F.reshape(rows * cols, d), (rows, cols)


def _symmetrized(G):
    upper = np.triu(G)
    return upper + np.triu(G, 1).T


def _cells_box(indices, grid_shape):
    rows, cols = grid_shape
    r, c = np.divmod(np.asarray(indices), cols)
    return from_corners(c.min() / cols, r.min() / rows, (c.max() + 1) / cols, (r.max() + 1) / rows)


def _adjacency(graph):
    if isinstance(graph, PatchGraph):
        return graph.adjacency
    return np.asarray(graph, dtype=np.float64)


def lost_adjacency(F):
    """Binary graph linking patches whose features have a non-negative dot product.

    Self entries are included (1 unless the feature vector is zero, where the dot product 0
    still counts as connected).

    Parameters
    ----------
    F : array-like, shape (rows, cols, d)

    Returns
    -------
    graph : :class:`PatchGraph`
    """
    X, _ = _flatten(F)
    gram = _symmetrized(X @ X.T)
    return PatchGraph((gram >= 0).astype(np.float64), LOST)


def lost_seed(graph):
    """Patch with the lowest degree, ties broken by the lowest index."""
    return int(np.argmin(_adjacency(graph).sum(axis=1)))


def lost_expand(F, graph, a):
    """Expand the LOST seed into its object component.

    Parameters
    ----------
    F : array-like, shape (rows, cols, d)

    graph : :class:`PatchGraph`
        As returned by :func:`lost_adjacency` for ``F``.

    a : int
        Number of lowest-degree patches considered; must lie in ``[1, N]``.

    Returns
    -------
    expansion : :class:`LostExpansion`
    """
    X, grid_shape = _flatten(F)
    n = X.shape[0]
    if not 1 <= a <= n:
        raise ValueError("a must lie in [1, {0}], got {1}.".format(n, a))
    gram = _symmetrized(X @ X.T)
    degrees = _adjacency(graph).sum(axis=1)
    seed = lost_seed(graph)
    lowest = np.argsort(degrees, kind='mergesort')[:a]
    candidates = np.sort(lowest[gram[lowest, seed] >= 0])
    expanded = np.flatnonzero(gram[:, candidates].sum(axis=1) >= 0)
    mask = np.zeros(n, dtype=bool)
    mask[expanded] = True
    labels, _ = connected_components(mask.reshape(grid_shape), connectivity=4)
    component = np.flatnonzero(labels.ravel() == labels.ravel()[seed])
    return LostExpansion(seed, candidates, expanded, component)


def lost_discover(F, a=100):
    """LOST single-object discovery.

    Parameters
    ----------
    F : array-like, shape (rows, cols, d)

    a : int, optional (default=100)
        Size of the low-degree candidate list; clipped to the number of patches.

    Returns
    -------
    result : :class:`DiscoveryResult`
    """
    X, grid_shape = _flatten(F)
    a = int(min(max(a, 1), X.shape[0]))
    graph = lost_adjacency(F)
    expansion = lost_expand(F, graph, a)
    return DiscoveryResult(expansion.component, expansion.seed, _cells_box(expansion.component, grid_shape),
                           None, grid_shape)


def lost_inverse_degree(F):
    """Inverse degree of every patch of the LOST graph, as a ``(rows, cols)`` map in (0, 1]."""
    _, grid_shape = _flatten(F)
    return (1.0 / lost_adjacency(F).degrees).reshape(grid_shape)


def tokencut_affinity(F, tau=0.2, eps=1e-5):
    """Thresholded cosine-similarity graph.

    Parameters
    ----------
    F : array-like, shape (rows, cols, d)

    tau : float, optional (default=0.2)
        Entries with cosine similarity at least ``tau`` are 1.

    eps : float, optional (default=1e-5)
        Value of the remaining entries.

    Returns
    -------
    graph : :class:`PatchGraph`
        Symmetric, diagonal equal to 1.
    """
    X, _ = _flatten(F)
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise DataError("zero feature vector")
    unit = X / norms[:, None]
    cosine = _symmetrized(unit @ unit.T)
    adjacency = np.where(cosine >= tau, 1.0, eps)
    np.fill_diagonal(adjacency, 1.0)
    return PatchGraph(adjacency, TOKENCUT)


def _smallest_eigenpairs(L, n_pairs):
    n = L.shape[0]
    if n <= DENSE_SOLVER_MAX:
        logger.debug("Dense eigensolver on %d patches", n)
        return scipy.linalg.eigh(L, subset_by_index=[0, n_pairs - 1])
    logger.debug("Iterative eigensolver on %d patches", n)
    try:
        values, vectors = eigsh(csr_matrix(L), k=n_pairs, which='SA', v0=np.ones(n), tol=1e-10, maxiter=10 * n)
    except ArpackNoConvergence as exc:
        residual = np.inf
        if len(exc.eigenvalues):
            residual = float(np.linalg.norm(L @ exc.eigenvectors - exc.eigenvectors * exc.eigenvalues))
        raise NumericalError("Eigensolver did not converge within {0} iterations (residual {1:.3g})".format(
            10 * n, residual), residual=residual)
    order = np.argsort(values, kind='mergesort')
    return values[order], vectors[:, order]


def fiedler_vector(W):
    """Second eigenvector of the normalized-cut problem ``(D - W) x = lambda D x``.

    The problem is solved in its symmetric form ``I - D^{-1/2} W D^{-1/2}`` and mapped back by
    ``D^{-1/2}``.

    Parameters
    ----------
    W : :class:`PatchGraph` or array, shape (N, N)
        Symmetric affinities with positive row sums, N >= 2.

    Returns
    -------
    result : :class:`FiedlerResult`
        ``vector`` has D-weighted norm 1 and its entry of largest magnitude (first one on ties)
        is positive.
    """
    W = _adjacency(W)
    n = W.shape[0]
    if W.ndim != 2 or W.shape[1] != n:
        raise ValueError("The affinity matrix must be square, got shape {0}.".format(W.shape))
    if n < 2:
        raise ValueError("At least two patches are needed for a cut, got {0}.".format(n))
    degrees = W.sum(axis=1)
    if np.any(degrees <= 0):
        raise DataError("Affinity row sums must be positive.")
    inv_sqrt = 1 / np.sqrt(degrees)
    L = _symmetrized(np.eye(n) - inv_sqrt[:, None] * W * inv_sqrt[None, :])
    values, vectors = _smallest_eigenpairs(L, min(3, n))
    x = inv_sqrt * vectors[:, 1]
    x /= np.sqrt(np.sum(degrees * x ** 2))
    magnitude = np.abs(x)
    lead = int(np.flatnonzero(magnitude >= magnitude.max() * (1 - 1e-9))[0])
    if x[lead] < 0:
        x = -x
    eigenvalue = float(values[1])
    gap = float(values[2] - values[1]) if n >= 3 else np.inf
    Dx = degrees * x
    residual = float(np.linalg.norm(Dx - W @ x - eigenvalue * Dx))
    if residual > 1e-8 * np.linalg.norm(Dx):
        raise NumericalError("Eigenpair residual {0:.3g} exceeds tolerance".format(residual), residual=residual)
    return FiedlerResult(x, eigenvalue, gap, residual)


def tokencut_discover(F, tau=0.2, eps=1e-5):
    """TokenCut single-object discovery.

    Patches are split by whether their eigenvector entry exceeds the eigenvector mean; the group
    holding the entry of largest magnitude is selected. A degenerate spectrum (eigen-gap below
    1e-10, for instance identical features) selects every patch.

    Returns
    -------
    result : :class:`DiscoveryResult`
    """
    X, grid_shape = _flatten(F)
    n = X.shape[0]
    everything = np.arange(n)
    if n == 1:
        return DiscoveryResult(everything, None, _cells_box(everything, grid_shape), np.ones(1), grid_shape)
    fiedler = fiedler_vector(tokencut_affinity(F, tau, eps))
    if fiedler.gap < DEGENERATE_GAP:
        warnings.warn("Degenerate spectrum (eigen-gap {0:.3g}); selecting every patch.".format(fiedler.gap),
                      UserWarning)
        return DiscoveryResult(everything, None, _cells_box(everything, grid_shape), fiedler.vector, grid_shape)
    selected = np.flatnonzero(fiedler.vector > fiedler.vector.mean())
    return DiscoveryResult(selected, None, _cells_box(selected, grid_shape), fiedler.vector, grid_shape)


def move_box(M, threshold=0.5):
    """Bounding box of the largest foreground component of a segmentation map.

    Parameters
    ----------
    M : array-like, shape (height, width)
        Segmentation scores in [0, 1].

    threshold : float, optional (default=0.5)
        Absolute foreground threshold (inclusive).

    Returns
    -------
    box : :class:`~boxrefine.geometry.Box`
        Half-open pixel extent of the component divided by the image size; ties between
        components of equal area go to the one met first in raster order.
    """
    M = check_heatmap(M)
    labels, n = connected_components(M >= threshold, connectivity=8)
    if n == 0:
        raise EmptySegmentationError()
    largest = int(np.argmax(np.bincount(labels.ravel())[1:])) + 1
    rows, cols = ndimage.find_objects(labels)[largest - 1]
    height, width = M.shape
    return from_corners(cols.start / width, rows.start / height, cols.stop / width, rows.stop / height)
