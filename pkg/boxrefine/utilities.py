# Copyright (c) boxrefine contributors. All rights reserved.
# Licensed under the MIT License.

"""Utility methods: exceptions, input validation and the seedable random generator."""

import os
import numbers
import numpy as np
from sklearn.utils import check_array

MAX_UINT64 = (1 << 64) - 1
SEED_ENV_VAR = 'BBR_SEED'


class DataError(ValueError):
    """Raised when input data is malformed or violates the documented invariants."""


class SchemaError(DataError):
    """Raised when a JSON or configuration document does not follow its schema."""


class TensorFormatError(DataError):
    """Raised when a tensor file cannot be decoded.

    Parameters
    ----------
    code : string
        One of ``'bad_magic'``, ``'truncated_payload'``, ``'unsupported_dtype'`` or ``'bad_header'``.

    message : string
        Human readable description.
    """

    def __init__(self, code, message):
        super().__init__("{0}: {1}".format(code.replace('_', ' '), message))
        self.code = code


class EmptyPredictionError(DataError):
    """Raised when no box survives the metric-time extraction of a heatmap."""

    def __init__(self, message="empty prediction"):
        super().__init__(message)


class EmptySegmentationError(DataError):
    """Raised when a segmentation map has no foreground pixel."""

    def __init__(self, message="empty segmentation"):
        super().__init__(message)


class NumericalError(ArithmeticError):
    """Raised when an iterative computation fails to converge or produces non-finite values.

    Parameters
    ----------
    message : string
        Human readable description.

    iteration : int or None
        Iteration at which the failure was detected, when applicable.

    residual : float or None
        Residual norm at the time of failure, when applicable.
    """

    def __init__(self, message, iteration=None, residual=None):
        super().__init__(message)
        self.iteration = iteration
        self.residual = residual


class SplitMix64:
    """Deterministic 64-bit generator (splitmix64 sequence).

    Identical seeds always produce identical draw sequences on every platform, since all
    arithmetic is exact integer arithmetic modulo 2**64.

    Parameters
    ----------
    seed : int, optional (default=0)
        Initial state; reduced modulo 2**64.
    """

    def __init__(self, seed=0):
        if not isinstance(seed, numbers.Integral):
            raise TypeError("The seed must be an integer, got {0}.".format(type(seed).__name__))
        self.seed = int(seed) & MAX_UINT64
        self._state = self.seed

    def next_uint64(self):
        """Advance the state and return the next 64-bit output."""
        self._state = (self._state + 0x9E3779B97F4A7C15) & MAX_UINT64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MAX_UINT64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MAX_UINT64
        return z ^ (z >> 31)

    def uniform(self):
        """Return a float uniformly distributed on [0, 1) with 53 random bits."""
        return (self.next_uint64() >> 11) * (1.0 / (1 << 53))

    def spawn(self):
        """Return an independent generator seeded from the next draw of this one."""
        return SplitMix64(self.next_uint64())

    def __repr__(self):
        return "SplitMix64(seed={0})".format(self.seed)


def default_seed():
    """Return the default seed, read from the ``BBR_SEED`` environment variable when set (else 0)."""
    value = os.environ.get(SEED_ENV_VAR)
    if value is None or value.strip() == '':
        return 0
    try:
        return int(value, 0)
    except ValueError:
        raise DataError("{0} must be an integer, got {1!r}".format(SEED_ENV_VAR, value))


def check_rng(rng):
    """Turn a seed into a :class:`SplitMix64` instance.

    Parameters
    ----------
    rng : None, int or :class:`SplitMix64`
        If None, a generator seeded by :func:`default_seed` is returned;
        if int, a new generator seeded with it; if already a generator it is returned unchanged.
    """
    if rng is None:
        return SplitMix64(default_seed())
    if isinstance(rng, SplitMix64):
        return rng
    if isinstance(rng, numbers.Integral):
        return SplitMix64(rng)
    raise TypeError("{0!r} cannot be used to seed a SplitMix64 instance".format(rng))


def check_heatmap(M):
    """Validate a heatmap and return it as a 2-D float64 array.

    Parameters
    ----------
    M : array-like, shape (height, width)
        Dense single-channel map whose values must lie in [0, 1].

    Returns
    -------
    M : array, shape (height, width)
    """
    try:
        M = check_array(M, dtype=np.float64, ensure_2d=True)
    except ValueError as exc:
        raise DataError("Invalid heatmap: {0}".format(exc))
    if M.min() < 0 or M.max() > 1:
        raise DataError("Heatmap values must lie in [0, 1], got range [{0}, {1}].".format(M.min(), M.max()))
    return M


def check_mask(mask):
    """Validate a binary mask and return it as a 2-D boolean array."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.size == 0:
        raise DataError("A binary mask must be a non-empty 2-D array, got shape {0}.".format(mask.shape))
    return mask.astype(bool)


def check_features(F):
    """Validate a feature grid and return it as a float64 array of shape (rows, cols, d).

    Parameters
    ----------
    F : array-like, shape (rows, cols, d)
        Per-patch feature vectors in row-major patch order.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 3 or min(F.shape) < 1:
        raise DataError("A feature grid must have shape (rows, cols, d) with all sizes >= 1, "
                        "got {0}.".format(F.shape))
    if not np.all(np.isfinite(F)):
        raise DataError("Feature grid contains non-finite values.")
    return F
