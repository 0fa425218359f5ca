"""Dense tensor helpers: mode-m unfolding/folding, inner product, LTTV.

Tensors are plain ``numpy.ndarray`` objects of real floats. Modes are
1-based throughout this module to match the usual matricization notation.

The mode-m unfolding places entry ``(i_1, ..., i_M)`` in row ``i_m`` and in
the column obtained by enumerating the remaining indices with the *first*
remaining index varying fastest (column-major over the non-m modes). This is
the classic Kolda-Bader ordering, so ``unfold`` / ``fold`` are exact inverses
independent of how numpy happens to store the array in memory.

On disk a tensor is stored as a ``.npy`` file: the header carries the order
and the shape, and the payload is written in column-major order (first index
fastest), the same linearization the unfolding uses.
"""
from __future__ import annotations

import os

import numpy as np


def _check_mode(ndim, m):
    if not 1 <= m <= ndim:
        raise ValueError(f"mode {m} out of range for order-{ndim} tensor")


def unfold(x, m):
    """Mode-``m`` matricization of ``x``.

    Parameters
    ----------
    x : ndarray
        Tensor of order M >= 1.
    m : int
        1-based mode index.

    Returns
    -------
    ndarray
        Matrix of shape ``(I_m, prod_{d != m} I_d)``.
    """
    x = np.asarray(x)
    _check_mode(x.ndim, m)
    return np.moveaxis(x, m - 1, 0).reshape((x.shape[m - 1], -1), order="F")


def fold(mat, m, shape):
    """Inverse of :func:`unfold`: rebuild a tensor of ``shape`` from its mode-``m`` unfolding."""
    mat = np.asarray(mat)
    shape = tuple(int(s) for s in shape)
    _check_mode(len(shape), m)
    rest = shape[: m - 1] + shape[m:]
    expected = (shape[m - 1], int(np.prod(rest, dtype=np.int64)))
    if mat.ndim != 2 or mat.shape != expected:
        raise ValueError(f"matrix of shape {mat.shape} cannot be folded into {shape} at mode {m}; "
                         f"expected {expected}")
    full = mat.reshape((shape[m - 1],) + rest, order="F")
    return np.moveaxis(full, 0, m - 1)


def inner(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(np.dot(x.ravel(), y.ravel()))


def frobenius(x):
    return float(np.sqrt(inner(x, x)))


def lttv(x):
    """Linear tensor total variation: sum of squared forward differences along every axis.

    Differences that would step past the last index of an axis are dropped.
    """
    x = np.asarray(x, dtype=float)
    total = 0.0
    for axis in range(x.ndim):
        if x.shape[axis] > 1:
            total += float(np.sum(np.diff(x, axis=axis) ** 2))
    return total


def save_tensor(path, x):
    x = np.asarray(x, dtype=np.float64)
    with open(path, "wb") as fh:
        np.save(fh, np.asfortranarray(x), allow_pickle=False)


def load_tensor(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return np.ascontiguousarray(np.load(path, allow_pickle=False))
