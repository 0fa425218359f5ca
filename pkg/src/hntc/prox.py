"""Numerical kernels used by the HNTC iterations.

* :func:`svt` - singular value soft-thresholding (prox of the nuclear norm).
* :func:`build_a_operator` - the sparse SPD stencil of the smoothness subproblem.
* :func:`solve` / :func:`solve_batch` - linear solves against that stencil plus a
  non-negative diagonal shift.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

RESIDUAL_TOL = 1e-10
RANK_RTOL = 1e-12


class SolverError(RuntimeError):
    """Raised when a linear solve cannot meet its residual bound."""


def svt(a, tau):
    """Singular value thresholding ``U diag(max(s - tau, 0)) V^H``.

    Works on a single matrix or on a stack of matrices (leading batch axes).
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    a = np.asarray(a)
    if tau == 0:
        return a.copy()
    u, s, vh = np.linalg.svd(a, full_matrices=False)
    s = np.maximum(s - tau, 0.0)
    return (u * s[..., None, :]) @ vh


def numerical_rank(a):
    s = np.linalg.svd(np.asarray(a), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > RANK_RTOL * s[0]))


@dataclass(frozen=True)
class SpdOperator:
    """``base + diag(diag_add)`` where ``base`` is the shared smoothness stencil.

    ``base`` is indexed by position tuples linearized column-major (first grid
    axis fastest), matching :func:`hntc.tensor.unfold`.
    """

    grid_shape: tuple
    base: sp.csr_matrix
    diag_add: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.diag_add is None:
            object.__setattr__(self, "diag_add", np.zeros(self.n))
        elif np.any(np.asarray(self.diag_add) < 0):
            raise ValueError("diagonal augmentation must be non-negative")

    @property
    def n(self):
        return self.base.shape[0]

    def with_diag(self, diag_add):
        return SpdOperator(self.grid_shape, self.base, np.asarray(diag_add, dtype=float))

    def matrix(self):
        return (self.base + sp.diags(self.diag_add)).tocsr()

    def dense(self):
        return self.matrix().toarray()

    def matvec(self, x):
        return self.base @ x + self.diag_add * x


def _grid_index(grid_shape):
    """Map each position tuple to its column-major linear index."""
    return {idx: int(np.ravel_multi_index(idx, grid_shape, order="F")) if grid_shape else 0
            for idx in itertools.product(*(range(s) for s in grid_shape))}


def build_a_operator(grid_shape, n2, lam, gamma):
    """Stencil of the position-slice linear system.

    Diagonal ``n2*lam + 2*gamma*(number of in-grid axis neighbours)``, ``-2*gamma``
    between grid points at unit distance, zero elsewhere.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    grid_shape = tuple(int(s) for s in grid_shape)
    if any(s < 1 for s in grid_shape):
        raise ValueError("grid dimensions must be >= 1")
    n = int(np.prod(grid_shape, dtype=np.int64)) if grid_shape else 1
    diag = np.full(n, n2 * lam, dtype=float)
    rows, cols = [], []
    if gamma > 0:
        index = _grid_index(grid_shape)
        for idx, i in index.items():
            for axis, size in enumerate(grid_shape):
                if idx[axis] + 1 < size:
                    nb = list(idx)
                    nb[axis] += 1
                    j = index[tuple(nb)]
                    rows += [i, j]
                    cols += [j, i]
                    diag[i] += 2 * gamma
                    diag[j] += 2 * gamma
    off = sp.coo_matrix((np.full(len(rows), -2.0 * gamma), (rows, cols)), shape=(n, n))
    base = (off + sp.diags(diag)).tocsr()
    return SpdOperator(grid_shape, base)


def solve(op, rhs):
    """Solve ``(base + diag_add) x = rhs`` to relative residual <= 1e-10."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (op.n,):
        raise ValueError(f"rhs length {rhs.shape} does not match operator size {op.n}")
    return solve_batch(op, op.diag_add[None, :], rhs[None, :])[0]


def solve_batch(op, diag_adds, rhs):
    """Solve one system per row of ``diag_adds`` / ``rhs`` sharing ``op.base``.

    Parameters
    ----------
    op : SpdOperator
    diag_adds : ndarray, shape (B, n)
        Per-system non-negative diagonal augmentation (replaces ``op.diag_add``).
    rhs : ndarray, shape (B, n)

    Returns
    -------
    ndarray, shape (B, n)
    """
    diag_adds = np.asarray(diag_adds, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    if rhs.ndim != 2 or rhs.shape[1] != op.n or diag_adds.shape != rhs.shape:
        raise ValueError("rhs / diag_adds must both have shape (B, n)")
    if np.any(diag_adds < 0):
        raise ValueError("diagonal augmentation must be non-negative")
    base = op.base.toarray()
    mats = np.broadcast_to(base, (rhs.shape[0],) + base.shape).copy()
    idx = np.arange(op.n)
    mats[:, idx, idx] += diag_adds
    x = np.linalg.solve(mats, rhs[..., None])
    # one step of iterative refinement keeps the residual bound on ill-scaled shifts
    res = rhs[..., None] - mats @ x
    x = x + np.linalg.solve(mats, res)
    r = np.linalg.norm((mats @ x)[..., 0] - rhs, axis=1)
    b = np.linalg.norm(rhs, axis=1)
    rel = np.where(b > 0, r / np.where(b > 0, b, 1.0), r)
    worst = float(np.max(rel)) if rel.size else 0.0
    if not np.isfinite(worst) or worst > RESIDUAL_TOL:
        raise SolverError(f"linear solve residual {worst:.3e} exceeds {RESIDUAL_TOL:g}")
    return x[..., 0]
