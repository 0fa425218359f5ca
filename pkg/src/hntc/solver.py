"""Hybrid noisy tensor completion (HNTC) by ADMM.

The tensor is split into ``n1`` leading *position* axes, on which the
reconstruction is encouraged to be smooth (LTTV penalty), and ``n2``
trailing *beam* axes, on which every position slice is encouraged to be low
rank (weighted sum of mode-k nuclear norms). Observed entries enter through a
weighted squared-error budget ``sum W (T - X)^2 <= eta``.

Solver variables are kept in *normalized* units: the data are divided by the
weighted RMS of the observations before iterating, so the default
hyperparameters behave the same whatever unit the received powers are in.
The scale is stored on :class:`HntcState` and reused on warm starts.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import prox

log = logging.getLogger(__name__)

# budget used only to size the automatic dual step when eta == 0
ZERO_BUDGET_FLOOR = 1e-7


@dataclass(frozen=True)
class HntcConfig:
    """Partition and hyperparameters of one HNTC run.

    ``alpha`` defaults to uniform weights ``1/n2``. ``epsilon`` is relative:
    the primal-gap threshold is ``epsilon * ||T||_F`` in normalized units.
    ``eta`` is the squared-error budget in the *original* data units; leave
    it ``None`` to use ``eta_rel * sum W T^2`` (a relative budget).
    ``beta2`` left as ``None`` resolves to ``beta2_rel * n_obs / eta**1.5``
    (``n_obs`` = number of entries with positive weight). At the optimum the
    residual of an observed entry scales like ``1 / (mu W)``, which puts the
    dual multiplier near ``mu* ~ n_obs / sqrt(eta)`` and the best ascent step
    near ``mu* / (2 eta)``; the rule follows that scaling and is invariant to
    rescaling the data.
    """

    n1: int = 2
    n2: int = 2
    alpha: tuple | None = None
    gamma: float = 2.0
    lam: float = 1.0
    eta: float | None = None
    eta_rel: float = 1e-7
    beta1: float | None = None
    beta2: float | None = None
    beta2_rel: float = 0.3
    epsilon: float = 1e-3
    max_iter: int = 200
    normalize: bool = True

    def __post_init__(self):
        if self.n1 < 0 or self.n2 < 0 or self.n1 + self.n2 < 1:
            raise ValueError("need n1, n2 >= 0 with n1 + n2 >= 1")
        if self.alpha is None:
            object.__setattr__(self, "alpha", tuple([1.0 / self.n2] * self.n2) if self.n2 else ())
        else:
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if len(self.alpha) != self.n2:
            raise ValueError(f"expected {self.n2} alpha weights, got {len(self.alpha)}")
        if self.n2 and (min(self.alpha) <= 0 or not math.isclose(sum(self.alpha), 1.0, rel_tol=1e-9)):
            raise ValueError("alpha weights must be positive and sum to 1")
        if self.beta1 is None:
            object.__setattr__(self, "beta1", self.lam)
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.eta is not None and self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.eta_rel < 0:
            raise ValueError("eta_rel must be non-negative")
        if self.beta1 <= 0 or (self.beta2 is not None and self.beta2 <= 0) or self.beta2_rel <= 0:
            raise ValueError("dual step sizes must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class HntcProblem:
    t: np.ndarray
    w: np.ndarray
    config: HntcConfig = field(default_factory=HntcConfig)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if self.t.shape != self.w.shape:
            raise ValueError(f"data {self.t.shape} and weight {self.w.shape} shapes differ")
        if self.t.ndim != self.config.n1 + self.config.n2:
            raise ValueError(f"order-{self.t.ndim} tensor does not match n1+n2="
                             f"{self.config.n1 + self.config.n2}")
        if np.any(self.w < 0) or not np.all(np.isfinite(self.w)):
            raise ValueError("weights must be finite and non-negative")
        if not np.all(np.isfinite(self.t)):
            raise ValueError("data tensor has non-finite entries")

    @property
    def grid_shape(self):
        return self.t.shape[: self.config.n1]

    @property
    def beam_shape(self):
        return self.t.shape[self.config.n1:]

    def eta(self):
        if self.config.eta is not None:
            return float(self.config.eta)
        return self.config.eta_rel * float(np.sum(self.w * self.t ** 2))

    @classmethod
    def from_counts(cls, t, v, config=None):
        """Build a problem with ``W = V / sum V``."""
        v = np.asarray(v, dtype=float)
        total = v.sum()
        if total <= 0:
            raise ValueError("count tensor is empty")
        return cls(t, v / total, config or HntcConfig())


@dataclass
class HntcState:
    x: np.ndarray
    y: list
    z: list
    mu: float = 0.0
    iter: int = 0
    scale: float = 1.0

    def copy(self):
        return HntcState(self.x.copy(), [a.copy() for a in self.y], [a.copy() for a in self.z],
                         self.mu, self.iter, self.scale)


@dataclass
class SolveResult:
    x: np.ndarray
    state: HntcState
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def initial_state(problem, scale=1.0):
    """Cold start: ``X = Y_k = T``, ``Z_k = 0``, ``mu = 0``."""
    t = problem.t
    n2 = problem.config.n2
    return HntcState(t.copy(), [t.copy() for _ in range(n2)],
                     [np.zeros_like(t) for _ in range(n2)], 0.0, 0, scale)


def noise_budget(w, v, var_per_measurement, c=1.0):
    """Expected weighted squared error of averaged noisy observations.

    Each stored entry averages ``V`` measurements of variance
    ``var_per_measurement``, so its variance is ``var / V``. Returns
    ``c * sum W var / V`` over the observed set.
    """
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    var = np.broadcast_to(np.asarray(var_per_measurement, dtype=float), w.shape)
    mask = v > 0
    return float(c * np.sum(w[mask] * var[mask] / v[mask]))


def _positions_by_beams(a, n1):
    """Reshape to (positions, beams), positions linearized first-axis-fastest."""
    npos = int(np.prod(a.shape[:n1], dtype=np.int64)) if n1 else 1
    return a.reshape((npos, -1), order="F")


def _a_operator(problem):
    cfg = problem.config
    key = (problem.grid_shape, cfg.n2, cfg.lam, cfg.gamma)
    cache = problem.__dict__.setdefault("_op_cache", {})
    if key not in cache:
        cache[key] = prox.build_a_operator(problem.grid_shape, cfg.n2, cfg.lam, cfg.gamma)
    return cache[key]


def x_update(problem, state):
    """Solve the smoothness subproblem for every beam index tuple."""
    cfg = problem.config
    n1, n2, lam = cfg.n1, cfg.n2, cfg.lam
    shape = problem.t.shape
    rhs = 2.0 * state.mu * problem.w * problem.t
    for k in range(n2):
        rhs = rhs + lam * state.y[k] + state.z[k]
    diag = 2.0 * state.mu * problem.w
    rhs_m = _positions_by_beams(rhs, n1).T
    diag_m = _positions_by_beams(diag, n1).T
    op = _a_operator(problem)
    if n2 == 0:
        sol = _pinv_solve(op, diag_m, rhs_m)
    elif cfg.gamma == 0 or n1 == 0:
        sol = rhs_m / (op.base.diagonal()[None, :] + diag_m)
    else:
        sol = prox.solve_batch(op, diag_m, rhs_m)
    return sol.T.reshape(shape, order="F")


def _pinv_solve(op, diag_m, rhs_m):
    # pure-smoothing reduction: the stencil is a singular Laplacian until mu > 0
    base = op.base.toarray()
    out = np.empty_like(rhs_m)
    for b in range(rhs_m.shape[0]):
        out[b] = np.linalg.pinv(base + np.diag(diag_m[b])) @ rhs_m[b]
    return out


def _slice_svt(a, n1, k, tau):
    """SVT of the mode-k unfolding of every position slice of ``a``."""
    beam_shape = a.shape[n1:]
    npos = int(np.prod(a.shape[:n1], dtype=np.int64)) if n1 else 1
    slices = a.reshape((npos,) + beam_shape)
    moved = np.moveaxis(slices, 1 + k, 1)
    mats = moved.reshape(npos, beam_shape[k], -1)
    out = prox.svt(mats, tau).reshape(moved.shape)
    return np.moveaxis(out, 1, 1 + k).reshape(a.shape)


def y_update(problem, state):
    cfg = problem.config
    return [_slice_svt(state.x - state.z[k] / cfg.lam, cfg.n1, k, cfg.alpha[k] / cfg.lam)
            for k in range(cfg.n2)]


def z_update(state, beta1):
    return [z + beta1 * (y - state.x) for y, z in zip(state.y, state.z)]


def constraint_value(problem, x):
    """``sum W (T - X)^2 - eta``; non-positive when the noise budget holds."""
    r = problem.t - x
    return float(np.sum(problem.w * r * r)) - problem.eta()


def mu_update(problem, state, beta2):
    return max(0.0, state.mu + beta2 * constraint_value(problem, state.x))


def dual_step(problem):
    """Resolved ``beta2`` for ``problem`` (see :class:`HntcConfig`)."""
    cfg = problem.config
    if cfg.beta2 is not None:
        return cfg.beta2
    eta = max(problem.eta(), ZERO_BUDGET_FLOOR * float(np.sum(problem.w * problem.t ** 2)))
    if eta <= 0:
        return cfg.beta2_rel
    n_obs = int(np.count_nonzero(problem.w))
    return cfg.beta2_rel * n_obs / eta ** 1.5


def primal_gap(state):
    return float(sum(np.linalg.norm((state.x - y).ravel()) for y in state.y))


def _normalized(problem, scale):
    if scale == 1.0:
        return problem
    cfg = replace(problem.config, eta=problem.eta() / scale ** 2)
    return HntcProblem(problem.t / scale, problem.w, cfg)


def data_scale(problem):
    if not problem.config.normalize:
        return 1.0
    s = math.sqrt(float(np.sum(problem.w * problem.t ** 2)))
    return s if s > 0 else 1.0


def _iterate(problem, state):
    cfg = problem.config
    threshold = cfg.epsilon * float(np.linalg.norm(problem.t.ravel()))
    beta2 = dual_step(problem)
    trace = []
    converged = False
    while state.iter < cfg.max_iter:
        state.x = x_update(problem, state)
        state.y = y_update(problem, state)
        state.z = z_update(state, cfg.beta1)
        state.mu = mu_update(problem, state, beta2)
        state.iter += 1
        gap = primal_gap(state)
        slack = constraint_value(problem, state.x)
        trace.append((state.iter, gap, slack, state.mu))
        if gap < threshold and slack <= 0:
            converged = True
            break
    if not converged:
        log.warning("HNTC stopped at max_iter=%d without meeting both stop criteria", cfg.max_iter)
    return converged, trace


def solve(problem):
    """Run HNTC from the cold-start initialization.

    Returns
    -------
    SolveResult
        ``x`` is the completed tensor in the original data units; ``converged``
        is False when ``max_iter`` ran out first (a soft failure).
    """
    scale = data_scale(problem)
    work = _normalized(problem, scale)
    state = initial_state(work, scale)
    converged, trace = _iterate(work, state)
    return SolveResult(state.x * scale, state, state.iter, converged, trace)


def solve_warm(problem, prior):
    """Run HNTC with ``Y_k``, ``Z_k`` and ``mu`` taken from a previous solve.

    The prior's normalization scale is kept so the dual variables stay
    meaningful. The iteration counter restarts at zero.
    """
    if prior.x.shape != problem.t.shape or len(prior.y) != problem.config.n2:
        raise ValueError("prior state does not match the problem shape")
    if any(y.shape != problem.t.shape for y in prior.y + prior.z):
        raise ValueError("prior state does not match the problem shape")
    work = _normalized(problem, prior.scale)
    state = prior.copy()
    state.iter = 0
    converged, trace = _iterate(work, state)
    return SolveResult(state.x * prior.scale, state, state.iter, converged, trace)


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "primal_gap", "constraint_value", "mu"])
        for it, gap, slack, mu in trace:
            writer.writerow([it, repr(gap), repr(slack), repr(mu)])
