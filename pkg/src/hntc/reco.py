"""Position-aided BS beam recommendation and beam-alignment metrics.

Beams are addressed either as 1-based ``(u, v)`` pairs or as flat indices
``(u-1)*C_phi + (v-1)``; the flat order is lexicographic in ``(u, v)``, so a
stable descending sort on flat indices breaks ties toward the lowest
``(u, v)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .database import pos_label, round_half_up

DELTA_S = 10e-6
T_FRAME = 10e-3
ZETA = 0.4


@dataclass(frozen=True)
class RecoRequest:
    g: tuple
    n_tr: int
    d: float = 0.0

    def __post_init__(self):
        if self.n_tr < 1:
            raise ValueError("n_tr must be >= 1")
        if self.d < 0:
            raise ValueError("error radius must be non-negative")


@dataclass
class RecoResult:
    beams: list
    scores: list = field(default_factory=list)


def n_trained(k_tr, n_beams):
    """``N_tr = round(K_tr * |K|)`` with halves rounded up, at least one beam."""
    return max(1, int(round_half_up(k_tr * n_beams + 1e-9)))


def _flat_to_uv(flat, c_phi):
    return (int(flat) // c_phi + 1, int(flat) % c_phi + 1)


def _top(values, n_tr):
    order = np.argsort(-values, kind="stable")[:n_tr]
    return order, values[order]


def _result(values, n_tr, c_phi):
    n_beams = values.size
    if n_tr > n_beams:
        raise ValueError(f"n_tr={n_tr} exceeds the codebook size {n_beams}")
    order, scores = _top(values, n_tr)
    return RecoResult([_flat_to_uv(i, c_phi) for i in order], [float(s) for s in scores])


def bss(t_c, grid, request):
    """Beam subset selection: the ``n_tr`` largest predicted powers at the label of ``g``."""
    p = pos_label(grid, request.g)
    slab = np.asarray(t_c)[p[0] - 1, p[1] - 1]
    return _result(slab.ravel(), request.n_tr, slab.shape[1])


def group_labels(grid, g_r, radius):
    """Labels ``rho(g)`` of every in-area ``g`` with ``||g - g_r|| <= radius``.

    A label belongs to the group when the disk reaches the part of the area
    that maps to it. With zero radius the group is the label of ``g_r``.
    Returns row-major flat label indices.
    """
    g_r = np.asarray(g_r, dtype=float)
    p = pos_label(grid, g_r)
    own = (p[0] - 1) * grid.l_y + (p[1] - 1)
    if radius <= 0:
        return np.array([own])
    lo, hi = grid.cells()
    nearest = np.clip(g_r, lo, hi)
    dist = np.linalg.norm(nearest - g_r, axis=1)
    members = np.nonzero(dist <= radius)[0]
    return np.union1d(members, [own])


def gbss(t_c, grid, request, zeta=ZETA):
    """Grouping-based BSS: average the predicted slices of all labels within ``zeta * d``."""
    t_c = np.asarray(t_c)
    labels = group_labels(grid, request.g, zeta * request.d)
    slabs = t_c.reshape((grid.n_positions,) + t_c.shape[2:])[labels]
    mean = slabs.mean(axis=0)
    return _result(mean.ravel(), request.n_tr, mean.shape[1])


def _label_space_order(db, p):
    """Observed labels sorted by distance to ``p`` in label space, ties to the lowest label."""
    obs = db.positions()
    return sorted(obs, key=lambda q: ((q[0] - p[0]) ** 2 + (q[1] - p[1]) ** 2, q))


def type_b_baseline(db, grid, request, n_beams=None, c_phi=None):
    """Fingerprint baseline: stored beams of the nearest observed label, best ``r_bar`` first.

    When that label stores fewer than ``n_tr`` beams the list is padded with the
    best stored beams of the next-nearest observed labels. If the whole
    database holds fewer distinct beams, the remainder is filled in
    ``(u, v)`` order with score 0 (needs ``n_beams`` and ``c_phi``).
    """
    if not db.records:
        raise ValueError("database is empty")
    p = pos_label(grid, request.g)
    chosen, scores = [], []
    for q in _label_space_order(db, p):
        stored = sorted(db.beams_at(q), key=lambda item: (-item[1], item[0]))
        for beam, r_bar in stored:
            if beam not in chosen:
                chosen.append(beam)
                scores.append(float(r_bar))
                if len(chosen) == request.n_tr:
                    return RecoResult(chosen, scores)
    if n_beams is None or c_phi is None:
        return RecoResult(chosen, scores)
    for flat in range(n_beams):
        beam = _flat_to_uv(flat, c_phi)
        if beam not in chosen:
            chosen.append(beam)
            scores.append(0.0)
            if len(chosen) == request.n_tr:
                break
    return RecoResult(chosen, scores)


def perturb_position(g, d, rng):
    """``g`` plus an error drawn uniformly from the closed disk of radius ``d``.

    ``g`` may be one coordinate or an ``(N, 2)`` array.
    """
    g = np.asarray(g, dtype=float)
    if d < 0:
        raise ValueError("d must be non-negative")
    if d == 0:
        return g.copy()
    n = g.shape[:-1]
    r = d * np.sqrt(rng.uniform(size=n))
    a = rng.uniform(0, 2 * math.pi, size=n)
    return g + np.stack([r * np.cos(a), r * np.sin(a)], axis=-1)


def spectral_efficiency(snr_r_db, gain_ratio, n_tr, f_size, delta_s=DELTA_S, t_frame=T_FRAME):
    """Spectral efficiency after training overhead.

    Returns ``(se, feasible)``. Training scans ``n_tr * f_size`` beam pairs plus
    one slot; when that exceeds the frame, ``se = 0`` and ``feasible`` is False.
    """
    t_train = (n_tr * f_size + 1) * delta_s
    if t_train > t_frame:
        return 0.0, False
    f_comm = (t_frame - t_train) / t_frame
    snr = 10 ** (snr_r_db / 10)
    return f_comm * math.log2(1 + snr * gain_ratio), True


def comm_fraction(n_tr, f_size, delta_s=DELTA_S, t_frame=T_FRAME):
    t_train = (n_tr * f_size + 1) * delta_s
    return (t_frame - t_train) / t_frame, t_train


# Batched recommenders used by the experiment harness. Each maps an (N, 2)
# coordinate array to an (N, n_tr) array of flat beam indices.

def _top_rows(values, n_tr):
    return np.argsort(-values, axis=1, kind="stable")[:, :n_tr]


class SliceRecommender:
    """BSS on a fixed completed tensor (``t_avg`` gives the genie-aided scheme)."""

    def __init__(self, t_c, grid):
        self.grid = grid
        self.slabs = np.asarray(t_c).reshape(grid.n_positions, -1)

    def __call__(self, coords, n_tr):
        lab = pos_label(self.grid, coords)
        flat = (lab[:, 0] - 1) * self.grid.l_y + (lab[:, 1] - 1)
        return _top_rows(self.slabs[flat], n_tr)


class GroupRecommender(SliceRecommender):
    """Batched G-BSS with error radius ``d``."""

    def __init__(self, t_c, grid, d, zeta=ZETA):
        super().__init__(t_c, grid)
        self.radius = zeta * d

    def __call__(self, coords, n_tr):
        if self.radius <= 0:
            return super().__call__(coords, n_tr)
        lab = pos_label(self.grid, coords)
        own = (lab[:, 0] - 1) * self.grid.l_y + (lab[:, 1] - 1)
        lo, hi = self.grid.cells()
        nearest = np.clip(coords[:, None, :], lo[None], hi[None])
        mask = np.linalg.norm(nearest - coords[:, None, :], axis=2) <= self.radius
        mask[np.arange(len(coords)), own] = True
        mean = (mask.astype(float) @ self.slabs) / mask.sum(axis=1, keepdims=True)
        return _top_rows(mean, n_tr)


class TypeBRecommender:
    """Batched Type-B baseline; rankings are precomputed per label."""

    def __init__(self, db, grid, n_beams, c_phi):
        self.grid = grid
        self.n_beams = n_beams
        self.c_phi = c_phi
        self.db = db
        self._cache = {}

    def _ranking(self, p, n_tr):
        key = (p, n_tr)
        if key not in self._cache:
            res = type_b_baseline(self.db, self.grid, RecoRequest(self.grid.center(p), n_tr),
                                  self.n_beams, self.c_phi)
            self._cache[key] = [(u - 1) * self.c_phi + (v - 1) for u, v in res.beams]
        return self._cache[key]

    def __call__(self, coords, n_tr):
        lab = pos_label(self.grid, coords)
        return np.array([self._ranking((int(a), int(b)), n_tr) for a, b in lab])


def power_loss_probability(truth, reco_fn, n_tr, trials=1, seed=0, d=0.0):
    """Fraction of queries whose recommended set misses the best beam.

    Every trial queries all reference coordinates. The query position is the
    true coordinate perturbed uniformly within radius ``d`` and projected
    back onto the area; the arbiter is the noiseless power at the *true*
    coordinate. Returns ``(probability, per_trial_rates)``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng([seed, 1237])
    best = truth.powers.max(axis=1)
    rates = []
    for _ in range(trials):
        q = truth.coords if d == 0 else truth.grid.clip(perturb_position(truth.coords, d, rng))
        sel = np.asarray(reco_fn(q, n_tr))
        got = np.take_along_axis(truth.powers, sel, axis=1).max(axis=1)
        rates.append(float(np.mean(got < best)))
    return float(np.mean(rates)), rates
