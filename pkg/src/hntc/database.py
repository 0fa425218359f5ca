"""Position-labelled received-power database and the tensors built from it.

Every stored record is keyed by a position label ``(p_x, p_y)`` and a BS beam
``(u, v)`` (all 1-based) and keeps a discounted running average of the
measured best-UE-beam power together with the discounted measurement count.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import channel


def round_half_up(x):
    return np.floor(np.asarray(x) + 0.5).astype(int)


@dataclass(frozen=True)
class GridSpec:
    """Discretization of the rectangle ``[x0, x_end] x [y0, y_end]`` with step ``delta_s``.

    Labels run from 1 to ``1 + round(span / delta_s)`` on each axis, which is
    exactly the range reached by :func:`pos_label` over the rectangle.
    """

    x0: float = 10.0
    x_end: float = 60.0
    y0: float = -25.0
    y_end: float = 25.0
    delta_s: float = 5.0

    def __post_init__(self):
        if self.delta_s <= 0:
            raise ValueError("delta_s must be positive")
        if self.x_end < self.x0 or self.y_end < self.y0:
            raise ValueError("empty grid rectangle")

    @property
    def l_x(self):
        return 1 + int(round_half_up((self.x_end - self.x0) / self.delta_s))

    @property
    def l_y(self):
        return 1 + int(round_half_up((self.y_end - self.y0) / self.delta_s))

    @property
    def shape(self):
        return (self.l_x, self.l_y)

    @property
    def n_positions(self):
        return self.l_x * self.l_y

    def contains(self, g):
        g = np.asarray(g, dtype=float)
        return ((g[..., 0] >= self.x0) & (g[..., 0] <= self.x_end)
                & (g[..., 1] >= self.y0) & (g[..., 1] <= self.y_end))

    def clip(self, g):
        g = np.array(g, dtype=float)
        g[..., 0] = np.clip(g[..., 0], self.x0, self.x_end)
        g[..., 1] = np.clip(g[..., 1], self.y0, self.y_end)
        return g

    def center(self, p):
        """Coordinate of label ``p`` (1-based)."""
        p = np.asarray(p, dtype=float)
        return np.stack([self.x0 + (p[..., 0] - 1) * self.delta_s,
                         self.y0 + (p[..., 1] - 1) * self.delta_s], axis=-1)

    def cells(self):
        """Per label (row-major over ``(p_x, p_y)``): the part of the area it owns.

        Returns ``(lo, hi)`` arrays of shape ``(L_x*L_y, 2)``.
        """
        px, py = np.meshgrid(np.arange(1, self.l_x + 1), np.arange(1, self.l_y + 1), indexing="ij")
        c = self.center(np.stack([px.ravel(), py.ravel()], axis=-1))
        lo = self.clip(c - self.delta_s / 2)
        hi = self.clip(c + self.delta_s / 2)
        return lo, hi


def pos_label(grid, g):
    """Closest position label of coordinate(s) ``g``: ``1 + round((g - origin) / delta_s)``.

    Works on a single ``(2,)`` coordinate (returns a tuple) or an ``(N, 2)``
    array (returns an ``(N, 2)`` int array). Halves round up.
    """
    arr = np.asarray(g, dtype=float)
    inside = grid.contains(arr)
    if not np.all(inside):
        raise ValueError("coordinate outside the grid area")
    lab = np.stack([1 + round_half_up((arr[..., 0] - grid.x0) / grid.delta_s),
                    1 + round_half_up((arr[..., 1] - grid.y0) / grid.delta_s)], axis=-1)
    if arr.ndim == 1:
        return (int(lab[0]), int(lab[1]))
    return lab


def reference_coords(grid, n_per_axis=51):
    """Uniform ``n x n`` lattice of GPS coordinates over the grid area, x-major."""
    xs = np.linspace(grid.x0, grid.x_end, n_per_axis)
    ys = np.linspace(grid.y0, grid.y_end, n_per_axis)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


class MeasurementDb:
    """Discounted per-(position, beam) averages.

    Each record holds ``[r_bar, n_bar, last_time]``. Counts decay by ``alpha``
    per elapsed time slot, so a measurement arriving at slot ``k`` updates

        n_bar <- alpha**(k - last_time) * n_bar + 1
        r_bar <- r_bar + (r - r_bar) / n_bar

    Without explicit times each call to :meth:`record` is one slot for that key.
    """

    def __init__(self, alpha=1.0):
        if not 0 < alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        self.alpha = float(alpha)
        self.time = 0
        self.records = {}

    def __len__(self):
        return len(self.records)

    def record(self, p, beam, r, time=None):
        if r < 0:
            raise ValueError("received power must be non-negative")
        key = (int(p[0]), int(p[1]), int(beam[0]), int(beam[1]))
        prev = self.records.get(key)
        if prev is None:
            t = self.time if time is None else time
            rec = [float(r), 1.0, t]
        else:
            r_bar, n_bar, last = prev
            t = last + 1 if time is None else time
            if t < last:
                raise ValueError("measurements must arrive in time order")
            n_new = self.alpha ** (t - last) * n_bar + 1.0
            rec = [r_bar + (r - r_bar) / n_new, n_new, t]
        self.records[key] = rec
        self.time = max(self.time, t)
        return rec[0], rec[1]

    def get(self, p, beam):
        rec = self.records[(int(p[0]), int(p[1]), int(beam[0]), int(beam[1]))]
        return rec[0], rec[1]

    def n_bar(self, key, at_time=None):
        """Count of ``key`` decayed to ``at_time`` (default: the database clock)."""
        r_bar, n_bar, last = self.records[key]
        now = self.time if at_time is None else at_time
        return self.alpha ** max(now - last, 0) * n_bar

    def positions(self):
        return sorted({k[:2] for k in self.records})

    def beams_at(self, p):
        """Stored ``((u, v), r_bar)`` pairs at label ``p``."""
        return [((k[2], k[3]), v[0]) for k, v in sorted(self.records.items()) if k[:2] == tuple(p)]

    def save(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# alpha={self.alpha!r} time={self.time}\n")
            writer = csv.writer(fh)
            writer.writerow(["p_x", "p_y", "u", "v", "r_bar", "n_bar", "last_time"])
            for key in sorted(self.records):
                r_bar, n_bar, last = self.records[key]
                writer.writerow([*key, repr(r_bar), repr(n_bar), last])

    @classmethod
    def load(cls, path):
        with open(path, newline="") as fh:
            head = fh.readline()
            meta = dict(item.split("=") for item in head.lstrip("# ").split())
            db = cls(float(meta["alpha"]))
            db.time = int(meta["time"])
            for row in csv.DictReader(fh):
                key = (int(row["p_x"]), int(row["p_y"]), int(row["u"]), int(row["v"]))
                db.records[key] = [float(row["r_bar"]), float(row["n_bar"]), int(row["last_time"])]
        return db


def build_tensors(db, grid, codebook):
    """Data tensor ``T``, count tensor ``V`` and weight tensor ``W = V / sum V``.

    All three have shape ``(L_x, L_y, C_theta, C_phi)``; ``T`` and ``W`` are
    zero off the observed set.
    """
    if not db.records:
        raise ValueError("database is empty")
    shape = grid.shape + codebook.shape
    t = np.zeros(shape)
    v = np.zeros(shape)
    for key in sorted(db.records):
        idx = (key[0] - 1, key[1] - 1, key[2] - 1, key[3] - 1)
        t[idx] = db.records[key][0]
        v[idx] = db.n_bar(key)
    w = v / v.sum()
    return t, v, w


@dataclass
class GroundTruth:
    """Noiseless best-UE powers at the reference coordinates and their label averages."""

    grid: GridSpec
    coords: np.ndarray
    labels: np.ndarray
    powers: np.ndarray
    t_avg: np.ndarray

    @property
    def n_beams(self):
        return self.powers.shape[1]


def build_ground_truth(scene, grid, bs_codebook, params, n_per_axis=51):
    coords = reference_coords(grid, n_per_axis)
    labels = pos_label(grid, coords)
    h = channel.channels_at(scene, coords)
    powers = channel.best_ue_powers(h, params.p_t, bs_codebook, params.ue_codebook)
    t_avg = label_average(grid, labels, powers).reshape(grid.shape + bs_codebook.shape)
    return GroundTruth(grid, coords, labels, powers, t_avg)


def label_average(grid, labels, values):
    """Mean of ``values`` rows over coordinates sharing a label; ``(L_x*L_y, ...)`` row-major."""
    flat = (labels[:, 0] - 1) * grid.l_y + (labels[:, 1] - 1)
    sums = np.zeros((grid.n_positions,) + values.shape[1:])
    np.add.at(sums, flat, values)
    counts = np.bincount(flat, minlength=grid.n_positions).astype(float)
    if np.any(counts == 0):
        raise ValueError("some position labels have no reference coordinate")
    return sums / counts.reshape((-1,) + (1,) * (values.ndim - 1))


def n_observed_positions(k_op, n_positions):
    return int(math.ceil(k_op * n_positions - 1e-9))


def choose_positions(grid, k_op, seed):
    """Uniformly chosen observed labels (row-major flat indices), in draw order."""
    if not 0 < k_op <= 1:
        raise ValueError("k_op must lie in (0, 1]")
    rng = np.random.default_rng([seed, 31])
    order = rng.permutation(grid.n_positions)
    return order[: n_observed_positions(k_op, grid.n_positions)]


def observe_positions(db, scene, truth, bs_codebook, params, flat_labels, seed,
                      top_fraction=0.1, rank_by="measured"):
    """Ingest measurements of every reference coordinate mapped to the given labels.

    For each coordinate the BS measures all beams (best UE beam each); only the
    top ``ceil(top_fraction * |K|)`` beams are written to the database, ranked
    on measured power (``rank_by="measured"``) or on the noiseless power
    (``rank_by="noiseless"``). Returns ``db``.
    """
    if rank_by not in ("measured", "noiseless"):
        raise ValueError("rank_by must be 'measured' or 'noiseless'")
    grid = truth.grid
    flat = (truth.labels[:, 0] - 1) * grid.l_y + (truth.labels[:, 1] - 1)
    wanted = np.isin(flat, np.asarray(flat_labels))
    idx = np.nonzero(wanted)[0]
    if idx.size == 0:
        return db
    n_top = max(1, int(math.ceil(top_fraction * bs_codebook.size - 1e-9)))
    rng = np.random.default_rng([seed, 97])
    h = channel.channels_at(scene, truth.coords[idx])
    var = params.noise_variance(h)
    measured = channel.best_ue_powers(h, params.p_t, bs_codebook, params.ue_codebook, var, rng)
    ranking = measured if rank_by == "measured" else truth.powers[idx]
    for row, ci in enumerate(idx):
        top = np.argsort(-ranking[row], kind="stable")[:n_top]
        p = tuple(int(a) for a in truth.labels[ci])
        db.time += 1
        for b in np.sort(top):
            db.record(p, bs_codebook.index_of(int(b)), float(measured[row, b]), time=db.time)
    return db


def sample_observations(scene, truth, bs_codebook, params, k_op, alpha=1.0, seed=0,
                        top_fraction=0.1, rank_by="measured"):
    """Fresh database with ``ceil(k_op * L_x * L_y)`` randomly observed positions."""
    db = MeasurementDb(alpha)
    labels = choose_positions(truth.grid, k_op, seed)
    return observe_positions(db, scene, truth, bs_codebook, params, labels, seed,
                             top_fraction, rank_by)
