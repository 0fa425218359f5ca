"""Seeded experiment pipelines on synthetic scenes, with CSV/JSON output.

Every pipeline loops over ``config.seeds``; a seed fixes the scene (its
random gain fields), the observed positions and all noise draws, so a rerun
with the same configuration reproduces the CSV byte for byte.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import platform
from dataclasses import dataclass, field

import numpy as np

from . import __version__, channel, database as dbm, reco, solver

log = logging.getLogger(__name__)

PROFILES = {
    "desk": {"bs_array": (8, 8), "bs_codebook": (8, 8), "ue_array": (2, 2), "ue_codebook": (2, 2)},
    "full": {"bs_array": (16, 16), "bs_codebook": (16, 16), "ue_array": (4, 4), "ue_codebook": (4, 4)},
}

CSV_COLUMNS = ["experiment", "algorithm", "k_op", "k_tr", "n_tr", "d", "snr_r_db", "instant",
               "metric", "seed", "value", "mean", "stderr", "n", "flag"]


@dataclass
class ExperimentConfig:
    scene_file: str | None = None
    profile: str = "desk"
    x0: float = 10.0
    x_end: float = 60.0
    y0: float = -25.0
    y_end: float = 25.0
    delta_s: float = 5.0
    n_ref: int = 51
    k_op: list = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8])
    k_tr: list = field(default_factory=lambda: [0.02, 0.05, 0.1, 0.2, 0.5, 1.0])
    k_tr_se: float = 0.02
    k_op_beams: float = 0.4
    snr_r_db: float | None = None
    snr_list: list = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0])
    alpha: float = 1.0
    top_fraction: float = 0.1
    rank_by: str = "measured"
    weighting: list = field(default_factory=lambda: ["count"])
    eta_c: float = 1.0
    hntc: dict = field(default_factory=dict)
    trials: int = 1
    seeds: list = field(default_factory=lambda: list(range(10)))
    d_list: list = field(default_factory=lambda: [0.0, 10.0, 20.0])
    zeta: float = reco.ZETA
    k_ini: float = 0.3
    n_upd: int = 5
    n_instants: int = 5
    output_dir: str = "results"

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if any(not 0 < k <= 1 for k in self.k_op) or not 0 < self.k_op_beams <= 1:
            raise ValueError("k_op values must lie in (0, 1]")
        if any(not 0 < k <= 1 for k in self.k_tr) or not 0 < self.k_tr_se <= 1:
            raise ValueError("k_tr values must lie in (0, 1]")
        if not 0 < self.k_ini < 1:
            raise ValueError("k_ini must lie in (0, 1)")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0 < self.top_fraction <= 1:
            raise ValueError("top_fraction must lie in (0, 1]")
        if self.rank_by not in ("measured", "noiseless"):
            raise ValueError("rank_by must be 'measured' or 'noiseless'")
        if any(w not in ("count", "uniform") for w in self.weighting):
            raise ValueError("weighting entries must be 'count' or 'uniform'")
        if self.trials < 1 or self.n_upd < 1 or self.n_instants < 3 or self.n_ref < 2:
            raise ValueError("trials, n_upd >= 1, n_instants >= 3, n_ref >= 2 required")
        if any(d < 0 for d in self.d_list):
            raise ValueError("error radii must be non-negative")
        if not self.seeds or any(int(s) != s or s < 0 for s in self.seeds):
            raise ValueError("seeds must be explicit non-negative integers")
        self.seeds = [int(s) for s in self.seeds]
        solver.HntcConfig(**self.hntc)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def grid(self):
        return dbm.GridSpec(self.x0, self.x_end, self.y0, self.y_end, self.delta_s)

    def codebooks(self):
        prof = PROFILES[self.profile]
        bs = channel.UpaCodebook(*prof["bs_array"], *prof["bs_codebook"])
        ue = channel.UpaCodebook(*prof["ue_array"], *prof["ue_codebook"])
        return bs, ue

    def scene(self, seed):
        prof = PROFILES[self.profile]
        if self.scene_file:
            base = channel.load_scene(self.scene_file)
        else:
            base = channel.Scene(x0=self.x0, x_end=self.x_end, y0=self.y0, y_end=self.y_end)
        base = dataclasses.replace(base, seed=int(seed), bs_array=tuple(prof["bs_array"]),
                                   ue_array=tuple(prof["ue_array"]))
        return base

    def hntc_config(self, **over):
        return solver.HntcConfig(**{**self.hntc, **over})


@dataclass
class Setup:
    """Everything derived from one seed: scene, codebooks, ground truth."""

    seed: int
    scene: channel.Scene
    bs: channel.UpaCodebook
    ue: channel.UpaCodebook
    truth: dbm.GroundTruth
    noiseless: channel.MeasurementParams
    measured: channel.MeasurementParams


def setup(config, seed, snr_r_db=None):
    bs, ue = config.codebooks()
    scene = config.scene(seed)
    noiseless = channel.MeasurementParams(ue_codebook=ue)
    truth = dbm.build_ground_truth(scene, config.grid, bs, noiseless, config.n_ref)
    snr = config.snr_r_db if snr_r_db is None else snr_r_db
    measured = channel.MeasurementParams(ue_codebook=ue, snr_r_db=snr)
    return Setup(seed, scene, bs, ue, truth, noiseless, measured)


def rse(t_c, t_avg):
    """Relative error ``||T_c - T_avg||_F / ||T_avg||_F``."""
    t_c = np.asarray(t_c, dtype=float)
    t_avg = np.asarray(t_avg, dtype=float)
    if t_c.shape != t_avg.shape:
        raise ValueError("shape mismatch")
    ref = np.linalg.norm(t_avg.ravel())
    if ref == 0:
        raise ValueError("ground-truth tensor is zero")
    return float(np.linalg.norm((t_c - t_avg).ravel()) / ref)


def nearest_copy(t, grid):
    """Baseline: every label takes the stored slice of the nearest observed label."""
    slabs = t.reshape(grid.n_positions, -1)
    observed = np.nonzero(slabs.any(axis=1))[0]
    if observed.size == 0:
        raise ValueError("no observed positions")
    px, py = np.divmod(np.arange(grid.n_positions), grid.l_y)
    ox, oy = px[observed], py[observed]
    out = np.empty_like(slabs)
    for i in range(grid.n_positions):
        dist = (ox - px[i]) ** 2 + (oy - py[i]) ** 2
        out[i] = slabs[observed[np.argmin(dist)]]
    return out.reshape(t.shape)


def noise_variance_tensor(st, config, t):
    """Per-entry variance of one noisy power measurement, ``2 r sigma^2 + sigma^4``.

    ``sigma^2`` is averaged over the reference coordinates of each label; the
    noiseless power is approximated by the stored average ``t``.
    """
    h = channel.channels_at(st.scene, st.truth.coords)
    var_c = st.measured.noise_variance(h)
    grid = config.grid
    sig = dbm.label_average(grid, st.truth.labels, var_c).reshape(grid.shape)
    sig = sig.reshape(grid.shape + (1,) * (t.ndim - 2))
    return 2 * t * sig + sig ** 2


def complete(st, config, db, weighting="count", prior=None):
    """HNTC on a database; returns ``(SolveResult, T, V)``."""
    t, v, w = dbm.build_tensors(db, config.grid, st.bs)
    if weighting == "uniform":
        mask = v > 0
        w = mask / mask.sum()
    over = {}
    noisy = config.snr_r_db is not None
    if noisy and "eta" not in config.hntc:
        over["eta"] = solver.noise_budget(w, v, noise_variance_tensor(st, config, t), config.eta_c)
    problem = solver.HntcProblem(t, w, config.hntc_config(**over))
    result = solver.solve(problem) if prior is None else solver.solve_warm(problem, prior)
    return result, t, v


def _stats(values):
    arr = np.asarray(values, dtype=float)
    n = arr.size
    stderr = float(arr.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(arr.mean()), stderr, n


def _fmt(x):
    if x is None or x == "":
        return ""
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def make_row(experiment, metric, value, seed, **params):
    row = {c: "" for c in CSV_COLUMNS}
    row.update(experiment=experiment, metric=metric, seed=seed, value=value,
               mean=value, stderr=0.0, n=1)
    row.update(params)
    return row


def agg_label(seeds):
    """Seed field of aggregate rows, e.g. ``agg:0;1;2``."""
    return "agg:" + ";".join(str(s) for s in seeds)


def aggregate(rows, seeds):
    """Append one mean/stderr row per (experiment, params, metric) across seeds."""
    keys = [c for c in CSV_COLUMNS if c not in ("seed", "value", "mean", "stderr", "n", "flag")]
    groups = {}
    for r in rows:
        groups.setdefault(tuple(_fmt(r[k]) for k in keys), []).append(r)
    out = list(rows)
    label = agg_label(seeds)
    for key, members in groups.items():
        mean, stderr, n = _stats([m["value"] for m in members])
        agg = dict(zip(keys, key))
        flags = sorted({m["flag"] for m in members if m["flag"]})
        agg.update(seed=label, value=mean, mean=mean, stderr=stderr, n=n, flag="|".join(flags))
        agg["metric"] = members[0]["metric"]
        out.append(agg)
    return out


def rows_to_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({c: _fmt(r.get(c, "")) for c in CSV_COLUMNS})
    return buf.getvalue()


def write_results(config, name, rows):
    """Write ``<name>.csv`` plus ``<name>.manifest.json`` into the output directory."""
    os.makedirs(config.output_dir, exist_ok=True)
    path = os.path.join(config.output_dir, f"{name}.csv")
    text = rows_to_csv(rows)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    manifest = {
        "experiment": name,
        "config": config.to_dict(),
        "config_sha256": config.digest(),
        "seeds": config.seeds,
        "software": {"hntc": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "csv": os.path.basename(path),
        "csv_sha256": hashlib.sha256(text.encode()).hexdigest(),
    }
    with open(os.path.join(config.output_dir, f"{name}.manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _flag(result):
    return "" if result.converged else "not_converged"


def run_rse_sweep(config):
    """RSE of HNTC and of the zero-fill / nearest-copy baselines versus ``k_op``."""
    rows = []
    for seed in config.seeds:
        st = setup(config, seed)
        for k_op in config.k_op:
            db = dbm.sample_observations(st.scene, st.truth, st.bs, st.measured, k_op, config.alpha,
                                         seed, config.top_fraction, config.rank_by)
            common = dict(k_op=k_op, snr_r_db=config.snr_r_db if config.snr_r_db is not None else "")
            t = None
            for weighting in config.weighting:
                res, t, _ = complete(st, config, db, weighting)
                algo = "hntc" if weighting == "count" else "hntc-uniform"
                rows.append(make_row("rse_sweep", "rse", rse(res.x, st.truth.t_avg), seed,
                                     algorithm=algo, flag=_flag(res), **common))
                rows.append(make_row("rse_sweep", "iterations", float(res.iterations), seed,
                                     algorithm=algo, flag=_flag(res), **common))
            rows.append(make_row("rse_sweep", "rse", rse(t, st.truth.t_avg), seed,
                                 algorithm="zero-fill", **common))
            rows.append(make_row("rse_sweep", "rse", rse(nearest_copy(t, config.grid), st.truth.t_avg),
                                 seed, algorithm="nearest-copy", **common))
        log.info("rse sweep: seed %d done", seed)
    return aggregate(rows, config.seeds)


def selection_gain_ratio(st, chosen):
    """Per reference coordinate: ``|w^H H f|^2 / ||H||_2^2`` of the best pair in ``S x F``."""
    h = channel.channels_at(st.scene, st.truth.coords)
    gains = np.abs(channel.beam_pair_gains(h, st.bs, st.ue)) ** 2
    h_norm2 = np.linalg.norm(h, ord=2, axis=(1, 2)) ** 2
    sub = np.take_along_axis(gains, chosen[:, :, None], axis=1)
    flat = sub.reshape(sub.shape[0], -1)
    return flat.max(axis=1) / h_norm2


def run_beam_alignment_eval(config):
    """Power-loss curves versus ``k_tr`` and spectral efficiency versus SNR."""
    rows = []
    n_beams = None
    for seed in config.seeds:
        st = setup(config, seed)
        n_beams = st.bs.size
        db = dbm.sample_observations(st.scene, st.truth, st.bs, st.measured, config.k_op_beams,
                                     config.alpha, seed, config.top_fraction, config.rank_by)
        res, _, _ = complete(st, config, db)
        recos = {
            "hntc-bss": reco.SliceRecommender(res.x, config.grid),
            "genie": reco.SliceRecommender(st.truth.t_avg, config.grid),
            "type-b": reco.TypeBRecommender(db, config.grid, n_beams, st.bs.c_phi),
        }
        for k_tr in config.k_tr:
            n_tr = reco.n_trained(k_tr, n_beams)
            for name, fn in recos.items():
                p, _ = reco.power_loss_probability(st.truth, fn, n_tr, config.trials, seed)
                rows.append(make_row("beam_alignment", "power_loss", p, seed, algorithm=name,
                                     k_op=config.k_op_beams, k_tr=k_tr, n_tr=n_tr,
                                     flag=_flag(res) if name == "hntc-bss" else ""))
        n_tr = reco.n_trained(config.k_tr_se, n_beams)
        for name, fn in recos.items():
            ratio = selection_gain_ratio(st, np.asarray(fn(st.truth.coords, n_tr)))
            for snr in config.snr_list:
                se = np.mean([reco.spectral_efficiency(snr, r, n_tr, st.ue.size)[0] for r in ratio])
                rows.append(make_row("beam_alignment", "spectral_efficiency", float(se), seed,
                                     algorithm=name, k_op=config.k_op_beams, k_tr=config.k_tr_se,
                                     n_tr=n_tr, snr_r_db=snr))
        ratio = selection_gain_ratio(st, np.tile(np.arange(n_beams), (len(st.truth.coords), 1)))
        for snr in config.snr_list:
            out = [reco.spectral_efficiency(snr, r, n_beams, st.ue.size) for r in ratio]
            se = float(np.mean([o[0] for o in out]))
            rows.append(make_row("beam_alignment", "spectral_efficiency", se, seed,
                                 algorithm="exhaustive", k_tr=1.0, n_tr=n_beams, snr_r_db=snr,
                                 flag="" if out[0][1] else "infeasible"))
        log.info("beam alignment: seed %d done", seed)
    return aggregate(rows, config.seeds)


def run_warm_start_study(config):
    """Iterations and RSE of warm- versus cold-started HNTC over database updates."""
    rows = []
    for seed in config.seeds:
        st = setup(config, seed)
        grid = config.grid
        order = np.random.default_rng([seed, 53]).permutation(grid.n_positions)
        n0 = dbm.n_observed_positions(config.k_ini, grid.n_positions)
        need = n0 + config.n_upd * config.n_instants
        if need > grid.n_positions:
            raise ValueError(f"{need} positions requested but the grid only has {grid.n_positions}")
        db = dbm.MeasurementDb(config.alpha)
        dbm.observe_positions(db, st.scene, st.truth, st.bs, st.measured, order[:n0], seed,
                              config.top_fraction, config.rank_by)
        prior = None
        for instant in range(config.n_instants + 1):
            if instant:
                lo = n0 + config.n_upd * (instant - 1)
                dbm.observe_positions(db, st.scene, st.truth, st.bs, st.measured,
                                      order[lo: lo + config.n_upd], seed * 1000 + instant,
                                      config.top_fraction, config.rank_by)
            cold, _, _ = complete(st, config, db)
            warm = cold if prior is None else complete(st, config, db, prior=prior)[0]
            for name, res in (("cold", cold), ("warm", warm)):
                for metric, value in (("iterations", float(res.iterations)),
                                      ("rse", rse(res.x, st.truth.t_avg))):
                    rows.append(make_row("warm_start", metric, value, seed, algorithm=name,
                                         instant=instant, flag=_flag(res)))
            prior = warm.state
        log.info("warm start: seed %d done", seed)
    return aggregate(rows, config.seeds)


def run_gps_noise_study(config):
    """Power loss of BSS and G-BSS versus ``k_tr`` under uniform disk position errors."""
    rows = []
    for seed in config.seeds:
        st = setup(config, seed)
        db = dbm.sample_observations(st.scene, st.truth, st.bs, st.measured, config.k_op_beams,
                                     config.alpha, seed, config.top_fraction, config.rank_by)
        res, _, _ = complete(st, config, db)
        n_beams = st.bs.size
        for d in config.d_list:
            algos = {"bss": reco.SliceRecommender(res.x, config.grid),
                     "g-bss": reco.GroupRecommender(res.x, config.grid, d, config.zeta)}
            for k_tr in config.k_tr:
                n_tr = reco.n_trained(k_tr, n_beams)
                for name, fn in algos.items():
                    # same seed for both algorithms: paired position errors
                    p, _ = reco.power_loss_probability(st.truth, fn, n_tr, config.trials, seed, d)
                    rows.append(make_row("gps_noise", "power_loss", p, seed, algorithm=name,
                                         k_op=config.k_op_beams, k_tr=k_tr, n_tr=n_tr, d=d,
                                         flag=_flag(res)))
        log.info("gps noise: seed %d done", seed)
    return aggregate(rows, config.seeds)


EXPERIMENTS = {
    "rse_sweep": run_rse_sweep,
    "beam_alignment": run_beam_alignment_eval,
    "warm_start": run_warm_start_study,
    "gps_noise": run_gps_noise_study,
}


def select(rows, **match):
    """Rows whose fields equal ``match`` (compared as formatted strings)."""
    want = {k: _fmt(v) for k, v in match.items()}
    return [r for r in rows if all(_fmt(r.get(k, "")) == v for k, v in want.items())]


def summary(rows, seeds, **match):
    """The aggregate row matching ``match``."""
    hits = select(rows, seed=agg_label(seeds), **match)
    if len(hits) != 1:
        raise KeyError(f"expected one aggregate row for {match}, found {len(hits)}")
    return hits[0]


def per_seed(rows, seeds, **match):
    """Per-seed values matching ``match``, in seed order."""
    out = []
    for s in seeds:
        hits = select(rows, seed=s, **match)
        if len(hits) != 1:
            raise KeyError(f"expected one row for seed {s} and {match}, found {len(hits)}")
        out.append(float(hits[0]["value"]))
    return out
