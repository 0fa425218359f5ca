"""Command-line entry point: ``hntc <subcommand> [flags]``.

Experiment subcommands read an optional JSON config file; flags override its
values. ``HNTC_OUTPUT_DIR`` sets the output directory when neither the file
nor ``--output-dir`` does.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import channel, database as dbm, experiments as ex, reco, solver, tensor
from .prox import SolverError

OUTPUT_ENV = "HNTC_OUTPUT_DIR"

# flag name -> (config key, type, is list)
_CONFIG_FLAGS = {
    "scene": ("scene_file", str, False),
    "profile": ("profile", str, False),
    "delta-s": ("delta_s", float, False),
    "k-op": ("k_op", float, True),
    "k-tr": ("k_tr", float, True),
    "k-tr-se": ("k_tr_se", float, False),
    "k-op-beams": ("k_op_beams", float, False),
    "snr-r-db": ("snr_r_db", float, False),
    "snr-list": ("snr_list", float, True),
    "alpha": ("alpha", float, False),
    "top-fraction": ("top_fraction", float, False),
    "rank-by": ("rank_by", str, False),
    "weighting": ("weighting", str, True),
    "eta-c": ("eta_c", float, False),
    "trials": ("trials", int, False),
    "seeds": ("seeds", int, True),
    "d-list": ("d_list", float, True),
    "zeta": ("zeta", float, False),
    "k-ini": ("k_ini", float, False),
    "n-upd": ("n_upd", int, False),
    "n-instants": ("n_instants", int, False),
    "output-dir": ("output_dir", str, False),
}

_HNTC_FLAGS = {
    "gamma": float, "lam": float, "eta": float, "eta-rel": float, "beta1": float,
    "beta2": float, "beta2-rel": float, "epsilon": float, "max-iter": int,
}


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file")
    for flag, (_, typ, many) in _CONFIG_FLAGS.items():
        p.add_argument(f"--{flag}", type=typ, nargs="+" if many else None, default=None)
    _add_hntc_flags(p)


def _add_hntc_flags(p):
    for flag, typ in _HNTC_FLAGS.items():
        p.add_argument(f"--{flag}", type=typ, default=None)


def _hntc_overrides(args):
    out = {}
    for flag in _HNTC_FLAGS:
        val = getattr(args, flag.replace("-", "_"), None)
        if val is not None:
            out[flag.replace("-", "_")] = val
    return out


def build_config(args):
    base = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            base = json.load(fh)
    for flag, (key, _, _) in _CONFIG_FLAGS.items():
        val = getattr(args, flag.replace("-", "_"), None)
        if val is not None:
            base[key] = val
    hntc = {**base.get("hntc", {}), **_hntc_overrides(args)}
    if hntc:
        base["hntc"] = hntc
    if "output_dir" not in base and os.environ.get(OUTPUT_ENV):
        base["output_dir"] = os.environ[OUTPUT_ENV]
    return ex.ExperimentConfig.from_dict(base)


def _run_experiment(name):
    def run(args):
        cfg = build_config(args)
        rows = ex.EXPERIMENTS[name](cfg)
        path = ex.write_results(cfg, name, rows)
        print(path)
        return 0
    return run


def cmd_gen_scene(args):
    cfg = build_config(args)
    scene = cfg.scene(args.seed)
    channel.save_scene(args.out, scene)
    print(args.out)
    return 0


def cmd_gen_truth(args):
    cfg = build_config(args)
    st = ex.setup(cfg, args.seed)
    tensor.save_tensor(args.out, st.truth.t_avg)
    print(args.out)
    return 0


def cmd_sample_db(args):
    cfg = build_config(args)
    st = ex.setup(cfg, args.seed)
    db = dbm.sample_observations(st.scene, st.truth, st.bs, st.measured, args.fraction, cfg.alpha,
                                 args.seed, cfg.top_fraction, cfg.rank_by)
    db.save(args.out)
    print(args.out)
    return 0


def cmd_complete(args):
    cfg = build_config(args)
    bs, _ = cfg.codebooks()
    db = dbm.MeasurementDb.load(args.db)
    t, v, w = dbm.build_tensors(db, cfg.grid, bs)
    problem = solver.HntcProblem(t, w, cfg.hntc_config())
    res = solver.solve(problem)
    tensor.save_tensor(args.out, res.x)
    if args.trace:
        solver.write_trace(args.trace, res.trace)
    status = "converged" if res.converged else "max_iter reached"
    print(f"{args.out}: {res.iterations} iterations, {status}")
    return 0


def cmd_recommend(args):
    cfg = build_config(args)
    t_c = tensor.load_tensor(args.tensor)
    if t_c.shape[:2] != cfg.grid.shape:
        raise ValueError(f"tensor grid {t_c.shape[:2]} does not match config grid {cfg.grid.shape}")
    req = reco.RecoRequest(tuple(args.position), args.n_tr, args.d)
    res = reco.gbss(t_c, cfg.grid, req, cfg.zeta) if args.d > 0 else reco.bss(t_c, cfg.grid, req)
    for (u, v), s in zip(res.beams, res.scores):
        print(f"{u},{v},{s!r}")
    return 0


def make_parser():
    parser = argparse.ArgumentParser(prog="hntc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        _add_config_flags(p)
        p.set_defaults(func=func)
        return p

    p = add("gen-scene", cmd_gen_scene, "write a seeded synthetic scene as JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p = add("gen-truth", cmd_gen_truth, "write the label-averaged ground-truth tensor (.npy)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p = add("sample-db", cmd_sample_db, "sample observed positions into a database CSV")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fraction", type=float, default=0.4, help="observed position ratio")
    p.add_argument("--out", required=True)
    p = add("complete", cmd_complete, "run HNTC on a database CSV")
    p.add_argument("--db", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="optional per-iteration trace CSV")
    p = add("recommend", cmd_recommend, "recommend beams for one GPS position")
    p.add_argument("--tensor", required=True)
    p.add_argument("--position", type=float, nargs=2, required=True, metavar=("X", "Y"))
    p.add_argument("--n-tr", type=int, required=True)
    p.add_argument("--d", type=float, default=0.0, help="GPS error radius (m); >0 uses G-BSS")
    add("sweep-rse", _run_experiment("rse_sweep"), "RSE versus observed position ratio")
    add("eval-beams", _run_experiment("beam_alignment"), "power loss and spectral efficiency")
    add("warm-start", _run_experiment("warm_start"), "warm- versus cold-start iterations")
    add("gps-noise", _run_experiment("gps_noise"), "BSS versus G-BSS under GPS error")
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except SolverError as err:
        print(f"solver error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
