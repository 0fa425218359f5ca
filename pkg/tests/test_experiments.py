import json

import numpy as np
import pytest

from hntc import cli, experiments as ex


def test_rse_examples():
    rng = np.random.default_rng(0)
    t = rng.uniform(size=(3, 3, 2, 2))
    assert ex.rse(t, t) == 0
    assert ex.rse(np.zeros_like(t), t) == 1
    assert ex.rse(2 * t, t) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ex.rse(t, np.zeros_like(t))
    with pytest.raises(ValueError):
        ex.rse(t[:2], t)


def test_nearest_copy_baseline():
    grid = ex.ExperimentConfig().grid
    t = np.zeros(grid.shape + (1, 2))
    t[0, 0] = [[1.0, 2.0]]
    t[10, 10] = [[3.0, 4.0]]
    out = ex.nearest_copy(t, grid)
    np.testing.assert_array_equal(out[2, 1], [[1.0, 2.0]])
    np.testing.assert_array_equal(out[8, 9], [[3.0, 4.0]])


@pytest.mark.parametrize("bad", [{"k_op": [0.0]}, {"k_tr": [1.5]}, {"alpha": 0}, {"seeds": []},
                                 {"seeds": [1.5]}, {"profile": "huge"}, {"n_instants": 2},
                                 {"hntc": {"lam": -1}}, {"nonsense": 1}, {"d_list": [-1.0]}])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        ex.ExperimentConfig.from_dict(bad)


def test_config_digest_stable():
    a = ex.ExperimentConfig(seeds=[1, 2])
    assert a.digest() == ex.ExperimentConfig.from_dict(a.to_dict()).digest()
    assert a.digest() != ex.ExperimentConfig(seeds=[1, 3]).digest()


def test_profiles():
    bs, ue = ex.ExperimentConfig(profile="full").codebooks()
    assert (bs.size, ue.size) == (256, 16)
    bs, ue = ex.ExperimentConfig().codebooks()
    assert (bs.size, ue.size) == (64, 4)


def test_aggregate_rows():
    rows = [ex.make_row("e", "m", float(v), s, algorithm="a", k_op=0.4) for s, v in enumerate([1, 2, 3])]
    out = ex.aggregate(rows, [0, 1, 2])
    agg = ex.summary(out, [0, 1, 2], algorithm="a", metric="m")
    assert agg["mean"] == 2 and agg["n"] == 3 and agg["stderr"] == pytest.approx(1 / np.sqrt(3))
    assert ex.per_seed(out, [0, 1, 2], algorithm="a", metric="m") == [1, 2, 3]
    assert all(r["seed"] != "" for r in out)


def small_config(tmp_path, **kw):
    base = dict(seeds=[0], k_op=[0.4], k_tr=[0.1], snr_list=[10.0], d_list=[0.0, 10.0],
                n_instants=3, output_dir=str(tmp_path))
    base.update(kw)
    return ex.ExperimentConfig(**base)


def test_rse_sweep_rows_and_files(tmp_path):
    cfg = small_config(tmp_path)
    rows = ex.run_rse_sweep(cfg)
    algos = {r["algorithm"] for r in rows}
    assert algos == {"hntc", "zero-fill", "nearest-copy"}
    path = ex.write_results(cfg, "rse_sweep", rows)
    manifest = json.loads((tmp_path / "rse_sweep.manifest.json").read_text())
    assert manifest["config_sha256"] == cfg.digest() and manifest["seeds"] == [0]
    header = open(path).readline().strip().split(",")
    assert header == ex.CSV_COLUMNS


def test_warm_start_instant_zero_identical(tmp_path):
    rows = ex.run_warm_start_study(small_config(tmp_path))
    for metric in ("iterations", "rse"):
        cold = ex.per_seed(rows, [0], algorithm="cold", metric=metric, instant=0)
        warm = ex.per_seed(rows, [0], algorithm="warm", metric=metric, instant=0)
        assert cold == warm


def test_cli_runs_and_env_output_dir(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"seeds": [0], "k_tr": [0.1], "d_list": [0.0]}))
    assert cli.main(["gps-noise", "--config", str(conf), "--k-op-beams", "0.3"]) == 0
    assert (tmp_path / "env" / "gps_noise.csv").exists()
    assert cli.main(["gen-scene", "--out", str(tmp_path / "s.json"), "--seed", "4"]) == 0
    assert json.loads((tmp_path / "s.json").read_text())["seed"] == 4


def test_cli_pipeline(tmp_path):
    db = tmp_path / "db.csv"
    tc = tmp_path / "tc.npy"
    assert cli.main(["sample-db", "--seed", "1", "--fraction", "0.3", "--out", str(db)]) == 0
    assert cli.main(["complete", "--db", str(db), "--out", str(tc), "--trace", str(tmp_path / "tr.csv")]) == 0
    assert cli.main(["gen-truth", "--out", str(tmp_path / "truth.npy")]) == 0
    assert cli.main(["recommend", "--tensor", str(tc), "--position", "30", "0", "--n-tr", "2"]) == 0


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert cli.main(["sweep-rse", "--k-op", "1.5"]) != 0
    assert cli.main(["complete", "--db", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "x.npy")]) != 0
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["sweep-rse", "--config", str(bad)]) != 0
    with pytest.raises(SystemExit):
        cli.main(["no-such-command"])
