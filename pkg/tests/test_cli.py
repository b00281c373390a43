import json

import numpy as np
import pytest

from simcache import cli, rounding
from simcache.catalog import save_csv


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_gen_trace_grid(tmp_path, capsys):
    assert run("gen-trace", "--kind", "grid", "--side", 30, "--T", 10000, "--seed", 1,
               "--out-catalog", tmp_path / "cat.csv", "--out-trace", tmp_path / "t.csv") == 0
    out = capsys.readouterr().out
    assert "N=900" in out and "T=10000" in out
    assert len((tmp_path / "cat.csv").read_text().splitlines()) == 900
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 10001


def test_gen_trace_rank(tmp_path, capsys):
    save_csv(tmp_path / "c.csv", np.random.default_rng(0).normal(size=(300, 4)))
    assert run("gen-trace", "--kind", "rank", "--beta", 1.2, "--T", 100000, "--catalog", tmp_path / "c.csv",
               "--out-trace", tmp_path / "t.csv", "--out-catalog", tmp_path / "c.fvecs") == 0
    assert "tail_exponent" in capsys.readouterr().out
    assert (tmp_path / "c.fvecs").stat().st_size == 300 * (4 + 1) * 4


def test_gen_trace_usage_errors(tmp_path):
    assert run("gen-trace", "--T", 0, "--out-trace", tmp_path / "t.csv") == 2
    assert run("gen-trace", "--kind", "bogus") == 2
    assert run("gen-trace", "--kind", "rank", "--catalog", tmp_path / "missing.csv",
               "--out-trace", tmp_path / "t.csv") == 4


def test_run_outputs_are_reproducible(tmp_path, capsys):
    args = ["run", "--side", 12, "--T", 400, "--k", 2, "--h", 6, "--cf", 2, "--seed", 3]
    assert run(*args, "--out", tmp_path / "a.csv", "--summary", tmp_path / "a.json") == 0
    assert run(*args, "--out", tmp_path / "b.csv", "--summary", tmp_path / "b.json") == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    summary = json.loads((tmp_path / "a.json").read_text())
    assert summary["config"]["seed"] == 3 and 0 <= summary["nag"] <= 1
    assert "nag=" in capsys.readouterr().out


def test_run_baseline_and_unknown_policy(tmp_path, capsys):
    assert run("run", "--side", 12, "--T", 300, "--k", 2, "--h", 20, "--cf", 2, "--policy", "sim-lru",
               "--kprime", 10, "--ctheta", "1.5cf") == 0
    assert run("run", "--policy", "belady") == 2
    err = capsys.readouterr().err
    assert "valid names" in err and "sim-lru" in err


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"side": 10, "T": 200, "k": 1, "h": 5, "cf": 1.0, "policy": "lru",
                               "summary": str(tmp_path / "s.json")}))
    assert run("run", "--config", cfg, "--policy", "qcache") == 0
    assert json.loads((tmp_path / "s.json").read_text())["config"]["policy"] == "qcache"
    cfg.write_text(json.dumps({"side": 10, "colour": "red"}))
    assert run("run", "--config", cfg) == 2
    cfg.write_text(json.dumps({"T": "many"}))
    assert run("run", "--config", cfg) == 2
    cfg.write_text("{not json")
    assert run("run", "--config", cfg) == 2
    assert run("run", "--config", tmp_path / "absent.json") == 4


def test_file_trace_mismatch(tmp_path, capsys):
    save_csv(tmp_path / "c.csv", np.zeros((10, 3)))
    (tmp_path / "t.csv").write_text("t,x0,x1\n0,1.0,2.0\n")
    assert run("run", "--kind", "file", "--catalog", tmp_path / "c.csv", "--trace", tmp_path / "t.csv",
               "--h", 2) == 2
    assert "dimension" in capsys.readouterr().err


def test_offline_tiny_instance(tmp_path, capsys):
    assert run("offline", "--side", 8, "--T", 500, "--k", 2, "--h", 4, "--cf", 2, "--scale", 2.0,
               "--iterations", 3000, "--allocation", tmp_path / "y.csv", "--summary", tmp_path / "r.json") == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["oracle_gap"] <= 0.01
    rows = (tmp_path / "y.csv").read_text().splitlines()
    assert rows[0] == "object_id,x0,x1,y,x" and len(rows) == 65
    assert run("offline", "--side", 8, "--T", 500, "--k", 2, "--h", 4, "--cf", 2, "--iterations", 500,
               "--mirror", "euclidean", "--summary", tmp_path / "e.json") == 0
    assert json.loads((tmp_path / "e.json").read_text())["mirror"] == "euclidean"


def test_round_check(capsys):
    assert run("round-check", "--draws", 20000, "--h", 1000, "--steps", 300) == 0
    out = capsys.readouterr().out
    assert "coupled_movement_identity" in out and "FAIL" not in out
    assert run("round-check", "--scheme", "depround", "--M", 100, "--draws", 5000, "--steps", 1000) == 0
    assert "fetch_rate_M100_vs_M1" in capsys.readouterr().out


def test_round_check_failure_exit_code(monkeypatch):
    def broken(*a, **k):
        return {"depround_marginals": {"value": 0.5, "target": "<= 0.01", "passed": False}}
    monkeypatch.setattr(rounding, "check_depround", broken)
    assert run("round-check", "--scheme", "depround", "--draws", 10) == 3


def test_sweep_and_report(tmp_path, monkeypatch):
    monkeypatch.setenv("SIMCACHE_JOBS", "2")
    assert run("sweep", "--side", 10, "--T", 200, "--h", 6, "--axis", "k=1,2", "--axis", "cf=1,2",
               "--seeds", 0, 1, "--outdir", tmp_path / "s") == 0
    table = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
    assert len(table) == 1 + 8
    assert run("sweep", "--side", 10, "--T", 200, "--h", 6, "--axis", "k=1,2", "--axis", "cf=1,2",
               "--seeds", 0, 1, "--outdir", tmp_path / "s2", "--jobs", 1) == 0
    assert (tmp_path / "s2" / "sweep.csv").read_bytes() == (tmp_path / "s" / "sweep.csv").read_bytes()
    assert run("report", tmp_path / "s", "--keys", "k", "cf", "--out", tmp_path / "r.csv") == 0
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 9
    assert run("sweep", "--axis", "nonsense=1", "--outdir", tmp_path / "s3") == 2
    assert run("report", tmp_path / "missing.json") == 4
    (tmp_path / "empty").mkdir()
    assert run("report", tmp_path / "empty") == 2


def test_bad_jobs_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SIMCACHE_JOBS", "lots")
    assert run("sweep", "--side", 5, "--T", 10, "--h", 2, "--outdir", tmp_path / "s") == 2


def test_seed_streams_are_independent():
    a = cli.component_rng(5, "trace").random(3)
    b = cli.component_rng(5, "rounding").random(3)
    assert not np.allclose(a, b)
    assert np.array_equal(a, cli.component_rng(5, "trace").random(3))


def test_parse_ctheta():
    assert cli.parse_ctheta("1.5cf", 2.0) == 3.0
    assert cli.parse_ctheta("cf", 2.0) == 2.0
    assert cli.parse_ctheta("0.7", 2.0) == 0.7
    with pytest.raises(cli.ConfigError):
        cli.parse_ctheta("fast", 1.0)
