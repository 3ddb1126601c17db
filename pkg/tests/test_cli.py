from __future__ import annotations

import json

import numpy as np
import pandas as pd
import pytest

from krylovgmm.cli import main, resolve_config


def _sim(tmp_path, *extra):
    args = ["simulate", "--n", "4800", "--m", "250,250", "--seed", "3", "--n-test", "200"]
    paths = {k: str(tmp_path / v) for k, v in [("out", "d.csv"), ("test", "te.csv"), ("truth", "t.json")]}
    args += ["--out", paths["out"], "--out-test", paths["test"], "--truth", paths["truth"], *extra]
    assert main(args) == 0
    return paths


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    paths = _sim(d)
    for backend in ("cholesky", "krylov"):
        out = str(d / f"{backend}.json")
        assert main(["fit", "--data", paths["out"], "--backend", backend, "--seed", "1", "--out", out]) == 0
    return d, paths


class TestRoundTrip:
    def test_simulate_outputs(self, workdir):
        d, paths = workdir
        df = pd.read_csv(paths["out"])
        assert len(df) == 4800 and {"y", "g1", "g2"} <= set(df.columns)
        assert len(pd.read_csv(paths["test"])) == 200
        truth = json.loads((d / "t.json").read_text())
        assert truth["theta"] == [0.25, 0.25]

    def test_backends_agree(self, workdir):
        d, _ = workdir
        a = json.loads((d / "cholesky.json").read_text())["estimates"]
        b = json.loads((d / "krylov.json").read_text())["estimates"]
        assert a.keys() == b.keys()
        for k in a:
            assert abs(a[k] - b[k]) < 1e-2, k

    def test_fit_record(self, workdir):
        d, _ = workdir
        rec = json.loads((d / "krylov.json").read_text())
        assert rec["converged"]
        assert rec["timing"]["runtime_s"] > 0
        assert rec["nll"] == pytest.approx(rec["nll_trace"][-1])
        assert rec["backend"]["t"] == 50 and rec["backend"]["preconditioner"] == "ssor"

    def test_predict(self, workdir):
        d, paths = workdir
        out = d / "p.csv"
        args = ["predict", "--data", paths["out"], "--fit", str(d / "krylov.json"), "--new", paths["test"]]
        assert main([*args, "--s", "200", "--seed", "2", "--out", str(out)]) == 0
        p = pd.read_csv(out)
        assert len(p) == 200
        assert np.all(p["var"] >= 0)
        rec = json.loads((d / "krylov.json").read_text())
        np.testing.assert_allclose(p["response_var"], p["var"] + rec["sigma2"], rtol=1e-12)
        chol = d / "pc.csv"
        assert main([*args, "--backend", "cholesky", "--method", "cholesky", "--out", str(chol)]) == 0
        np.testing.assert_allclose(p["mean"], pd.read_csv(chol)["mean"], atol=1e-3)

    def test_byte_identical_reruns(self, workdir, tmp_path):
        d, paths = workdir
        again = _sim(tmp_path)
        for k in ("out", "test", "truth"):
            assert open(again[k], "rb").read() == open(paths[k], "rb").read()
        out = tmp_path / "k.json"
        assert main(["fit", "--data", paths["out"], "--seed", "1", "--out", str(out)]) == 0
        a = json.loads(out.read_text())
        b = json.loads((d / "krylov.json").read_text())
        a.pop("timing"), b.pop("timing")
        assert json.dumps(a) == json.dumps(b)

    def test_floats_round_trip(self, workdir):
        _, paths = workdir
        line = open(paths["out"]).readlines()[1].split(",")
        v = float(line[0])
        assert repr(v) == repr(float(f"{v:.17g}"))


class TestErrors:
    def test_unknown_column(self, workdir, capsys):
        _, paths = workdir
        code = main(["fit", "--data", paths["out"], "--fixed", "x1,zzz", "--out", "/dev/null"])
        assert code == 2
        assert "zzz" in capsys.readouterr().err

    def test_missing_file(self, tmp_path, capsys):
        assert main(["fit", "--data", str(tmp_path / "nope.csv")]) == 2
        assert "nope.csv" in capsys.readouterr().err

    def test_bad_value_line_number(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text("y,x1,g1\n1.0,2.0,a\n0.5,oops,b\n")
        assert main(["fit", "--data", str(path)]) == 2
        err = capsys.readouterr().err
        assert "line 3" in err and "x1" in err

    def test_no_group_columns(self, tmp_path, capsys):
        path = tmp_path / "nogroup.csv"
        path.write_text("y,x1\n1.0,2.0\n")
        assert main(["fit", "--data", str(path)]) == 2

    def test_numerical_failure_emits_json(self, workdir, monkeypatch, capsys):
        import krylovgmm.cli as cli

        def boom(*a, **k):
            raise np.linalg.LinAlgError("not positive definite")

        monkeypatch.setattr(cli, "fit", boom)
        _, paths = workdir
        assert main(["fit", "--data", paths["out"]]) == 1
        diag = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert diag["command"] == "fit" and diag["error"] == "LinAlgError"

    def test_unknown_preconditioner(self, workdir, capsys):
        _, paths = workdir
        code = main(["spectrum", "--data", paths["out"], "--preconditioners", "ssor,bogus"])
        assert code == 2
        assert "bogus" in capsys.readouterr().err


class TestConfig:
    def test_defaults(self):
        cfg = resolve_config(["fit"])
        assert (cfg.t, cfg.rank, cfg.s, cfg.preconditioner, cfg.backend) == (50, 50, 1000, "ssor", "krylov")
        assert (cfg.cg_tol, cfg.cg_tol_pred) == (1e-2, 1e-3)

    def test_precedence(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"t": 80, "seed": 9, "cg-tol": 1e-4}))
        cfg = resolve_config(["fit", "--config", str(path), "--t", "20"])
        assert cfg.t == 20 and cfg.seed == 9 and cfg.cg_tol == 1e-4

    def test_unknown_key(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"tt": 1}))
        assert main(["fit", "--config", str(path)]) == 2
        assert "tt" in capsys.readouterr().err

    def test_workers_env(self, monkeypatch, workdir):
        _, paths = workdir
        monkeypatch.setenv("KRYLOVGMM_WORKERS", "x")
        assert main(["fit", "--data", paths["out"]]) == 2


class TestAnalysisCommands:
    def test_bench_precond_ordering(self, tmp_path):
        data = tmp_path / "d.csv"
        sim = ["simulate", "--n", "20000", "--m", "1000,1000", "--seed", "5", "--out", str(data)]
        assert main(sim) == 0
        out = tmp_path / "b.csv"
        args = ["bench-precond", "--data", str(data), "--reps", "30", "--out", str(out)]
        assert main([*args, "--preconditioners", "ssor,zic,diagonal,none"]) == 0
        tab = pd.read_csv(out).set_index("preconditioner")
        assert list(tab.index) == ["ssor", "zic", "diagonal", "none"]
        assert tab.loc["ssor", "sd"] < tab.loc["diagonal", "sd"]
        assert tab.loc["zic", "sd"] < tab.loc["diagonal", "sd"]
        assert np.all(np.isfinite(tab["exact"]))

    def test_spectrum_json(self, tmp_path):
        data = tmp_path / "d.csv"
        sim = ["simulate", "--n", "2000", "--m", "200,200", "--seed", "1", "--out", str(data)]
        assert main(sim) == 0
        out = tmp_path / "s.json"
        args = ["spectrum", "--data", str(data), "--preconditioners", "ssor,diagonal", "--out", str(out)]
        assert main(args) == 0
        rep = json.loads(out.read_text())
        assert set(rep["reports"]) == {"ssor", "diagonal"}
        assert "comparison" in rep


def test_missing_group_label_is_its_own_level(tmp_path):
    path = tmp_path / "na.csv"
    path.write_text("y,x1,g1\n1.0,2.0,a\n0.5,1.0,\n0.2,0.1,b\n0.3,0.3,\n")
    out = tmp_path / "f.json"
    assert main(["fit", "--data", str(path), "--backend", "cholesky", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["data"]["sizes"] == [3]
