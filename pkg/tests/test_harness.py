import json
import math

import numpy as np
import pytest

from driftfv.harness import cli
from driftfv.harness.cases import builtin_case, case_names
from driftfv.harness.io import (ConfigError, DIAG_COLUMNS, read_config, read_diagnostics,
                                read_snapshot, write_snapshot)
from driftfv.harness.study import (DOPED_LAMBDA0, ErrorRow, ErrorTable, ReferenceSolution,
                                   compute_reference, effective_lambda2, fit_order, l1_error, sweep)
from driftfv.scheme import State


def test_case_registry():
    assert case_names() == ["case1", "case2", "case3"]
    with pytest.raises(ValueError, match="unknown case"):
        builtin_case("case4")


def test_case1_data():
    case = builtin_case("case1")
    data = case.problem(case.mesh(10))
    assert np.all(data.N0 == 0.5) and np.all(data.P0 == 0.5) and not np.any(data.C)
    assert np.allclose(data.ND, [0.1, 0.9]) and np.allclose(data.PsiD, [0.0, 4.0])
    assert case.t_final == 0.1 and case.bounds == (0.1, 0.9)


def test_case2_doping():
    case = builtin_case("case2")
    data = case.problem(case.mesh(10))
    assert np.allclose(data.C, [-0.8] * 5 + [0.8] * 5)
    assert np.allclose(data.N0, (1 + data.C) / 2) and np.allclose(data.P0, (1 - data.C) / 2)
    assert np.allclose(data.ND, [0.1, 0.9]) and np.allclose(data.PD, [0.9, 0.1])


def test_case3_layout():
    case = builtin_case("case3")
    mesh = case.mesh(8)
    data = case.problem(mesh)
    mids = mesh.edge_mid[mesh.dirichlet_edges]
    top = np.isclose(mids[:, 1], 1.0)
    assert top.sum() == 2 and np.all(mids[top, 0] <= 0.25)
    assert np.allclose(data.ND[top], 0.1) and np.allclose(data.PsiD[top], -1.1)
    assert np.allclose(data.ND[~top], 0.9) and np.allclose(data.PsiD[~top], 1.1)
    c = data.C.reshape(8, 8)          # row j is y, column i is x
    assert np.allclose(c[4:, :4], -0.8) and np.allclose(c[:4, :], 0.8) and np.allclose(c[4:, 4:], 0.8)
    assert case.t_final == 1.0


def test_effective_lambda2():
    assert effective_lambda2(builtin_case("case2"), 0.0) == DOPED_LAMBDA0
    assert effective_lambda2(builtin_case("case3"), 0.0) == DOPED_LAMBDA0
    assert effective_lambda2(builtin_case("case1"), 0.0) == 0.0
    assert effective_lambda2(builtin_case("case2"), 1e-3) == 1e-3


def test_config_roundtrip(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[problem]\ncase = case2\nlambda2 = 1e-3   # comment\ncells = 40\n"
                    "[scheme]\nmu = auto\nfp_tol = 1e-10\n[output]\nout_dir = res\n")
    cfg = read_config(path)
    assert (cfg.case, cfg.lambda2, cfg.cells, cfg.fp_tol, cfg.out_dir) == ("case2", 1e-3, 40, 1e-10, "res")
    assert cfg.mu_value == "auto"


@pytest.mark.parametrize("text", ["[problem]\nbogus = 1\n", "[extras]\na = 1\n", "[problem]\ncells = many\n",
                                  "no section\n"])
def test_config_errors(tmp_path, text):
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError):
        read_config(path)


def test_snapshot_roundtrip(tmp_path):
    case = builtin_case("case3")
    mesh = case.mesh(4)
    rng = np.random.default_rng(0)
    st = State(3, 0.03, rng.random(16), rng.random(16), rng.normal(size=16))
    write_snapshot(tmp_path / "s.txt", mesh, st, 1e-9)
    assert (tmp_path / "s.txt").read_text().startswith("state v1 cells=16 t=0.03 lambda2=1e-09\n")
    meta, coords, N, P, Psi = read_snapshot(tmp_path / "s.txt")
    assert meta == {"cells": 16, "t": 0.03, "lambda2": 1e-9}
    assert coords.shape == (16, 2)
    assert np.array_equal(N, st.N) and np.array_equal(P, st.P) and np.array_equal(Psi, st.Psi)


def test_l1_error_projection_and_shift():
    ref_case = builtin_case("case1")
    fine = ref_case.mesh(40)
    coarse = ref_case.mesh(10)
    rng = np.random.default_rng(1)
    vals = np.repeat(rng.random(10), 4)
    ref = ReferenceSolution("case1", 40, 1e-3, 1.0, 0.1, vals, vals, vals)
    st = State(100, 0.1, vals[::4], vals[::4], vals[::4])
    assert l1_error(st, coarse, ref, fine) == (0.0, 0.0, 0.0)
    shifted = State(100, 0.1, vals[::4] + 1e-3, vals[::4] - 1e-3, vals[::4])
    eN, eP, ePsi = l1_error(shifted, coarse, ref, fine)
    assert eN == pytest.approx(1e-3, rel=1e-12) and eP == pytest.approx(1e-3, rel=1e-12) and ePsi == 0.0


def test_l1_error_rejects_time_mismatch_and_non_nested():
    case = builtin_case("case1")
    ref = ReferenceSolution("case1", 40, 1e-3, 1.0, 0.1, np.zeros(40), np.zeros(40), np.zeros(40))
    with pytest.raises(ValueError, match="final times"):
        l1_error(State(9, 0.09, np.zeros(10), np.zeros(10), np.zeros(10)), case.mesh(10), ref, case.mesh(40))
    from driftfv.mesh import NotNestedError
    with pytest.raises(NotNestedError):
        l1_error(State(9, 0.1, np.zeros(12), np.zeros(12), np.zeros(12)), case.mesh(12), ref, case.mesh(40))


def _table(power, c=0.7):
    t = ErrorTable()
    for dt in (1e-2, 5e-3, 2.5e-3, 1.25e-3):
        e = c * dt ** power
        t.add(ErrorRow(1.0, dt, 1 / 1280, e, 2 * e, 3 * e, 4.0, 0.1))
    return t


@pytest.mark.parametrize("power", [1, 2])
def test_fit_order_synthetic(power):
    slopes = fit_order(_table(power), along="dt")
    for var in ("N", "P", "Psi"):
        assert slopes[1.0][var] == pytest.approx(power, abs=1e-12)


def test_fit_order_needs_three_points():
    t = ErrorTable()
    t.add(ErrorRow(1.0, 1e-2, 0.1, 1.0, 1.0, 1.0, 1, 0))
    t.add(ErrorRow(1.0, 5e-3, 0.1, 0.5, 0.5, 0.5, 1, 0))
    with pytest.raises(ValueError, match="at least 3"):
        fit_order(t)
    with pytest.raises(ValueError):
        fit_order(t, along="dy")


def test_fit_order_pins_finest_other_axis():
    t = _table(1)
    for dt in (1e-2, 5e-3, 2.5e-3):
        t.add(ErrorRow(1.0, dt, 1 / 160, 1.0, 1.0, 1.0, 1, 0))   # coarse-mesh plateau
    assert fit_order(t, along="dt")[1.0]["N"] == pytest.approx(1.0, abs=1e-12)


def test_error_table_csv_roundtrip(tmp_path):
    t = _table(1)
    t.add(ErrorRow(1e-9, 1e-2, 1 / 1280, math.nan, math.nan, math.nan, math.nan, 0.5, failure="boom"))
    t.to_csv(tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "lambda2,dt,dx,err_N,err_P,err_Psi,fp_iters_avg,wallclock_s"
    assert "FAIL" in lines[-1]
    back = ErrorTable.from_csv(tmp_path / "e.csv")
    assert len(back.rows) == 5 and back.rows[-1].failed
    assert back.rows[0].err_N == t.rows[0].err_N
    with pytest.raises(ValueError, match="duplicate"):
        back.add(ErrorRow(1.0, 1e-2, 1 / 1280, 0, 0, 0, 0, 0))


def test_reference_cache_is_bit_identical(tmp_path):
    a = compute_reference("case1", 20, 1e-3, 1.0, directory=tmp_path)
    files = list(tmp_path.glob("ref_v*_case1_c20_*.npz"))
    assert len(files) == 1
    b = compute_reference("case1", 20, 1e-3, 1.0, directory=tmp_path)
    assert np.array_equal(a.N, b.N) and np.array_equal(a.Psi, b.Psi) and a.t == b.t
    assert not list(tmp_path.glob("*.tmp"))


def test_sweep_small(tmp_path, monkeypatch):
    monkeypatch.setenv("DRIFTFV_CACHE_DIR", str(tmp_path))
    args = ("case1", [1.0, 0.0], [1e-2, 5e-3], [20, 40])
    t1 = sweep(*args, ref_cells=80, ref_dt=1e-3)
    assert len(t1.rows) == 8 and not any(r.failed for r in t1.rows)
    assert all(r.err_N > 0 and r.err_Psi > 0 for r in t1.rows)
    t2 = sweep(*args, ref_cells=80, ref_dt=1e-3)
    assert [r.err_N for r in t1.rows] == [r.err_N for r in t2.rows]


def test_sweep_validation():
    with pytest.raises(ValueError):
        sweep("case1", [], [1e-2], [20])
    with pytest.raises(ValueError, match="divide"):
        sweep("case1", [1.0], [3e-2], [20], ref_cells=40, ref_dt=1e-3)
    with pytest.raises(ValueError, match="1D"):
        sweep("case3", [1.0], [1e-2], [8])


def test_sweep_records_row_failures(tmp_path, monkeypatch):
    monkeypatch.setenv("DRIFTFV_CACHE_DIR", str(tmp_path))
    # 30 cells do not nest in the 80-cell reference: that row fails, the other survives
    t = sweep("case1", [1.0], [1e-2], [20, 30], ref_cells=80, ref_dt=1e-3)
    failed = [r for r in t.rows if r.failed]
    assert len(failed) == 1 and math.isnan(failed[0].err_N)


# --------------------------------------------------------------------------
# CLI
# --------------------------------------------------------------------------

def test_cli_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    code = cli.main(["run", "--case", "case1", "--lambda2", "1e-9", "--dt", "1e-2", "--cells", "40",
                     "--out-dir", str(out), "--snapshot-every", "5"])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["steps"] == 10 and summary["entropy_inequality"]
    rows = read_diagnostics(out / "diagnostics.csv")
    assert len(rows) == 11 and tuple(rows[0]) == DIAG_COLUMNS
    meta, *_ = read_snapshot(out / "state_final.txt")
    assert meta["cells"] == 40 and meta["t"] == pytest.approx(0.1)
    assert (out / "state_000005.txt").exists() and (out / "state_000010.txt").exists()


def test_cli_run_from_config(tmp_path):
    cfg = tmp_path / "c.cfg"
    out = tmp_path / "o"
    cfg.write_text(f"[problem]\ncase = case2\nlambda2 = 0\ndt = 0.02\ncells = 20\n[output]\nout_dir = {out}\n")
    assert cli.main(["run", "--config", str(cfg)]) == 0
    assert json.loads((out / "summary.json").read_text())["lambda2"] == DOPED_LAMBDA0


def test_cli_usage_errors(tmp_path, capsys):
    assert cli.main(["--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert cli.main([]) == 1
    assert cli.main(["run", "--case", "nope"]) == 1
    assert cli.main(["sweep", "--dts", "a,b"]) == 1
    assert cli.main(["run", "--config", str(tmp_path / "missing.cfg")]) == 1


def test_cli_numerical_failure_exit_code(tmp_path, capsys):
    code = cli.main(["run", "--case", "case1", "--dt", "1e-2", "--cells", "20", "--fp-max-iter", "1",
                     "--fp-tol", "1e-16", "--out-dir", str(tmp_path)])
    assert code == 2
    assert "step 1" in capsys.readouterr().err


def test_cli_mesh_info(capsys):
    assert cli.main(["mesh-info", "--case", "case3", "--cells", "16"]) == 0
    out = capsys.readouterr().out
    assert "admissible: yes" in out


def test_cli_convergence(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("DRIFTFV_CACHE_DIR", str(tmp_path))
    code = cli.main(["convergence", "--case", "case1", "--lambda2", "0", "--dts", "2e-2,1e-2,5e-3",
                     "--cells", "40", "--ref-cells", "40", "--ref-dt", "1e-4", "--out", str(tmp_path / "e.csv")])
    assert code == 0
    assert "lambda2=0" in capsys.readouterr().out
    assert (tmp_path / "e.csv").exists()
