import math

import numpy as np
import pytest
from scipy.linalg import eigvalsh
from sqlmodel import Session, select

from app import cli, database, reports
from app.data import circulant_dataset, split_arrays, subsample
from app.errors import EXIT_IO, EXIT_OK, EXIT_USAGE, EXIT_VERIFICATION, ConfigurationError, VerificationFailure
from app.gram import gram_deep
from app.kernel_core import cached_lookup
from app.models import ExperimentRun, KernelConfig, SweepRecord, SweepSpec
from app.regression import PINV_RCOND, evaluate, krr_predict
from app.spectral import decompose, effective_dim
from main import main

GRID = 257


def circulant_spec(**overrides) -> SweepSpec:
    fields = dict(f_values=[0.3], depths=[2], p_train=20, seed=3, dataset="circulant:40:2", grid_size=GRID)
    fields.update(overrides)
    return SweepSpec(**fields)


@pytest.fixture
def isolated_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SPARSE_NNGP_TABLE_DIR", str(tmp_path / "tables"))
    monkeypatch.setenv("SPARSE_NNGP_GRID_SIZE", str(GRID))
    return tmp_path


@pytest.fixture
def two_class_csv(tmp_path, rng):
    centers = rng.standard_normal((2, 10))
    labels = np.repeat([0, 1], 25)
    x = centers[labels] + 0.8 * rng.standard_normal((50, 10))
    path = tmp_path / "two_class.csv"
    path.write_text("".join(f"{lab}," + ",".join(repr(float(v)) for v in row) + "\n" for lab, row in zip(labels, x)))
    return path


class TestSweep:
    def test_single_cell_matches_library(self, tmp_path):
        rows = cli.cmd_sweep(circulant_spec(), tmp_path / "s.csv")
        assert len(rows) == 1

        ds = circulant_dataset(40, 2)
        x_tr, y_tr, x_te, y_te, labels = split_arrays(subsample(ds, 20, 3))
        g = gram_deep(x_tr, x_te, KernelConfig(f=0.3, depth=2), table=cached_lookup(0.3, GRID))
        pred = evaluate(krr_predict(g, y_tr, 0.0), y_te, labels)
        ed = effective_dim(np.sort(eigvalsh(g.k_train))[::-1].clip(min=0.0))

        f, depth, ridge, trial, accuracy, mse, got_ed = rows[0]
        assert (f, depth, ridge, trial) == (0.3, 2, 0.0, 0)
        assert accuracy == pytest.approx(pred.accuracy, abs=1e-12)
        assert mse == pytest.approx(pred.mse, rel=1e-10)
        assert got_ed == pytest.approx(ed, rel=1e-10)

    def test_rerun_is_byte_identical(self, tmp_path):
        spec = circulant_spec(f_values=[0.2, 0.4], depths=[1, 3], trials=2)
        first = tmp_path / "a.csv"
        second = tmp_path / "b.csv"
        cli.cmd_sweep(spec, first)
        cli.cmd_sweep(spec, second)
        assert first.read_bytes() == second.read_bytes()

    def test_workers_do_not_change_results(self, tmp_path):
        spec = circulant_spec(f_values=[0.2, 0.4], depths=[1, 3], ridges=[0.0, 0.1], trials=2)
        serial = tmp_path / "serial.csv"
        threaded = tmp_path / "threaded.csv"
        rows = cli.cmd_sweep(spec, serial, workers=1)
        cli.cmd_sweep(spec, threaded, workers=2)
        assert len(rows) == 16
        assert serial.read_bytes() == threaded.read_bytes()

    def test_summary_rows(self, tmp_path):
        out = tmp_path / "s.csv"
        rows = cli.cmd_sweep(circulant_spec(depths=[1, 2], ridges=[0.0, 0.5], trials=3), out)
        written = reports.read_rows(out)
        means = [r for r in written if r["trial"] == "mean"]
        assert len(means) == 4
        cell = [r[4] for r in rows if r[1] == 1 and r[2] == 0.5]
        first = next(r for r in means if r["L"] == "1" and float(r["ridge"]) == 0.5)
        assert float(first["accuracy"]) == pytest.approx(np.mean(cell))
        assert {r["trial"] for r in written} == {"0", "1", "2", "mean", "std", "ci95"}

    def test_record_to_ledger(self, tmp_path, ledger_url):
        rows = cli.cmd_sweep(circulant_spec(depths=[1, 2]), tmp_path / "s.csv", record=True)
        with Session(database.get_engine()) as session:
            runs = session.exec(select(ExperimentRun)).all()
            records = session.exec(select(SweepRecord)).all()
        assert len(runs) == 1 and runs[0].command == "sweep"
        assert len(records) == len(rows) == 2
        assert all(r.run_id == runs[0].id for r in records)


class TestTheory:
    def test_small_circulant(self, tmp_path):
        spec = circulant_spec(dataset="circulant:64:2", depths=[1, 2], trials=3)
        rows = cli.cmd_theory(spec, tmp_path / "t.csv")
        assert [r[:3] for r in rows] == [(0.3, 1, 0.0), (0.3, 2, 0.0)]
        for *_, mse, e_g in rows:
            assert math.isfinite(mse) and math.isfinite(e_g)
            assert mse > 0 and e_g > 0

    def test_full_training_set(self, tmp_path):
        partial = cli.cmd_theory(circulant_spec(dataset="circulant:64:2"), tmp_path / "a.csv")
        full = cli.cmd_theory(circulant_spec(dataset="circulant:64:2", p_train=64), tmp_path / "b.csv")
        assert full[0][4] == pytest.approx(full[0][3], rel=1e-6, abs=1e-12)
        assert full[0][3] < partial[0][3]

    def test_unreachable_harmonics_count_as_error(self, tmp_path):
        # the dense one-layer kernel cannot represent the odd harmonics of the square wave
        spec = circulant_spec(f_values=[0.5], depths=[1], p_train=48, trials=3, dataset="circulant:64:2")
        (row,) = cli.cmd_theory(spec, tmp_path / "t.csv")
        *_, mse, e_g = row

        ds = circulant_dataset(64, 2)
        k = gram_deep(ds.x, ds.x[:0], KernelConfig(f=0.5, depth=1), table=cached_lookup(0.5, GRID)).k_train
        s = decompose(k, ds.y, rcond=PINV_RCOND)
        n, p, m = s.n_nonzero, 48, 64
        assert n < p
        finite_pool = (p * m - 2 * n * p + n * n) / ((m - n) * (p - n))
        assert s.null_power > 0.15
        assert e_g == pytest.approx(s.null_power * finite_pool, rel=1e-6)
        assert e_g >= s.null_power
        assert mse >= s.null_power * (1.0 - 1e-6)
        assert mse < 10.0 * e_g


class TestSpectrumAndEd:
    def test_spectrum_reports(self, tmp_path):
        out = tmp_path / "spec.csv"
        result = cli.cmd_spectrum(circulant_spec(dataset="circulant:32:2", p_train=10), out)
        assert 2 <= result["n_nonzero"] <= 32
        assert 0 < result["auc"] <= 1
        assert len(reports.read_rows(out)) == result["n_nonzero"]
        footer = reports.read_theory_footer(tmp_path / "spec_theory.csv")
        assert footer["e_g"] == pytest.approx(result["e_g"], rel=1e-15)
        assert footer["null_power"] == pytest.approx(result["null_power"], rel=1e-15)

    def test_gram_out_from_main(self, isolated_env):
        gram = isolated_env / "gram.csv"
        argv = [
            "spectrum", "--f-grid", "0.3", "--depth-grid", "2", "--p-train", "10",
            "--dataset", "circulant:32:2", "--out", str(isolated_env / "spec.csv"), "--gram-out", str(gram),
        ]
        assert main(argv) == EXIT_OK

        ds = circulant_dataset(32, 2)
        expected = gram_deep(ds.x, ds.x[:0], KernelConfig(f=0.3, depth=2), table=cached_lookup(0.3, GRID)).k_train
        written = np.loadtxt(gram, delimiter=",", skiprows=1)
        assert written.shape == (32, 32)
        assert np.allclose(written, expected, rtol=1e-12, atol=1e-14)
        assert np.allclose(written, written.T, atol=1e-14)

    def test_sparse_networks_keep_representations_distinct(self, tmp_path, two_class_csv):
        spec = SweepSpec(
            f_values=[0.1, 0.3, 0.5], depths=[10], p_train=50, dataset=f"csv:{two_class_csv}", normalize=True
        )
        ed = {f: value for f, _, value in cli.cmd_ed(spec, tmp_path / "ed.csv")}
        assert ed[0.1] > ed[0.3] > ed[0.5]
        assert ed[0.1] >= 0.9 * 49


class TestFinite:
    def test_rows(self, tmp_path):
        rows = cli.cmd_finite(circulant_spec(depths=[1, 2]), width=200, out=tmp_path / "fin.csv")
        assert [r[:4] for r in rows] == [(0.3, 1, 0, 200), (0.3, 2, 0, 200)]
        assert all(0.0 <= r[4] <= 1.0 for r in rows)


class TestVerify:
    def test_passes(self, tmp_path):
        rows = cli.cmd_verify([0.3], [0.0, 0.5], n_units=20_000, n_trials=16, out=tmp_path / "v.csv")
        assert all(abs(r[5]) <= cli.Z_LIMIT for r in rows)
        assert len(reports.read_rows(tmp_path / "v.csv")) == 2

    def test_corrupted_kernel_fails(self):
        with pytest.raises(VerificationFailure):
            cli.cmd_verify([0.3], [0.0], n_units=50_000, n_trials=8, corrupt=1.1)

    def test_exit_code(self):
        argv = ["verify", "--f-grid", "0.3", "--theta-grid", "0", "--width", "50000", "--trials", "8", "--corrupt", "1.1"]
        assert main(argv) == EXIT_VERIFICATION


class TestTableCommand:
    def test_build_then_inspect(self, tmp_path):
        path = tmp_path / "t.sngp"
        info = cli.cmd_table("build", f=0.3, path=path, grid_size=GRID)
        assert info["nodes"] == GRID and path.exists()
        assert cli.cmd_table("inspect", path=path)["max_error"] == info["max_error"]
        assert info["magic"] == "SNGP" and info["version"] == 1

    def test_via_table_dir(self, tmp_path):
        cli.cmd_table("build", f=0.2, grid_size=GRID, table_dir=tmp_path)
        assert (tmp_path / "sngp_f0.200000_n257.sngp").exists()

    def test_main_reports_truncated_file(self, tmp_path):
        path = tmp_path / "t.sngp"
        assert main(["table", "build", "--f", "0.3", "--path", str(path), "--grid-size", str(GRID)]) == EXIT_OK
        path.write_bytes(path.read_bytes()[:-3])
        assert main(["table", "inspect", "--path", str(path)]) == EXIT_IO


class TestCompare:
    SWEEP = """f,L,ridge,trial,accuracy,mse,ed
0.1,1,0,0,0.5,1,1
0.1,1,0,mean,0.931,0.1,3
0.1,1,0,std,0.005,0.01,0.1
0.1,3,0,mean,0.95,0.1,3
0.1,3,0,std,0.004,0.01,0.1
0.2,1,0,mean,0.92,0.1,3
0.5,1,0,mean,0.90,0.1,3
0.5,1,0,std,0.01,0.01,0.1
0.5,3,0,mean,0.93,0.1,3
0.5,3,0,std,0.02,0.01,0.1
0.5,5,1,mean,0.99,0.1,3
"""

    def test_shallowest_matching_sparse_cell(self, tmp_path):
        sweep = tmp_path / "sweep.csv"
        sweep.write_text(self.SWEEP)
        row = cli.cmd_compare(sweep, tmp_path / "cmp.csv")
        assert row == (3, 0.93, 0.02, 0.1, 1, 0.931, 0.005, 0.90, 0.01)
        assert reports.read_rows(tmp_path / "cmp.csv")[0]["sparse_f"] == "0.10000000000000001"

    def test_no_dense_cells(self, tmp_path):
        sweep = tmp_path / "sweep.csv"
        sweep.write_text("f,L,ridge,trial,accuracy,mse,ed\n0.1,1,0,mean,0.9,0.1,3\n")
        assert main(["compare", str(sweep), "--out", str(tmp_path / "cmp.csv")]) == EXIT_USAGE


class TestMain:
    @pytest.mark.parametrize("argv", [
        [],
        ["sweep", "--f-grid", "x", "--depth-grid", "1", "--p-train", "5", "--out", "o.csv"],
        ["sweep", "--f-grid", "0.7", "--depth-grid", "1", "--p-train", "5", "--out", "o.csv"],
        ["sweep", "--f-grid", "0.3", "--depth-grid", "0", "--p-train", "5", "--out", "o.csv"],
        ["table", "rebuild"],
    ])
    def test_usage_errors(self, argv, isolated_env):
        assert main(argv) == EXIT_USAGE

    def test_sweep_end_to_end(self, isolated_env):
        out = isolated_env / "sweep.csv"
        argv = [
            "sweep", "--f-grid", "0.3,0.5", "--depth-grid", "1,2", "--p-train", "20",
            "--dataset", "circulant:40:2", "--out", str(out),
        ]
        assert main(argv) == EXIT_OK
        assert len([r for r in reports.read_rows(out) if r["trial"] == "0"]) == 4
        assert (isolated_env / "tables" / "sngp_f0.300000_n257.sngp").exists()

    def test_csv_with_header_line(self, isolated_env, two_class_csv):
        headed = isolated_env / "headed.csv"
        width = len(two_class_csv.read_text().splitlines()[0].split(",")) - 1
        headed.write_text("label," + ",".join(f"x{j}" for j in range(width)) + "\n" + two_class_csv.read_text())
        out = isolated_env / "sweep.csv"
        argv = [
            "sweep", "--f-grid", "0.3", "--depth-grid", "2", "--p-train", "20",
            "--dataset", f"csv:{headed}:header", "--out", str(out),
        ]
        assert main(argv) == EXIT_OK
        (row,) = [r for r in reports.read_rows(out) if r["trial"] == "0"]
        plain = cli.cmd_sweep(
            circulant_spec(dataset=f"csv:{two_class_csv}", p_train=20, seed=0), isolated_env / "plain.csv"
        )
        assert float(row["accuracy"]) == pytest.approx(plain[0][4], abs=1e-12)


class TestSpecValidation:
    def test_out_of_range_f(self):
        with pytest.raises(ConfigurationError, match="SweepSpec"):
            SweepSpec(f_values=[0.7], depths=[1], p_train=5)

    def test_zero_depth(self):
        with pytest.raises(ConfigurationError):
            SweepSpec(f_values=[0.3], depths=[0], p_train=5)
