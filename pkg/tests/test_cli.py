import os
import subprocess
import sys

import numpy as np
import pytest

from framepol import model as mdl
from framepol import molgraph as mg
from framepol import trainer as tr
from framepol.cli import main


def run_cli(*args, env=None):
    """Run the CLI in-process, capturing stdout/stderr and the exit code."""
    import contextlib
    import io

    out, err = io.StringIO(), io.StringIO()
    old_env = {}
    if env:
        for k, v in env.items():
            old_env[k] = os.environ.get(k)
            os.environ[k] = v
    try:
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
            code = main(list(args))
    finally:
        for k, v in old_env.items():
            if v is None:
                os.environ.pop(k, None)
            else:
                os.environ[k] = v
    return code, out.getvalue(), err.getvalue()


def _subprocess_cli(*args, cwd=None):
    return subprocess.run(
        [sys.executable, "-m", "framepol", *args],
        capture_output=True,
        text=True,
        cwd=cwd,
    )


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "synth.tsv"
    code, out, err = run_cli("gen-synthetic", "--n", "12", "--seed", "5", "--out", str(path))
    assert code == 0, err
    return path


@pytest.fixture(scope="module")
def init_ckpt(tmp_path_factory, dataset):
    path = tmp_path_factory.mktemp("ckpt") / "init.ckpt"
    code, out, err = run_cli(
        "train", "--data", str(dataset), "--model", "tensorial",
        "--layers", "2", "--cs", "8", "--cv", "2", "--ct", "2", "--hidden", "8",
        "--epochs", "0", "--seed", "0", "--out-ckpt", str(path),
    )
    assert code == 0, err
    return path


class TestGenSynthetic:
    def test_writes_n_lines(self, dataset):
        lines = dataset.read_text().splitlines()
        assert len(lines) == 12

    def test_same_seed_same_bytes(self, tmp_path):
        a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
        assert run_cli("gen-synthetic", "--n", "6", "--seed", "3", "--out", str(a))[0] == 0
        assert run_cli("gen-synthetic", "--n", "6", "--seed", "3", "--out", str(b))[0] == 0
        assert a.read_bytes() == b.read_bytes()

    def test_targets_symmetric_on_reload(self, dataset):
        for mol in mg.read_dataset(dataset):
            assert np.abs(mol.polarizability - mol.polarizability.T).max() <= 1e-12

    def test_unwritable_path(self):
        code, _, err = run_cli("gen-synthetic", "--n", "1", "--seed", "0", "--out", "/nonexistent/x.tsv")
        assert code == 3
        assert "error" in err


class TestTrainCommand:
    def test_desk_training_writes_history(self, tmp_path, dataset):
        hist = tmp_path / "h.tsv"
        ckpt = tmp_path / "m.ckpt"
        code, out, err = run_cli(
            "train", "--data", str(dataset), "--model", "tensorial",
            "--layers", "2", "--cs", "8", "--cv", "2", "--ct", "2", "--hidden", "8",
            "--epochs", "3", "--batch", "4", "--lr", "1e-3", "--seed", "1",
            "--out-ckpt", str(ckpt), "--history", str(hist),
        )
        assert code == 0, err
        assert len(hist.read_text().splitlines()) == 3
        assert ckpt.exists()

    def test_scalar_with_cv_rejected(self, dataset):
        code, _, err = run_cli(
            "train", "--data", str(dataset), "--model", "scalar", "--cv", "2",
            "--epochs", "1",
        )
        assert code == 2
        assert "incompatible" in err

    def test_unknown_flag_rejected(self, dataset):
        with pytest.raises(SystemExit) as exc:
            run_cli("train", "--data", str(dataset), "--bogus", "1")
        assert exc.value.code == 2

    def test_missing_data_file(self):
        code, _, err = run_cli("train", "--data", "/no/such/file.tsv", "--epochs", "1")
        assert code == 3

    def test_unlabeled_data_rejected(self, tmp_path):
        path = tmp_path / "unlabeled.tsv"
        path.write_text("a\t0\t1,1\t0,0,0;0.9,0,0\n" * 3, encoding="utf-8")
        code, _, err = run_cli("train", "--data", str(path), "--epochs", "1")
        assert code == 3


class TestEvalCommand:
    def test_eval_matches_library(self, dataset, init_ckpt):
        code, out, err = run_cli(
            "eval", "--ckpt", str(init_ckpt), "--data", str(dataset), "--split", "all"
        )
        assert code == 0, err
        loaded = tr.load_model_checkpoint(init_ckpt)
        mols = mg.read_dataset(dataset)
        report = tr.evaluate(
            loaded.model_cfg, loaded.store, mols, target_scale=loaded.target_scale
        )
        row = [ln for ln in out.splitlines() if ln.startswith("tensor")][0]
        printed = float(row.split()[-1])
        assert printed == pytest.approx(report.tensor_mae, rel=1e-5)

    def test_split_selection(self, dataset, init_ckpt):
        code, out, _ = run_cli(
            "eval", "--ckpt", str(init_ckpt), "--data", str(dataset),
            "--split", "test", "--split-seed", "0",
        )
        assert code == 0
        assert "split test" in out

    def test_conventional_aniso_flag(self, dataset, init_ckpt):
        code, out, _ = run_cli(
            "eval", "--ckpt", str(init_ckpt), "--data", str(dataset),
            "--split", "all", "--conventional-aniso",
        )
        assert code == 0
        assert "aniso_d" in out

    def test_checkpoint_config_mismatch(self, tmp_path, dataset, init_ckpt):
        from framepol.checkpoint import load_checkpoint, save_checkpoint

        meta, arrays = load_checkpoint(init_ckpt)
        del arrays["param.readout.b2"]
        bad = tmp_path / "bad.ckpt"
        save_checkpoint(bad, meta, arrays)
        code, _, err = run_cli("eval", "--ckpt", str(bad), "--data", str(dataset))
        assert code == 3
        assert "mismatch" in err


class TestCheckEquivariance:
    def test_model_mode_passes_on_fresh_init(self, dataset, init_ckpt):
        code, out, _ = run_cli(
            "check-equivariance", "--ckpt", str(init_ckpt), "--data", str(dataset),
            "--mode", "model", "--rotations", "4", "--seed", "0",
        )
        assert code == 0
        assert "PASS" in out

    def test_pipeline_mode_on_collinear_fixture(self, tmp_path, init_ckpt):
        rod = mg.Molecule(
            "rod", "0", [6, 6, 6], [[0, 0, 0], [1.2, 0, 0], [2.4, 0, 0]]
        )
        from framepol.molgraph import synth_polarizability

        rod.polarizability = synth_polarizability(rod)
        path = tmp_path / "rod.tsv"
        mg.write_dataset(path, [rod])
        code, out, _ = run_cli(
            "check-equivariance", "--ckpt", str(init_ckpt), "--data", str(path),
            "--mode", "pipeline", "--rotations", "4", "--seed", "0", "--threshold", "10",
        )
        assert code == 0
        degenerate_cells = [
            int(ln.split("\t")[4]) for ln in out.splitlines() if ln.startswith("rod")
        ]
        assert degenerate_cells[0] > 0

    def test_zero_threshold_fails(self, dataset, init_ckpt):
        code, out, _ = run_cli(
            "check-equivariance", "--ckpt", str(init_ckpt), "--data", str(dataset),
            "--mode", "model", "--rotations", "2", "--seed", "0", "--threshold", "0",
        )
        assert code == 1
        assert "FAIL" in out


class TestInspectFrames:
    def test_water_fixture(self, tmp_path):
        theta = np.deg2rad(104.5)
        mol = mg.Molecule(
            "h2o", "0", [8, 1, 1],
            [[0, 0, 0], [0.9572, 0, 0], [0.9572 * np.cos(theta), 0.9572 * np.sin(theta), 0]],
        )
        path = tmp_path / "w.tsv"
        mg.write_dataset(path, [mol])
        code, out, _ = run_cli("inspect-frames", "--data", str(path), "--mol-id", "h2o")
        assert code == 0
        rows = [ln.split() for ln in out.splitlines() if ln.strip().startswith("F ")]
        assert len(rows) == 9
        mats = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(3, 3, 3)
        for m in mats:
            assert np.abs(m.T @ m - np.eye(3)).max() <= 1e-12
            assert abs(np.linalg.det(m) - 1.0) <= 1e-10

    def test_unknown_id(self, dataset):
        code, _, err = run_cli("inspect-frames", "--data", str(dataset), "--mol-id", "nope")
        assert code == 3
        assert "not found" in err

    def test_collinear_flags_printed(self, tmp_path):
        rod = mg.Molecule("rod", "0", [6, 6, 6], [[0, 0, 0], [1.2, 0, 0], [2.4, 0, 0]])
        path = tmp_path / "rod.tsv"
        mg.write_dataset(path, [rod])
        code, out, _ = run_cli("inspect-frames", "--data", str(path), "--mol-id", "rod")
        assert code == 0
        assert "degenerate true" in out


class TestConfigFileAndEnv:
    def test_config_file_supplies_defaults(self, tmp_path, dataset):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text("# defaults\nn=4\nseed=9\n", encoding="utf-8")
        out_path = tmp_path / "from_config.tsv"
        code, out, err = run_cli(
            "--config", str(cfgfile), "gen-synthetic", "--out", str(out_path)
        )
        assert code == 0, err
        assert len(out_path.read_text().splitlines()) == 4

    def test_explicit_flag_beats_config(self, tmp_path):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text("n=4\n", encoding="utf-8")
        out_path = tmp_path / "explicit.tsv"
        code, _, _ = run_cli(
            "--config", str(cfgfile), "gen-synthetic", "--n", "2", "--seed", "0",
            "--out", str(out_path),
        )
        assert code == 0
        assert len(out_path.read_text().splitlines()) == 2

    def test_malformed_config(self, tmp_path):
        cfgfile = tmp_path / "bad.cfg"
        cfgfile.write_text("not a pair\n", encoding="utf-8")
        code, _, err = run_cli("--config", str(cfgfile), "gen-synthetic", "--n", "1", "--out", "x")
        assert code == 2

    def test_data_dir_env(self, tmp_path, dataset):
        env = {"FRAMEPOL_DATA_DIR": str(dataset.parent)}
        ckpt = tmp_path / "env.ckpt"
        code, _, err = run_cli(
            "train", "--data", dataset.name, "--model", "scalar",
            "--layers", "2", "--cs", "8", "--hidden", "8",
            "--epochs", "0", "--out-ckpt", str(ckpt),
            env=env,
        )
        assert code == 0, err


class TestDeterminismViaSubprocess:
    def test_history_and_checkpoint_bytes(self, tmp_path, dataset):
        results = []
        for tag in ("one", "two"):
            hist = tmp_path / f"h-{tag}.tsv"
            ckpt = tmp_path / f"c-{tag}.ckpt"
            proc = _subprocess_cli(
                "train", "--data", str(dataset), "--model", "tensorial",
                "--layers", "2", "--cs", "8", "--cv", "2", "--ct", "2", "--hidden", "8",
                "--epochs", "2", "--batch", "4", "--lr", "1e-3", "--seed", "11",
                "--threads", "1", "--out-ckpt", str(ckpt), "--history", str(hist),
            )
            assert proc.returncode == 0, proc.stderr
            results.append((hist.read_bytes(), ckpt.read_bytes()))
        assert results[0][0] == results[1][0]
        assert results[0][1] == results[1][1]
