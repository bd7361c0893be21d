import json
import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_allclose

from stretchq.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, config_hash, parse_args, run
from stretchq.volume_io import read_nifti

from .conftest import TAU


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ph")
    assert run(["phantom", "--preset", "human", "--dims", "4", "4", "2", "-o", str(out)]) == EXIT_OK
    return out


def dwi_args(d):
    return ["--dwi", str(d / "dwi.nii"), "--bvals", str(d / "dwi.bval"), "--bvecs", str(d / "dwi.bvec"),
            "--tau", repr(TAU)]


def test_phantom_outputs(phantom_dir):
    for name in ("dwi.nii", "dwi.bval", "dwi.bvec", "labels.nii", "truth_rtop.nii", "truth.csv", "truth.png",
                 "dwi.nii.json", "truth_rtop.nii.json"):
        assert (phantom_dir / name).exists(), name
    side = json.loads((phantom_dir / "dwi.nii.json").read_text())
    assert_allclose(side["tau"], TAU, rtol=1e-15)
    assert side["software"].startswith("stretchq ") and len(side["config_hash"]) == 64
    assert read_nifti(phantom_dir / "dwi.nii").dims == (4, 4, 2, 166)


def test_measures_happy_path(phantom_dir, tmp_path):
    out = tmp_path / "m"
    code = run(["measures", *dwi_args(phantom_dir), "--shell", "3000", "--estimator", "expansion",
                "--labels", str(phantom_dir / "labels.nii"), "-o", str(out)])
    assert code == EXIT_OK
    for name in ("rtop", "qmsd", "qmfd"):
        side = json.loads((out / f"{name}.nii.json").read_text())
        assert side["estimator"] == "expansion" and side["shell_b"] == 3000.0
        assert_allclose(side["tau"], TAU, rtol=1e-15)
        assert "config_hash" in side and side["software"].startswith("stretchq ")
    rtop = read_nifti(out / "rtop.nii").data[..., 0]
    truth = read_nifti(phantom_dir / "truth_rtop.nii").data[..., 0]
    # the expansion is a small-anisotropy approximation; wm here has FA ~ 0.8
    assert_allclose(rtop, truth, rtol=0.1)
    lines = (out / "summary.csv").read_text().splitlines()
    assert lines[0].startswith("region,measure") and any(ln.startswith("label_2,") for ln in lines)
    assert (out / "maps.png").stat().st_size > 0


def test_fit_then_measures(phantom_dir, tmp_path):
    fit = tmp_path / "f.sqfit"
    assert run(["fit", *dwi_args(phantom_dir), "-o", str(fit)]) == EXIT_OK
    assert json.loads((tmp_path / "f.sqfit.json").read_text())["n_unconverged"] == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["measures", "--fit", str(fit), "--shell", "1000", "-o", str(a)]) == EXIT_OK
    assert run(["measures", *dwi_args(phantom_dir), "--shell", "1000", "-o", str(b)]) == EXIT_OK
    assert (a / "rtop.nii").read_bytes() == (b / "rtop.nii").read_bytes()


@pytest.mark.parametrize("est", ["gaussian", "dti"])
def test_other_estimators(phantom_dir, tmp_path, est):
    extra = ["--shell", "1000"] if est == "gaussian" else ["--shells", "200", "1000"]
    assert run(["measures", *dwi_args(phantom_dir), "--estimator", est, *extra, "-o", str(tmp_path)]) == EXIT_OK
    assert np.all(read_nifti(tmp_path / "rtop.nii").data > 0)


def test_thread_determinism(phantom_dir, tmp_path):
    outs = []
    for t in (1, 3):
        o = tmp_path / f"t{t}"
        assert run(["measures", *dwi_args(phantom_dir), "--shell", "2400", "--threads", str(t), "-o", str(o)]) == 0
        outs.append(o)
    for name in ("rtop.nii", "qmsd.nii", "qmfd.nii", "summary.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    h = [json.loads((o / "rtop.nii.json").read_text())["config_hash"] for o in outs]
    assert h[0] == h[1]


def test_verify(capsys):
    assert run(["verify", "--suite", "gaussian"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "15/15 checks passed" in out and "FAIL" not in out


def test_corr_and_sweep(phantom_dir, tmp_path):
    m = tmp_path / "m"
    run(["measures", *dwi_args(phantom_dir), "--shell", "3000", "-o", str(m)])
    code = run(["analyze", "corr", "--map", f"se={m / 'rtop.nii'}", "--map", f"truth={phantom_dir / 'truth_rtop.nii'}",
                "-o", str(tmp_path / "c")])
    assert code == EXIT_OK
    rows = (tmp_path / "c" / "correlation.csv").read_text().splitlines()
    assert rows[0] == "map,se,truth" and float(rows[1].split(",")[2]) > 0.99
    assert (tmp_path / "c" / "correlogram.png").exists()

    sw = tmp_path / "sw"
    run(["phantom", "--preset", "sweep", "--dims", "2", "2", "1", "-o", str(sw)])
    code = run(["analyze", "sweep", *dwi_args(sw), "--bmax", "3000", "4200", "5000", "-o", str(tmp_path / "s")])
    assert code == EXIT_OK
    rows = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
    assert rows[0] == "config,measure,b_max_from,b_max_to,mean_abs_change,mean_from,mean_to"
    assert len(rows) == 1 + 3 * 3 * 2
    assert (tmp_path / "s" / "sweep.png").exists()


def test_length_mismatch_exit_2(phantom_dir, tmp_path, capsys):
    bv = tmp_path / "short.bval"
    bv.write_text(" ".join((phantom_dir / "dwi.bval").read_text().split()[:-1]) + "\n")
    args = dwi_args(phantom_dir)
    args[3] = str(bv)
    assert run(["fit", *args, "-o", str(tmp_path / "f")]) == EXIT_DATA
    err = capsys.readouterr().err
    assert "165" in err and "166" in err


@pytest.mark.parametrize("argv", [
    [],
    ["nosuch"],
    ["measures", "--shell", "x"],
    ["fit", "--dwi", "a.nii", "--bvals", "b", "--bvecs", "v", "-o", "f"],  # no tau
    ["analyze"],
    ["verify", "--threads", "0"],
])
def test_usage_errors(argv):
    assert run(argv) == EXIT_USAGE


def test_missing_file_exit_2(tmp_path):
    assert run(["measures", "--fit", str(tmp_path / "none.sqfit"), "--shell", "1000", "-o", str(tmp_path)]) == EXIT_DATA


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"shell": 1800, "estimator": "expansion"}))
    a = parse_args(["measures", "--config", str(cfg), "-o", "x"])
    assert a.shell == 1800 and a.estimator == "expansion"
    b = parse_args(["measures", "--config", str(cfg), "--shell", "3000", "-o", "x"])
    assert b.shell == 3000
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(["measures", "--config", str(cfg)]) == EXIT_USAGE


def test_hash_ignores_threads():
    a = parse_args(["verify", "--threads", "1"])
    b = parse_args(["verify", "--threads", "4", "-v"])
    c = parse_args(["verify", "--suite", "oracle"])
    assert config_hash(a) == config_hash(b) != config_hash(c)


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "stretchq", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("stretchq ")
