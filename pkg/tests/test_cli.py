import csv
import json
import shutil
import subprocess

import pytest

from mseit.cli import main


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["mesh", "--radius", "0.1", "--target-elements", "700", "--out", str(d / "mesh.txt")]) == 0
    assert main(["phantom", "--mesh", str(d / "mesh.txt"), "--preset", "three-spots", "--out", str(d / "truth.csv")]) == 0
    assert main(["pca-build", "--mesh", str(d / "mesh.txt"), "--realizations", "100", "--seed", "3",
                 "--out", str(d / "basis.npz")]) == 0
    assert main(["simulate", "--mesh", str(d / "mesh.txt"), "--phantom", str(d / "truth.csv"),
                 "--out", str(d / "data.csv")]) == 0
    return d


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_pipeline_outputs(work):
    data = rows(work / "data.csv")
    assert data[0] == ["j", "l", "target", "weight"]
    assert len(data) == 257
    manifest = json.loads((work / "data.csv.manifest.json").read_text())
    assert manifest["command"] == "simulate"
    assert "data.csv" in manifest["outputs"]


def test_simulate_rerun_identical(work):
    out = work / "again.csv"
    assert main(["simulate", "--mesh", str(work / "mesh.txt"), "--phantom", str(work / "truth.csv"),
                 "--out", str(out)]) == 0
    assert out.read_bytes() == (work / "data.csv").read_bytes()


def test_noise_seed_reproducible(work):
    args = ["simulate", "--mesh", str(work / "mesh.txt"), "--phantom", str(work / "truth.csv"),
            "--noise-pct", "1", "--seed", "5", "--out"]
    assert main(args + [str(work / "n1.csv")]) == 0
    assert main(args + [str(work / "n2.csv")]) == 0
    assert (work / "n1.csv").read_bytes() == (work / "n2.csv").read_bytes()
    assert (work / "n1.csv").read_bytes() != (work / "data.csv").read_bytes()


def test_invert_and_report(work):
    out = work / "run"
    code = main(["invert", "--mesh", str(work / "mesh.txt"), "--basis", str(work / "basis.npz"),
                 "--data", str(work / "data.csv"), "--truth", str(work / "truth.csv"),
                 "--n-s", "2", "--max-iterations", "6", "--n-max", "3", "--out-dir", str(out)])
    assert code == 0
    for name in ("history.csv", "sigma_fine.csv", "sigma_coarse.csv", "partition.csv", "summary.json", "manifest.json"):
        assert (out / name).exists(), name
    hist = rows(out / "history.csv")
    assert hist[0] == ["k", "scale", "J_fine", "J_coarse", "l2_error", "N_xi", "alpha"]
    assert len(hist) == 8
    assert main(["report", "--history", str(out / "history.csv"), "--out", str(work / "report.csv")]) == 0
    assert len(rows(work / "report.csv")) == 2


def test_config_precedence(work):
    cfg = work / "mesh.cfg"
    cfg.write_text("radius = 0.1\ntarget_elements = 300\n")
    assert main(["mesh", "--config", str(cfg), "--out", str(work / "m1.txt")]) == 0
    assert main(["mesh", "--config", str(cfg), "--target-elements", "700", "--out", str(work / "m2.txt")]) == 0
    assert (work / "m2.txt").read_bytes() == (work / "mesh.txt").read_bytes()
    assert (work / "m1.txt").read_bytes() != (work / "mesh.txt").read_bytes()


def test_unknown_config_key(work, capsys):
    cfg = work / "bad.json"
    cfg.write_text(json.dumps({"radius": 0.1, "target_elements": 300, "bogus_key": 1}))
    assert main(["mesh", "--config", str(cfg), "--out", str(work / "m3.txt")]) == 2
    assert "bogus_key" in capsys.readouterr().err


@pytest.mark.parametrize("mode", ["cheap", "expensive"])
def test_kappa_modes(work, mode):
    out = work / f"kappa_{mode}.csv"
    args = ["kappa", "--mesh", str(work / "mesh.txt"), "--data", str(work / "data.csv"), "--mode", mode, "--out", str(out)]
    if mode == "expensive":
        args += ["--components", "4", "--epsilon", "1e-6"]
    assert main(args) == 0
    table = rows(out)
    header = ["epsilon", "kappa", "log10_abs_dev"] if mode == "cheap" else ["component", "kappa"]
    assert table[0] == header
    if mode == "expensive":
        assert len(table) == 5
        assert all(abs(float(r[1]) - 1) < 1e-3 for r in table[1:])


def test_usage_errors(work):
    assert main(["mesh", "--radius", "0.1"]) == 2
    assert main(["nonsense"]) == 2
    assert main(["simulate", "--mesh", str(work / "missing.txt"), "--phantom", str(work / "truth.csv"),
                 "--out", str(work / "x.csv")]) == 2


def test_runtime_error_exit_one(work):
    assert main(["mesh", "--radius", "0.1", "--target-elements", "10", "--out", str(work / "tiny.txt")]) == 1


def test_console_script(work):
    exe = shutil.which("mseit")
    if exe is None:
        pytest.skip("console script not installed")
    proc = subprocess.run([exe, "mesh", "--radius", "0.1"], capture_output=True, text=True)
    assert proc.returncode == 2
