import subprocess
import sys

import pytest

from csiloc.cli import main

from test_harness import TINY

PIPELINE = [
    ["synth-env"], ["gen-data"], ["train-position"], ["train-position", "--variant", "aarb0"],
    ["eval-position"], ["gen-traj"], ["train-denoisers"], ["track"], ["pnp-track", "--snr", "20"],
    ["sweep-snr", "--snr", "1", "100"], ["flops"], ["track", "--model", "{out}/model_full.pnm"],
]


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    path.write_text(TINY + "[denoiser]\nepochs = 2\n")
    return path


def run_pipeline(config, out):
    for cmd in PIPELINE:
        args = [a.format(out=out) for a in cmd]
        assert main(args + ["--config", str(config), "--out", str(out), "--quiet"]) == 0, cmd


def test_pipeline_is_byte_identical(config_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_pipeline(config_file, a)
    run_pipeline(config_file, b)
    files = sorted(p.name for p in a.iterdir())
    assert files == sorted(p.name for p in b.iterdir())
    for name in ("environment.json", "train.csi", "model_full.pnm", "model_aarb0.pnm",
                 "position_metrics_full.csv", "position_cdf_full.csv", "bank.dnb",
                 "tracking_metrics.csv", "pnp_metrics_20dB.csv", "snr_sweep.csv",
                 "flops_full.csv", "config.ini", "config.hash"):
        assert name in files
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_seed_override_changes_outputs(config_file, tmp_path):
    for seed, d in ((1, "s1"), (2, "s2")):
        assert main(["gen-traj", "--config", str(config_file), "--out", str(tmp_path / d),
                     "--seed", str(seed), "--quiet"]) == 0
    assert (tmp_path / "s1/traj_test.trj").read_bytes() != (tmp_path / "s2/traj_test.trj").read_bytes()
    assert (tmp_path / "s1/config.hash").read_text() != (tmp_path / "s2/config.hash").read_text()


def test_exit_codes(config_file, tmp_path):
    out = str(tmp_path / "x")
    base = ["--config", str(config_file), "--out", out, "--quiet"]
    assert main(["no-such-command"]) == 2
    assert main(["track", "--bogus"]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nepochs = zero\n")
    assert main(["flops", "--config", str(bad), "--out", out]) == 3
    assert main(["flops", "--config", str(tmp_path / "absent.ini"), "--out", out]) == 3
    assert main(["eval-position"] + base) == 4
    assert main(["track"] + base) == 4
    assert main(["gen-traj"] + base) == 0
    (tmp_path / "x" / "bank.dnb").write_bytes(b"DNB1garbage")
    assert main(["track"] + base) == 5
    assert main(["train-position", "--resume"] + base) == 4


def test_stop_and_resume_matches_full_run(config_file, tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(config_file.read_text().replace("[train]\nepochs = 1", "[train]\nepochs = 3"))
    common = ["--config", str(cfg), "--quiet"]
    for d in ("full", "split"):
        assert main(["gen-data", "--out", str(tmp_path / d)] + common) == 0
    assert main(["train-position", "--out", str(tmp_path / "full")] + common) == 0
    assert main(["train-position", "--stop-at", "1", "--out", str(tmp_path / "split")] + common) == 0
    assert main(["train-position", "--resume", "--out", str(tmp_path / "split")] + common) == 0
    assert ((tmp_path / "full/model_full.pnm").read_bytes()
            == (tmp_path / "split/model_full.pnm").read_bytes())


def test_console_entry_point_runs(tmp_path):
    res = subprocess.run([sys.executable, "-m", "csiloc.cli", "flops", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert "parameters" in res.stdout
