"""End-to-end tests of the train / sweep / verify commands."""

import re
from pathlib import Path

import numpy as np
import pytest

from fewbit.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, EXIT_VERIFY, main
from fewbit.core import SystemConfig
from fewbit.harness import read_csv
from fewbit.networks import init_cenet_params, init_detnet_params, load_checkpoint

BASE = """\
seed = 3
[system]
N = 4
K = 2
Tt = 6
bits = 2
snr_db = 5
constellation = QPSK
[train]
epochs = 4
batch = 8
lr0 = 0.002
decay = 0.97
c1 = 0.01
c2 = 1000
trainable_pilot = false
[net]
kind = fbm-cenet
layers = 3
[sweep]
snrs = 5
trials = 60
methods = bmmse, bwzf, fbm-cenet
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "ce_b2.cfg").write_text(BASE)
    return tmp_path


def _train(workdir, *extra, cfg="ce_b2.cfg"):
    return main(["train", "--config", str(workdir / cfg), "--out-dir", str(workdir), *extra])


class TestTrain:
    def test_writes_checkpoint_loss_and_manifest(self, workdir):
        assert _train(workdir, "--net", "fbm-cenet") == EXIT_OK
        for name in ("ce_b2.ckpt", "ce_b2_loss.csv", "ce_b2_manifest.cfg"):
            assert (workdir / name).exists()
        lines = (workdir / "ce_b2_loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,lr,loss" and len(lines) == 5
        _, meta = load_checkpoint(workdir / "ce_b2.ckpt")
        assert meta["snr_db"] == "5.0" and meta["N"] == "4"

    def test_zero_epochs_equals_init(self, workdir):
        assert _train(workdir, "--epochs", "0") == EXIT_OK
        p, _ = load_checkpoint(workdir / "ce_b2.ckpt")
        ref = init_cenet_params(SystemConfig(N=4, K=2, Tt=6, bits=2, snr_db=5), L=3)
        np.testing.assert_array_equal(p.alpha, ref.alpha)
        np.testing.assert_array_equal(p.pilot, ref.pilot)

    @pytest.mark.parametrize("kind", ["b-detnet", "fbm-detnet"])
    def test_detnets_zero_epochs(self, workdir, kind):
        assert _train(workdir, "--net", kind, "--epochs", "0", "--name", kind) == EXIT_OK
        p, _ = load_checkpoint(workdir / f"{kind}.ckpt")
        ref = init_detnet_params(SystemConfig(N=4, K=2, Tt=6, bits=2, snr_db=5), kind, L=3)
        np.testing.assert_array_equal(p.alpha, ref.alpha)
        assert p.kind == kind

    def test_missing_key_names_it(self, workdir, capsys):
        (workdir / "bad.cfg").write_text(BASE.replace("N = 4\n", ""))
        assert _train(workdir, cfg="bad.cfg") == EXIT_CONFIG
        assert "system.N" in capsys.readouterr().err

    def test_bad_line_is_anchored(self, workdir, capsys):
        (workdir / "bad.cfg").write_text(BASE.replace("bits = 2", "bits = two"))
        assert _train(workdir, cfg="bad.cfg") == EXIT_CONFIG
        assert re.search(r"bad\.cfg:6: bad value for system\.bits", capsys.readouterr().err)

    def test_divergence_exit_code(self, workdir, capsys):
        (workdir / "hot.cfg").write_text(BASE.replace("lr0 = 0.002", "lr0 = 1e6").replace("epochs = 4", "epochs = 300"))
        assert _train(workdir, cfg="hot.cfg") == EXIT_DIVERGED
        assert "diverged" in capsys.readouterr().err

    def test_usage_error_is_config_error(self):
        with pytest.raises(SystemExit) as e:
            main(["train"])
        assert e.value.code == EXIT_CONFIG


class TestSweep:
    def test_nmse_rows_and_determinism(self, workdir):
        assert _train(workdir) == EXIT_OK
        args = ["sweep", "nmse", "--config", str(workdir / "ce_b2.cfg"), "--snrs", "0,5",
                "--checkpoints", str(workdir / "ce_b2.ckpt")]
        # checkpoint only covers 5 dB
        assert main(args + ["--out", str(workdir / "x.csv")]) == EXIT_CONFIG
        args[5] = "5"
        assert main(args + ["--out", str(workdir / "a.csv")]) == EXIT_OK
        assert main(args + ["--out", str(workdir / "b.csv")]) == EXIT_OK
        assert (workdir / "a.csv").read_bytes() == (workdir / "b.csv").read_bytes()
        res = read_csv(workdir / "a.csv")
        assert len(res.rows) == 3 and res.methods == ["bmmse", "bwzf", "fbm-cenet"]

    def test_missing_checkpoint_named(self, workdir, capsys):
        rc = main(["sweep", "nmse", "--config", str(workdir / "ce_b2.cfg"), "--out", str(workdir / "r.csv")])
        assert rc == EXIT_CONFIG
        assert "missing checkpoint for fbm-cenet at 5 dB" in capsys.readouterr().err

    def test_unknown_method(self, workdir, capsys):
        rc = main(["sweep", "ber", "--config", str(workdir / "ce_b2.cfg"), "--methods", "zf",
                   "--out", str(workdir / "r.csv")])
        assert rc == EXIT_CONFIG and "unknown ber method" in capsys.readouterr().err

    def test_ber_estimated_csi(self, workdir):
        assert _train(workdir) == EXIT_OK
        assert _train(workdir, "--net", "fbm-detnet", "--name", "det") == EXIT_OK
        out = workdir / "ber.csv"
        rc = main(["sweep", "ber", "--config", str(workdir / "ce_b2.cfg"), "--methods", "bmmse,fbm-detnet,ml",
                   "--csi", "estimated", "--checkpoints", str(workdir / "ce_b2.ckpt"), str(workdir / "det.ckpt"),
                   "--out", str(out)])
        assert rc == EXIT_OK
        assert read_csv(out).methods == ["bmmse", "fbm-detnet", "ml"]
        manifest = (workdir / "ber_manifest.cfg").read_text()
        assert "sweep.csi = estimated" in manifest and "run.command = sweep ber" in manifest

    def test_checkpoint_dimension_mismatch(self, workdir, capsys):
        (workdir / "big.cfg").write_text(BASE.replace("N = 4", "N = 6"))
        assert _train(workdir, cfg="big.cfg") == EXIT_OK
        rc = main(["sweep", "nmse", "--config", str(workdir / "ce_b2.cfg"),
                   "--checkpoints", str(workdir / "big.ckpt"), "--out", str(workdir / "r.csv")])
        assert rc == EXIT_CONFIG and "trained for" in capsys.readouterr().err

    def test_manifest_reproduces_output(self, workdir):
        out = workdir / "r.csv"
        args = ["sweep", "nmse", "--config", str(workdir / "ce_b2.cfg"), "--methods", "bmmse,ga-ml", "--trials", "40"]
        assert main(args + ["--out", str(out)]) == EXIT_OK
        manifest = workdir / "r_manifest.cfg"
        assert main(["sweep", "nmse", "--config", str(manifest), "--out", str(workdir / "again.csv")]) == EXIT_OK
        assert out.read_bytes() == (workdir / "again.csv").read_bytes()

    def test_gnuplot_flag(self, workdir):
        out = workdir / "g.dat"
        assert main(["sweep", "nmse", "--config", str(workdir / "ce_b2.cfg"), "--methods", "bmmse",
                     "--out", str(out), "--gnuplot"]) == EXIT_OK
        assert out.read_text().startswith("# snr_db bmmse:value bmmse:std_error\n")


class TestVerify:
    def test_default_runs_at_least_ten_checks(self, capsys):
        assert main(["verify"]) == EXIT_OK
        out = capsys.readouterr().out.splitlines()
        passes = [line for line in out if line.startswith("PASS ")]
        assert len(passes) >= 10 and out[-1] == f"{len(passes)}/{len(passes)} checks passed"

    def test_only_filters(self, capsys):
        assert main(["verify", "--only", "gradients"]) == EXIT_OK
        out = capsys.readouterr().out.splitlines()
        assert len(out) == 2 and out[0].startswith("PASS gradients")

    def test_tampered_tolerance_fails_and_is_reported(self, capsys):
        assert main(["verify", "--only", "gradients", "--grad-tol", "1e-20"]) == EXIT_VERIFY
        line = capsys.readouterr().out.splitlines()[0]
        assert line.startswith("FAIL gradients") and "1e-20" in line

    def test_list_and_unknown(self, capsys):
        assert main(["verify", "--list"]) == EXIT_OK
        assert "arcsine" in capsys.readouterr().out.split()
        assert main(["verify", "--only", "nope"]) == EXIT_CONFIG


def test_no_environment_variables_read():
    src = Path(__file__).resolve().parents[1] / "src" / "fewbit"
    for f in src.glob("*.py"):
        text = f.read_text()
        assert "environ" not in text and "getenv" not in text, f.name
