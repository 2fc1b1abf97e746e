import csv
import io
import json
import shutil
import subprocess
import sys

import pytest

from analogcim import cli


def run(capsys, *argv):
    code = cli.main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


@pytest.fixture
def ws(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    """A small dataset plus a checkpoint trained on it, shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["make-dataset", "--kind", "blobs", "--n-train", "240", "--n-test", "60", "--dim", "8",
                     "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--dataset", str(root / "data" / "train"), "--epochs1", "4", "--epochs2", "2",
                     "--out", str(root / "run")]) == 0
    return root


class TestExitCodes:
    def test_missing_dataset_names_path(self, ws, capsys):
        code, _, err = run(capsys, "train", "--dataset", "absent/train")
        assert code == 2
        assert "absent/train" in err and "not found" in err

    def test_missing_path_setting(self, ws, capsys):
        code, _, err = run(capsys, "simulate")
        assert code == 2 and "--network" in err

    def test_bad_config(self, ws, capsys):
        (ws / "c.toml").write_text("[noise]\nbogus = 1\n")
        code, _, err = run(capsys, "map", "--config", "c.toml", "--spec", "depthwise_demo")
        assert code == 2 and "bogus" in err

    def test_mapping_failure(self, ws, capsys):
        code, _, err = run(capsys, "map", "--spec", "analognet_kws_approx", "--tile", "64x64", "--max-tiles", "1")
        assert code == 3
        assert "offending layers" in err

    def test_calibration_failure(self, ws, capsys):
        code, _, err = run(capsys, "calibrate", "--free")
        assert code == 4 and "rank" in err

    def test_report_without_outputs(self, ws, capsys):
        code, _, err = run(capsys, "report", "--out", "empty")
        assert code == 2


class TestMakeDatasetAndTrain:
    def test_outputs(self, trained_dir):
        for f in ("data/train/x.aont", "data/test/y.aont", "run/checkpoint.json", "run/train_log.csv"):
            assert (trained_dir / f).is_file()
        log = list(csv.DictReader(io.StringIO((trained_dir / "run" / "train_log.csv").read_text())))
        assert {"step", "loss", "accuracy", "lr"} <= set(log[0])
        ck = json.loads((trained_dir / "run" / "checkpoint.json").read_text())
        assert ck["converters"]["trained"] is True

    def test_byte_identical_rerun(self, trained_dir, tmp_path, capsys):
        assert cli.main(["train", "--dataset", str(trained_dir / "data" / "train"), "--epochs1", "4",
                         "--epochs2", "2", "--out", str(tmp_path / "again")]) == 0
        for f in ["checkpoint.json", "train_log.csv"] + [p.name for p in (trained_dir / "run" / "tensors").iterdir()]:
            sub = "" if f.endswith((".json", ".csv")) else "tensors/"
            assert (tmp_path / "again" / sub / f).read_bytes() == (trained_dir / "run" / sub / f).read_bytes()


class TestSimulate:
    def _sim(self, trained_dir, out, capsys, *extra):
        return run(capsys, "simulate", "--network", str(trained_dir / "run" / "checkpoint.json"),
                   "--eval-dataset", str(trained_dir / "data" / "test"), "--out", str(out), *extra)

    def test_default_protocol(self, trained_dir, tmp_path, capsys):
        code, out, _ = self._sim(trained_dir, tmp_path / "a", capsys)
        assert code == 0 and "seed: 0" in out
        rows = (tmp_path / "a" / "accuracy.csv").read_text().splitlines()
        assert len(rows) == 1 + 25 * 5
        self._sim(trained_dir, tmp_path / "b", capsys)
        assert (tmp_path / "a" / "accuracy.csv").read_bytes() == (tmp_path / "b" / "accuracy.csv").read_bytes()

    def test_noise_off(self, trained_dir, tmp_path, capsys):
        code, _, _ = self._sim(trained_dir, tmp_path, capsys, "--noise-off", "--runs", "3")
        assert code == 0
        summary = json.loads((tmp_path / "accuracy.json").read_text())
        assert summary["noise_off"] is True
        assert all(c["std"] == 0.0 for c in summary["checkpoints"])

    def test_report(self, trained_dir, tmp_path, capsys):
        self._sim(trained_dir, tmp_path, capsys, "--runs", "2")
        code, out, _ = run(capsys, "report", "--out", str(tmp_path))
        assert code == 0 and out.startswith("accuracy (2 runs")
        assert (tmp_path / "report.txt").read_text() == out


class TestMap:
    def test_full_array(self, ws, capsys):
        from analogcim.tensor_net import LayerSpec, NetworkSpec, save_network
        net = NetworkSpec([LayerSpec("dense", "fc", in_channels=1024, out_channels=512)],
                          input_shape=(1024,), class_count=512)
        save_network(net, ws / "net.json")
        code, out, _ = run(capsys, "map", "--network", "net.json")
        assert code == 0
        assert "utilization: 1.000000" in out
        plan = json.loads((ws / "out" / "plan.json").read_text())
        assert plan["tiles_used"] == 1 and (ws / "out" / "occupancy.txt").is_file()

    def test_depthwise_per_layer(self, ws, capsys):
        code, out, _ = run(capsys, "map", "--spec", "depthwise_demo")
        assert code == 0
        assert "effective utilization 0.008929" in out


class TestPerf:
    def test_peak_m4_8bit(self, ws, capsys):
        code, out, _ = run(capsys, "perf", "--spec", "analognet_kws_approx", "--scheme", "M4", "--bits", "8")
        assert code == 0
        doc = json.loads((ws / "out" / "perf.json").read_text())
        assert doc["peak"]["peak_tops"] == pytest.approx(2.02, rel=0.005)
        assert doc["peak"]["peak_tops_per_w"] == pytest.approx(13.55, rel=0.05)
        assert (ws / "out" / "perf.csv").is_file()

    def test_sweep(self, ws, capsys):
        code, _, _ = run(capsys, "sweep")
        assert code == 0
        rows = list(csv.DictReader(open(ws / "out" / "sweep.csv")))
        assert len(rows) == 9
        assert {(r["scheme"], r["bits"]) for r in rows} == {(s, str(b)) for s in ("M1", "M2", "M4") for b in (4, 6, 8)}

    def test_calibrate_planted_round_trip(self, ws, capsys):
        code, _, _ = run(capsys, "calibrate")
        assert code == 0
        fitted = json.loads((ws / "out" / "energy.json").read_text())
        # regenerate a table from the fitted constants, feed it back, recover them
        from analogcim.perf import EnergyParams, SweepPoint, peak_row
        energy = EnergyParams.from_dict(fitted)
        with open(ws / "planted.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scheme", "bits", "tops_per_w"])
            for s in ("M1", "M2", "M4"):
                for b in (4, 6, 8):
                    w.writerow([s, b, peak_row(SweepPoint(s, b), energy)["peak_tops_per_w"]])
        code, _, _ = run(capsys, "calibrate", "--table", "planted.csv", "--out", "again")
        assert code == 0
        again = json.loads((ws / "again" / "energy.json").read_text())
        assert again["p_static"] == pytest.approx(fitted["p_static"], rel=1e-6)
        for k in ("4", "6", "8"):
            assert again["e_adc"][k] == pytest.approx(fitted["e_adc"][k], rel=1e-6)

    def test_energy_file_used(self, ws, capsys):
        run(capsys, "calibrate")
        code, out, _ = run(capsys, "perf", "--spec", "depthwise_demo", "--energy", "out/energy.json")
        assert code == 0 and "energy: " in out and "energy.json" in out


def test_console_script():
    exe = shutil.which("analogcim")
    cmd = [exe] if exe else [sys.executable, "-m", "analogcim.cli"]
    proc = subprocess.run(cmd + ["--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in cli.COMMANDS:
        assert name in proc.stdout
