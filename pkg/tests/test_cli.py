import json

import pytest

from gpn import cli
from gpn.checkpoint import CheckpointBundle
from gpn.datasets import load_events, save_events
from gpn.training import MetricsLog

from synthetic import class_sequences

SMALL = ["--arch", "FC16-GPN16-DP-FC4", "--T", "8", "--lr", "1e-2", "--batch", "16",
         "--epochs", "3"]


@pytest.fixture
def data_dir(tmp_path):
    d = tmp_path / "data"
    d.mkdir()
    save_events(d / "shd_train.spk", class_sequences(48, seed=0), channels=32)
    save_events(d / "shd_test.spk", class_sequences(16, seed=1), channels=32)
    return d


@pytest.fixture
def trained(data_dir, tmp_path):
    out = tmp_path / "run"
    code = cli.main(["train", "--data-dir", str(data_dir), "--out", str(out)] + SMALL)
    assert code == cli.EXIT_OK
    return out


class TestConvert:
    def test_one_line(self, tmp_path, capsys):
        raw = tmp_path / "raw.txt"
        raw.write_text("7;0.5,3;0.75,10\n")
        assert cli.main(["convert", str(raw), str(tmp_path / "o.spk")]) == 0
        (seq,) = load_events(tmp_path / "o.spk")
        assert seq.label == 7 and seq.units.tolist() == [3, 10]
        assert "1 sequences" in capsys.readouterr().out

    def test_empty_file(self, tmp_path):
        raw = tmp_path / "raw.txt"
        raw.write_text("")
        assert cli.main(["convert", str(raw), str(tmp_path / "o.spk")]) == 0
        assert load_events(tmp_path / "o.spk") == []

    def test_bad_line(self, tmp_path, capsys):
        raw = tmp_path / "raw.txt"
        raw.write_text("1;0.1,2\n2;0.5\n")
        assert cli.main(["convert", str(raw), str(tmp_path / "o.spk")]) == cli.EXIT_DATA
        assert "line 2" in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, trained, capsys):
        ck = CheckpointBundle.load(trained / "checkpoint.gpnw")
        assert ck.arch == "FC16-GPN16-DP-FC4" and ck.extra["T"] == 8
        log = MetricsLog.from_csv(trained / "metrics.csv")
        assert [r.epoch for r in log.rows] == [1, 2, 3]
        assert ck.val_acc == max(r.val_acc for r in log.rows)
        sidecar = json.loads((trained / "run_config.json").read_text())
        assert sidecar["T"] == 8 and sidecar["lr"] == 0.01 and sidecar["augment"] == "per_step"

    def test_eval_reproduces_validation_accuracy(self, trained, data_dir, capsys):
        ck = CheckpointBundle.load(trained / "checkpoint.gpnw")
        capsys.readouterr()
        args = ["eval", "--checkpoint", str(trained / "checkpoint.gpnw"), "--data-dir", str(data_dir)]
        assert cli.main(args + ["--split", "val"]) == 0
        assert float(capsys.readouterr().out) == pytest.approx(ck.val_acc, abs=5e-5)
        assert cli.main(args) == 0
        first = capsys.readouterr().out
        assert cli.main(args) == 0
        assert capsys.readouterr().out == first
        assert float(first) == pytest.approx(ck.extra["test_acc"], abs=5e-5)

    def test_param_analysis(self, trained, data_dir, tmp_path):
        out = tmp_path / "params"
        code = cli.main(["param-analysis", "--checkpoint", str(trained / "checkpoint.gpnw"),
                         "--data-dir", str(data_dir), "--out", str(out), "--bins", "10"])
        assert code == 0
        names = {p.name for p in out.iterdir()}
        assert {"hist-tau1_gpn_8.csv", "fit-tau1_gpn_8.csv", "trace-threshold_gpn_8.csv"} <= names

    def test_config_file_with_override(self, data_dir, tmp_path):
        conf = tmp_path / "c.yaml"
        conf.write_text("arch: FC8-LIF8-FC4\nT: 5\nepochs: 1\nbatch: 16\nlr: 0.005\n")
        out = tmp_path / "run"
        code = cli.main(["train", "--config", str(conf), "--data-dir", str(data_dir),
                         "--out", str(out), "--T", "6"])
        assert code == 0
        sidecar = json.loads((out / "run_config.json").read_text())
        assert sidecar["T"] == 6 and sidecar["arch"] == "FC8-LIF8-FC4"

    def test_ablation_flags(self, data_dir, tmp_path):
        out = tmp_path / "run"
        code = cli.main(["train", "--data-dir", str(data_dir), "--out", str(out), "--ablate", "FI",
                         "--ablate", "T", "--beta", "0.5", "--vth", "1.0"] + SMALL[:-1] + ["1"])
        assert code == 0
        ck = CheckpointBundle.load(out / "checkpoint.gpnw")
        assert ck.neuron["ablation"] == ["FI", "T"]
        assert set(ck.tensors) == {"0.fc.weight", "1.gpn.W_Bv", "1.gpn.W_Bx", "3.fc.weight"}

    def test_grid_over_ablated_threshold(self, data_dir, tmp_path):
        out = tmp_path / "run"
        code = cli.main(["train", "--data-dir", str(data_dir), "--out", str(out), "--ablate", "T",
                         "--grid"] + SMALL[:-1] + ["1"])
        assert code == 0
        lines = (out / "grid.csv").read_text().splitlines()
        assert lines[0] == "beta,v_th,val_acc,test_acc" and len(lines) == 4
        best = max(float(l.split(",")[2]) for l in lines[1:])
        ck = CheckpointBundle.load(out / "checkpoint.gpnw")
        assert ck.val_acc == best and ck.neuron["v_th"] in (0.5, 1.0, 1.5)

    def test_grad_analysis(self, data_dir, tmp_path):
        out = tmp_path / "grads"
        code = cli.main(["grad-analysis", "--data-dir", str(data_dir), "--out", str(out),
                         "--arch", "FC16-GPN16-FC4", "--neuron", "lif", "--T-list", "5,8",
                         "--lr", "1e-2", "--batch", "16", "--epochs", "5"])
        assert code == 0
        assert sorted(p.name for p in out.glob("grad_*.csv")) == ["grad_lif_5.csv", "grad_lif_8.csv"]
        lines = (out / "grad_lif_5.csv").read_text().splitlines()
        assert lines[0] == "i,mean,std" and len(lines) == 6


class TestExitCodes:
    def test_unknown_config_key(self, tmp_path, capsys):
        conf = tmp_path / "c.yaml"
        conf.write_text("learning_rate: 0.1\n")
        assert cli.main(["train", "--config", str(conf)]) == cli.EXIT_CONFIG
        assert "learning_rate" in capsys.readouterr().err

    def test_bad_architecture(self, capsys):
        assert cli.main(["train", "--arch", "FC8-GPN8"]) == cli.EXIT_CONFIG
        assert "readout" in capsys.readouterr().err

    def test_ablation_without_beta(self, capsys):
        assert cli.main(["train", "--ablate", "FI"]) == cli.EXIT_CONFIG

    def test_all_problems_reported(self, capsys):
        assert cli.main(["train", "--arch", "FC8", "--lr", "-1", "--batch", "0"]) == cli.EXIT_CONFIG
        err = capsys.readouterr().err
        assert "lr" in err and "batch" in err

    def test_missing_data(self, tmp_path, capsys):
        code = cli.main(["train", "--data-dir", str(tmp_path), "--out", str(tmp_path / "r")] + SMALL)
        assert code == cli.EXIT_DATA
        assert "not found" in capsys.readouterr().err
        assert not (tmp_path / "r").exists()

    def test_corrupt_checkpoint(self, data_dir, tmp_path, capsys):
        bad = tmp_path / "bad.gpnw"
        bad.write_bytes(b"XXXX" + bytes(20))
        code = cli.main(["eval", "--checkpoint", str(bad), "--data-dir", str(data_dir)])
        assert code == cli.EXIT_DATA
        assert "magic" in capsys.readouterr().err

    def test_channel_mismatch(self, data_dir, tmp_path):
        save_events(data_dir / "shd_test.spk", class_sequences(4, channels=40), channels=40)
        code = cli.main(["train", "--data-dir", str(data_dir), "--out", str(tmp_path / "r")] + SMALL)
        assert code == cli.EXIT_DATA

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_divergence(self, data_dir, tmp_path, capsys):
        code = cli.main(["train", "--data-dir", str(data_dir), "--out", str(tmp_path / "r"),
                         "--lr", "1e300"] + SMALL[:4] + SMALL[6:])
        assert code == cli.EXIT_DIVERGED
        assert "divergence" in capsys.readouterr().err

    def test_param_analysis_needs_gpn(self, data_dir, tmp_path):
        out = tmp_path / "run"
        cli.main(["train", "--data-dir", str(data_dir), "--out", str(out), "--neuron", "lif"]
                 + SMALL[:-1] + ["1"])
        code = cli.main(["param-analysis", "--checkpoint", str(out / "checkpoint.gpnw"),
                         "--data-dir", str(data_dir)])
        assert code == cli.EXIT_CONFIG
