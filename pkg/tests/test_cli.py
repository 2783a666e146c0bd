"""End-to-end CLI tests: exit codes, determinism, and the train/eval
pipeline on a miniature synthetic corpus in real file formats."""

import numpy as np
import pytest

from qbitnet.cli import main
from qbitnet.data import write_synthetic_mnist

TINY_CONFIG = """
[dataset]
kind = mnist-idx
dir = {data_dir}
normalize_mean = 0.1307
normalize_std = 0.3081
augment = none

[model]
input = 1x28x28
conv1 = conv 4 3x3 pad 1
bn1 = batchnorm
act1 = act
pool1 = maxpool 2
fc1 = fc 16
bn2 = batchnorm
act2 = act
fc2 = fc 10 bias noquant

[schedule]
weights = 2/1
activations = 2

[training]
optimizer = sgd-momentum
lr = 0.05
momentum = 0.9
weight_decay = 0.0002
milestones =
batch_size = 32
epochs = {epochs}
seed = 9
"""


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "mnist"
    write_synthetic_mnist(d, n_train=120, n_test=40, seed=5)
    return d


def write_config(tmp_path, data_dir, epochs=1):
    # an empty milestones line means no decay steps
    text = TINY_CONFIG.format(data_dir=data_dir, epochs=epochs)
    text = text.replace("milestones =\n", "")
    path = tmp_path / "config.cfg"
    path.write_text(text)
    return path


class TestTrainCommand:
    def test_one_epoch_smoke(self, tmp_path, tiny_data, capsys):
        cfg = write_config(tmp_path, tiny_data, epochs=1)
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        log = (out / "metrics.tsv").read_text().splitlines()
        assert len(log) == 2  # header + one epoch
        assert (out / "model.qbm").exists()
        assert (out / "training_curve.png").exists()
        assert "test_acc" in capsys.readouterr().out

    def test_config_error_exit_3(self, tmp_path, tiny_data, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text(TINY_CONFIG.format(data_dir=tiny_data, epochs=1)
                       .replace("milestones =", "milestones = 9 2"))
        rc = main(["train", "--config", str(bad), "--out", str(tmp_path / "x")])
        assert rc == 3
        assert "milestones" in capsys.readouterr().err

    def test_missing_dataset_exit_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path, tmp_path / "nowhere", epochs=1)
        rc = main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")])
        assert rc == 2
        assert "nowhere" in capsys.readouterr().err

    def test_fixed_seed_identical_logs(self, tmp_path, tiny_data):
        cfg = write_config(tmp_path, tiny_data, epochs=2)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--config", str(cfg), "--out", str(out1),
                     "--seed", "3"]) == 0
        assert main(["train", "--config", str(cfg), "--out", str(out2),
                     "--seed", "3"]) == 0
        assert (out1 / "metrics.tsv").read_text() == (out2 / "metrics.tsv").read_text()
        assert (out1 / "model.qbm").read_bytes() == (out2 / "model.qbm").read_bytes()


class TestEvalCommand:
    def test_eval_reproduces_train_test_acc(self, tmp_path, tiny_data, capsys):
        cfg = write_config(tmp_path, tiny_data, epochs=1)
        out = tmp_path / "run"
        main(["train", "--config", str(cfg), "--out", str(out)])
        train_out = capsys.readouterr().out
        trained_acc = [l for l in train_out.splitlines()
                       if l.startswith("test_acc")][0].split("\t")[1]
        assert main(["eval", "--model", str(out / "model.qbm"),
                     "--data", str(tiny_data)]) == 0
        eval_out = capsys.readouterr().out
        eval_acc = [l for l in eval_out.splitlines()
                    if l.startswith("top1_acc")][0].split("\t")[1]
        assert eval_acc == trained_acc

    def test_model_format_error_exit_4(self, tmp_path, tiny_data, capsys):
        bad = tmp_path / "bad.qbm"
        bad.write_bytes(b"JUNKJUNKJUNK")
        rc = main(["eval", "--model", str(bad), "--data", str(tiny_data)])
        assert rc == 4
        assert "magic" in capsys.readouterr().err

    def test_wrong_shape_dataset_exit_4(self, tmp_path, tiny_data, capsys):
        # model expects 28x28; hand it a 14x14 corpus
        from qbitnet.data import write_idx_images, write_idx_labels
        cfg = write_config(tmp_path, tiny_data, epochs=1)
        out = tmp_path / "run"
        main(["train", "--config", str(cfg), "--out", str(out)])
        capsys.readouterr()
        other = tmp_path / "small"
        other.mkdir()
        rng = np.random.default_rng(0)
        for split, n in (("train", 10), ("t10k", 10)):
            write_idx_images(other / f"{split}-images-idx3-ubyte",
                             rng.integers(0, 255, size=(n, 14, 14)).astype(np.uint8))
            write_idx_labels(other / f"{split}-labels-idx1-ubyte",
                             rng.integers(0, 10, size=n).astype(np.uint8))
        rc = main(["eval", "--model", str(out / "model.qbm"), "--data", str(other)])
        assert rc == 4
        assert "shape" in capsys.readouterr().err


class TestSizeReportCommand:
    def test_vgg7_published_average(self, capsys, tmp_path):
        plot = tmp_path / "chart.png"
        rc = main(["size-report", "--arch", "vgg7", "--schedule", "8-4-2-1-1-1/1",
                   "--baseline", "2", "--plot", str(plot)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "average_bitwidth_rounded\t1.06" in out
        assert plot.exists()

    def test_resnet18_published_average(self, capsys):
        rc = main(["size-report", "--arch", "resnet18", "--schedule", "8-4-2-1",
                   "--baseline", "2"])
        assert rc == 0
        assert "average_bitwidth_rounded\t1.42" in capsys.readouterr().out

    def test_uniform_zero_savings(self, capsys):
        rc = main(["size-report", "--arch", "resnet20", "--schedule", "2-2-2",
                   "--baseline", "2"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "average_bitwidth_rounded\t2.00" in out
        assert "savings_vs_baseline\t0.00%" in out

    def test_grammar_error_exit_3(self, capsys):
        rc = main(["size-report", "--arch", "vgg7", "--schedule", "8-oops",
                   "--baseline", "2"])
        assert rc == 3
        assert "oops" in capsys.readouterr().err

    def test_byte_identical_output(self, capsys):
        outs = []
        for _ in range(2):
            main(["size-report", "--arch", "alexnet", "--schedule", "8-4-2-1/1-1",
                  "--baseline", "2"])
            outs.append(capsys.readouterr().out)
        assert outs[0] == outs[1]


class TestPackCommand:
    def test_round_trip_is_byte_stable(self, tmp_path, tiny_data, capsys):
        cfg = write_config(tmp_path, tiny_data, epochs=1)
        out = tmp_path / "run"
        main(["train", "--config", str(cfg), "--out", str(out)])
        capsys.readouterr()
        repacked = tmp_path / "repacked.qbm"
        assert main(["pack", "--model", str(out / "model.qbm"),
                     "--out", str(repacked)]) == 0
        assert repacked.read_bytes() == (out / "model.qbm").read_bytes()

    def test_bad_model_exit_4(self, tmp_path, capsys):
        bad = tmp_path / "bad.qbm"
        bad.write_bytes(b"QBM1" + b"\xff" * 3)
        rc = main(["pack", "--model", str(bad), "--out", str(tmp_path / "o.qbm")])
        assert rc == 4
