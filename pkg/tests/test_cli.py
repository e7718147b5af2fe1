import subprocess
import sys

import pytest

from shufflecam.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main

SMALL = ["--set", "dataset.synth.num_samples=20", "--set", "model.widths=4,8,8",
         "--set", "model.theta_dim=8", "--set", "training.epochs=1"]


def test_train_genmask_eval_report(tmp_path, capsys):
    out = ["--out", str(tmp_path)]
    assert main(["train", *out, *SMALL]) == EXIT_OK
    assert main(["genmask", *out, *SMALL, "--cam", "raw"]) == EXIT_OK
    assert main(["eval", *out, *SMALL, "--tag", "raw"]) == EXIT_OK
    assert "average_dice" in capsys.readouterr().out
    assert main(["report", *out, *SMALL, "--composites", "2"]) == EXIT_OK
    written = capsys.readouterr().out.split()
    assert sum("composite_" in w for w in written) == 2


def test_variant_and_flags_reach_config(tmp_path):
    assert main(["train", "--out", str(tmp_path), *SMALL, "--variant", "no_fl", "--seed", "3",
                 "--threshold", "0.3", "--set", "training.epochs=0"]) == EXIT_OK
    echo = (tmp_path / "config.txt").read_text()
    for line in ("schedule.mode = frozen", "schedule.patch_sizes = 32", "schedule.f_init = 0.3",
                 "training.seed = 3", "eval.threshold = 0.3"):
        assert line + "\n" in echo


@pytest.mark.parametrize("argv", [
    ["train", "--set", "training.lr=fast"],
    ["train", "--set", "nonsense"],
    ["train", "--config", "/nonexistent/config.txt"],
    ["ablate", "--seeds", "1,x"],
])
def test_config_errors_exit_2(argv, tmp_path, capsys):
    assert main(argv + ["--out", str(tmp_path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_config_file(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("dataset.synth.num_samples = 20\nmodel.widths = 4,8,8\ntraining.epochs = 0\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK


def test_runtime_errors_exit_3(tmp_path, capsys):
    # genmask without a trained checkpoint
    assert main(["genmask", "--out", str(tmp_path), *SMALL]) == EXIT_RUNTIME
    assert main(["ablate", "--out", str(tmp_path), *SMALL, "--variant", "full"]) == EXIT_RUNTIME
    err = capsys.readouterr().err
    assert "checkpoint" in err and "two variants" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_exits_3(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), *SMALL, "--set", "training.lr=1e300"]) == EXIT_RUNTIME
    assert "aborted" in capsys.readouterr().err


def test_unknown_variant_rejected_by_parser(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["ablate", "--variant", "fancy"])
    assert exc.value.code == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "shufflecam", "train", "--out", str(tmp_path),
                           *SMALL, "--set", "training.epochs=0"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "trained 0 iterations" in proc.stdout
