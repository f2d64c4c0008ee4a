"""End-to-end command-line driver checks on a miniature pipeline."""

import os

import pytest

from advclr import cli, evaluation
from advclr.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK

TINY_CFG = """
[run]
seed = 3

[data]
source = synthetic
num_classes = 4
per_class = 30
test_per_class = 10
image_size = 16

[model]
kind = toy_conv
widths = 4,6,8
proj_dim = 8

[augment]
crop_pad = 1
hflip_prob = 0.0

[pretrain]
epochs = 2
batch_size = 32
lr0 = 0.05
view_steps = 2

[finetune]
epochs = 4
lr = 0.01

[baseline]
epochs = 2

[attacks]
kinds = fgsm,pgd
epsilons = 0.0,0.03
steps = 2

[eval]
batch_size = 64
"""


@pytest.fixture()
def cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return str(path)


def test_help_exits_zero():
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0


def test_subcommand_help_exits_zero():
    with pytest.raises(SystemExit) as exc:
        cli.main(["pretrain", "--help"])
    assert exc.value.code == 0


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[run]\nseed = oops\n")
    assert cli.main(["pretrain", "--config", str(bad)]) == EXIT_CONFIG


def test_data_error_exit_code(tmp_path):
    assert cli.main(["ingest-check", "--data-dir", str(tmp_path)]) == EXIT_DATA


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--seed", "0"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "max rel err" in out and "ok" in out


def test_full_pipeline_and_null_attack_report(cfg_file, tmp_path, capsys):
    pre_dir = str(tmp_path / "pre")
    assert cli.main(["pretrain", "--config", cfg_file, "--run-dir", pre_dir]) == EXIT_OK
    ckpt = os.path.join(pre_dir, "pretrain-final.ckpt")
    assert os.path.exists(ckpt)
    assert os.path.exists(os.path.join(pre_dir, "pretrain-log.jsonl"))

    ft_dir = str(tmp_path / "ft")
    assert cli.main(["finetune", "--config", cfg_file, "--checkpoint", ckpt,
                     "--run-dir", ft_dir]) == EXIT_OK
    model = os.path.join(ft_dir, "model.ckpt")
    assert os.path.exists(model)

    ev_dir = str(tmp_path / "ev")
    assert cli.main(["evaluate", "--config", cfg_file, "--checkpoint", model,
                     "--run-dir", ev_dir]) == EXIT_OK
    report_path = os.path.join(ev_dir, "report-model.json")
    report = evaluation.EvalReport.from_json(open(report_path).read())
    # epsilon 0 cells must equal clean accuracy exactly
    for cell in report.cells:
        if cell.epsilon == 0.0:
            assert cell.robust_accuracy == report.clean_accuracy
    csv_lines = open(os.path.join(ev_dir, "report.csv")).read().strip().splitlines()
    assert len(csv_lines) - 1 == len(report.cells)

    capsys.readouterr()
    assert cli.main(["report", "--report", report_path]) == EXIT_OK
    assert "clean accuracy" in capsys.readouterr().out


def test_identical_config_and_seed_reproduce_artifacts(cfg_file, tmp_path):
    runs = []
    for tag in ("a", "b"):
        pre_dir = str(tmp_path / f"pre-{tag}")
        assert cli.main(["pretrain", "--config", cfg_file,
                         "--run-dir", pre_dir]) == EXIT_OK
        runs.append(open(os.path.join(pre_dir, "pretrain-final.ckpt"), "rb").read())
    assert runs[0] == runs[1]


def test_flag_overrides_epochs(cfg_file, tmp_path):
    pre_dir = str(tmp_path / "pre1")
    assert cli.main(["pretrain", "--config", cfg_file, "--pretrain-epochs", "1",
                     "--run-dir", pre_dir]) == EXIT_OK
    log = open(os.path.join(pre_dir, "pretrain-log.jsonl")).read()
    assert len(log.strip().splitlines()) == 1


def test_commands_do_not_mutate_config(cfg_file, tmp_path):
    before = open(cfg_file).read()
    cli.main(["pretrain", "--config", cfg_file,
              "--run-dir", str(tmp_path / "x")])
    assert open(cfg_file).read() == before
