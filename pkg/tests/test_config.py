"""Config grammar: parsing, validation, suggestions, overrides, builders."""

import pytest

from advclr import config as cfgmod
from advclr.config import ConfigError, parse_config

MINIMAL = """
[run]
seed = 1

[data]
source = synthetic
num_classes = 4
per_class = 20

[model]
kind = toy_conv
widths = 4,6,8

[pretrain]
epochs = 2

[finetune]
epochs = 3
"""


def write(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return str(path)


class TestParse:
    def test_minimal_file_fills_defaults(self, tmp_path):
        cfg = parse_config(write(tmp_path, MINIMAL))
        pre = cfgmod.build_pretrain(cfg)
        assert pre.tau == 0.1
        assert pre.momentum == 0.9
        assert pre.epochs == 2
        assert cfg.get("attacks", "epsilons") == [0.03, 0.06, 0.08]

    def test_unknown_key_suggests_fix(self, tmp_path):
        bad = MINIMAL + "\n[attacks]\nepsilonn = 0.03\n"
        with pytest.raises(ConfigError, match=r"epsilonn.*did you mean 'epsilons'"):
            parse_config(write(tmp_path, bad))

    def test_unknown_section_suggests_fix(self, tmp_path):
        bad = MINIMAL + "\n[attack]\nkinds = fgsm\n"
        with pytest.raises(ConfigError, match=r"\[attack\].*did you mean"):
            parse_config(write(tmp_path, bad))

    def test_type_error_reports_line(self, tmp_path):
        bad = "[run]\nseed = not_a_number\n"
        with pytest.raises(ConfigError, match=r"run\.cfg:2"):
            parse_config(write(tmp_path, bad))

    def test_key_outside_section_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="outside"):
            parse_config(write(tmp_path, "seed = 3\n"))

    def test_syntax_error_reports_line(self, tmp_path):
        bad = "[run]\nseed 3\n"
        with pytest.raises(ConfigError, match=r"run\.cfg:2"):
            parse_config(write(tmp_path, bad))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            parse_config(str(tmp_path / "absent.cfg"))

    def test_comments_and_blank_lines_ignored(self, tmp_path):
        text = "# top comment\n\n[run]\nseed = 5   # inline\n"
        cfg = parse_config(write(tmp_path, text))
        assert cfg.get("run", "seed") == 5


class TestOverrides:
    def test_flag_beats_file(self, tmp_path):
        cfg = parse_config(write(tmp_path, MINIMAL), {"run.seed": 9})
        assert cfg.get("run", "seed") == 9

    def test_env_var_sets_data_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ADVCLR_DATA_DIR", "/data/cifar")
        cfg = parse_config(write(tmp_path, MINIMAL))
        assert cfg.get("data", "dir") == "/data/cifar"

    def test_flag_beats_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ADVCLR_DATA_DIR", "/from/env")
        cfg = parse_config(write(tmp_path, MINIMAL), {"data.dir": "/from/flag"})
        assert cfg.get("data", "dir") == "/from/flag"

    def test_unknown_override_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="override"):
            parse_config(write(tmp_path, MINIMAL), {"run.sneed": 1})


class TestBuilders:
    def test_missing_required_epochs_reported_with_section(self, tmp_path):
        no_epochs = MINIMAL.replace("[pretrain]\nepochs = 2\n", "")
        cfg = parse_config(write(tmp_path, no_epochs))
        with pytest.raises(ConfigError, match=r"\[pretrain\] epochs"):
            cfgmod.build_pretrain(cfg)

    def test_attack_grid(self, tmp_path):
        cfg = parse_config(write(tmp_path, MINIMAL))
        grid = cfgmod.build_attacks(cfg)
        assert len(grid) == 9  # 3 kinds x 3 epsilons
        kinds = {a.kind for a in grid}
        assert kinds == {"fgsm", "pgd", "cw"}

    def test_dataset_builder_synthetic(self, tmp_path):
        cfg = parse_config(write(tmp_path, MINIMAL))
        train, test = cfgmod.build_dataset(cfg)
        assert len(train) == 80 and train.num_classes == 4
        assert test.split == "test"

    def test_cifar_requires_dir(self, tmp_path):
        text = MINIMAL.replace("source = synthetic", "source = cifar10")
        cfg = parse_config(write(tmp_path, text))
        with pytest.raises(ConfigError, match="dir"):
            cfgmod.build_dataset(cfg)

    def test_digest_stable_and_sensitive(self, tmp_path):
        a = parse_config(write(tmp_path, MINIMAL))
        b = parse_config(write(tmp_path, MINIMAL))
        assert a.digest() == b.digest()
        c = parse_config(write(tmp_path, MINIMAL), {"run.seed": 2})
        assert c.digest() != a.digest()
