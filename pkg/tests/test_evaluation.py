"""Accuracy measurement, the report container, and its projections."""

import numpy as np
import pytest

import advclr as A
from advclr import data, evaluation, models
from advclr.attacks import AttackConfig
from advclr.data import DataError
from advclr.evaluation import EvalReport


def rigged_constant_model(label, num_classes=10):
    """Classifier forced to one fixed answer via a one-hot bias."""
    params = models.init_params(A.EncoderSpec("toy_conv", (4, 6, 8)),
                                num_classes, seed=0, proj_dim=8)
    params.arrays["classifier.w"] = np.zeros_like(params.arrays["classifier.w"])
    bias = np.zeros(num_classes, dtype=np.float32)
    bias[label] = 10.0
    params.arrays["classifier.b"] = bias
    return params


def single_class_dataset(label=3, n=40):
    base = data.make_synthetic(10, n, 8, seed=0, split="test")
    return data.Dataset(base.images[:n], np.full(n, label, dtype=np.int64),
                        base.class_names, split="test")


class TestCleanAccuracy:
    def test_oracle_stub_is_perfect(self):
        ds = single_class_dataset(label=3)
        assert evaluation.clean_accuracy(rigged_constant_model(3), ds) == 1.0

    def test_random_model_is_chance_level(self):
        params = models.init_params(A.EncoderSpec("toy_conv", (4, 6, 32)),
                                    10, seed=11, proj_dim=8)
        ds = data.make_synthetic(10, 100, 8, seed=5, split="test")  # 1000 samples
        acc = evaluation.clean_accuracy(params, ds)
        assert abs(acc - 0.10) <= 0.03

    def test_empty_dataset_rejected(self):
        empty = data.make_synthetic(10, 0, 8, seed=0)
        with pytest.raises(DataError):
            evaluation.clean_accuracy(rigged_constant_model(0), empty)

    def test_class_count_mismatch_rejected(self):
        ds = data.make_synthetic(4, 5, 8, seed=0)
        with pytest.raises(ValueError, match="classes"):
            evaluation.clean_accuracy(rigged_constant_model(0, num_classes=10), ds)


class TestRobustAccuracy:
    def test_zero_epsilon_equals_clean_exactly(self, toy_baseline, toy_data):
        _, test = toy_data
        clean = evaluation.clean_accuracy(toy_baseline, test)
        for kind in ("fgsm", "pgd", "cw"):
            cfg = AttackConfig(kind, 0.0, num_steps=2, random_start=kind == "pgd")
            assert evaluation.robust_accuracy(toy_baseline, test, cfg) == clean

    def test_attack_never_helps_without_random_start(self, toy_baseline, toy_data):
        # best-so-far includes the clean iterate, so accuracy cannot rise
        _, test = toy_data
        clean = evaluation.clean_accuracy(toy_baseline, test)
        cfg = AttackConfig("pgd", 0.03, num_steps=3, random_start=False)
        assert evaluation.robust_accuracy(toy_baseline, test, cfg) <= clean

    def test_monotone_in_epsilon(self, toy_baseline, toy_data):
        _, test = toy_data
        accs = []
        for eps in (0.03, 0.06):
            cfg = AttackConfig("pgd", eps, num_steps=5, random_start=True)
            accs.append(evaluation.robust_accuracy(toy_baseline, test, cfg, seed=7))
        assert accs[1] <= accs[0] + 0.02

    def test_unsupervised_objective_rejected(self, toy_baseline, toy_data):
        _, test = toy_data
        cfg = AttackConfig("pgd", 0.03, objective="contrastive")
        with pytest.raises(ValueError, match="supervised"):
            evaluation.robust_accuracy(toy_baseline, test, cfg)


class TestEvalTable:
    def attacks_3x2(self):
        out = []
        for kind in ("fgsm", "pgd", "cw"):
            for eps in (0.0, 0.03):
                out.append(AttackConfig(kind, eps, num_steps=2))
        return out

    def test_cell_counting(self, toy_baseline, toy_data):
        _, test = toy_data
        reports = evaluation.eval_table([("m", toy_baseline)], self.attacks_3x2(),
                                        test, seed=0)
        assert len(reports) == 1
        assert len(reports[0].cells) == 6
        assert all(c.sample_count == len(test) for c in reports[0].cells)
        assert 0.0 <= reports[0].clean_accuracy <= 1.0

    def test_json_round_trip_value_identical(self, toy_baseline, toy_data):
        _, test = toy_data
        rep = evaluation.eval_table([("m", toy_baseline)],
                                    [AttackConfig("fgsm", 0.03)], test, seed=1)[0]
        again = EvalReport.from_json(rep.to_json())
        assert again == rep

    def test_rerun_reproduces_modulo_timestamp(self, toy_baseline, toy_data):
        _, test = toy_data
        kwargs = dict(model_list=[("m", toy_baseline)],
                      attack_list=[AttackConfig("pgd", 0.03, num_steps=3,
                                                random_start=True)],
                      dataset=test, seed=9)
        a = evaluation.eval_table(**kwargs)[0].to_dict()
        b = evaluation.eval_table(**kwargs)[0].to_dict()
        a.pop("timestamp"), b.pop("timestamp")
        assert a == b

    def test_csv_rows_equal_cell_count(self, toy_baseline, toy_data):
        _, test = toy_data
        reports = evaluation.eval_table([("m", toy_baseline)], self.attacks_3x2(),
                                        test, seed=0)
        csv_text = evaluation.reports_to_csv(reports)
        lines = [ln for ln in csv_text.strip().splitlines() if ln]
        assert lines[0] == "model,attack,epsilon,accuracy"
        assert len(lines) - 1 == sum(len(r.cells) for r in reports)

    def test_trained_beats_untrained_on_every_cell(self, toy_data, toy_act,
                                                   random_model):
        _, test = toy_data
        _, probe = toy_act
        attack_list = [AttackConfig("fgsm", 0.03),
                       AttackConfig("pgd", 0.03, num_steps=5, random_start=True),
                       AttackConfig("cw", 0.03, num_steps=5)]
        reports = evaluation.eval_table([("act", probe),
                                         ("untrained", random_model)],
                                        attack_list, test, seed=3)
        act, untrained = reports
        for a_cell, u_cell in zip(act.cells, untrained.cells):
            assert a_cell.robust_accuracy >= u_cell.robust_accuracy

    def test_empty_inputs_rejected(self, toy_baseline, toy_data):
        _, test = toy_data
        with pytest.raises(ValueError):
            evaluation.eval_table([], [AttackConfig("fgsm", 0.03)], test)
        with pytest.raises(ValueError):
            evaluation.eval_table([("m", toy_baseline)], [], test)

    def test_render_mentions_every_cell(self, toy_baseline, toy_data):
        _, test = toy_data
        reports = evaluation.eval_table([("m", toy_baseline)],
                                        [AttackConfig("fgsm", 0.03)], test, seed=0)
        text = evaluation.render_reports(reports)
        assert "clean accuracy" in text and "fgsm" in text
