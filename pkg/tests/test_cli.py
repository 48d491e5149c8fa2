import json

import numpy as np
import pytest

from cli.commands import main
from cli.experiments import ExperimentConfig, compare_augmented_f1, run_toy_experiment
from core.diagnostics import DiagnosticReport
from core.errors import ConfigError
from core.nn import Mlp


def _write_config(path, **values):
    payload = {"n": 400, "lhtr": {"optim": {"epochs": 2}}, "permutations": 50}
    payload.update(values)
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


def _last_json(capsys) -> dict:
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


class TestGenerators:
    def test_gen_toy(self, tmp_path, capsys):
        assert main(["gen-toy", "--n", "50", "--out-dir", str(tmp_path), "--seed", "3"]) == 0
        result = _last_json(capsys)
        assert result["status"] == "ok" and result["n"] == 50
        lines = (tmp_path / "toy.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "d=2" and len(lines) == 51
        assert (tmp_path / "manifest.json").exists()

    def test_gen_dependent(self, tmp_path):
        assert main(["gen-dependent", "--n", "30", "--d", "3", "--out-dir", str(tmp_path)]) == 0
        assert (tmp_path / "dependent.csv").read_text(encoding="utf-8").startswith("d=3\n")

    def test_sample_logistic(self, tmp_path):
        assert main(["sample-logistic", "--n", "20", "--d", "3", "--delta", "0.5", "--out-dir", str(tmp_path)]) == 0
        lines = (tmp_path / "logistic.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "# d=3 delta=0.5"
        assert len(lines) == 21 and all(len(row.split(",")) == 3 for row in lines[1:])

    def test_bad_delta(self, tmp_path, capsys):
        assert main(["sample-logistic", "--delta", "1.5", "--out-dir", str(tmp_path)]) == 1
        error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert error["status"] == "error"
        assert (tmp_path / "error.json").exists()

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            assert main(["gen-toy", "--n", "40", "--seed", "9", "--out-dir", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "toy.csv").read_bytes() == (tmp_path / "b" / "toy.csv").read_bytes()


class TestPipeline:
    def test_missing_data_file(self, tmp_path, capsys):
        code = main(["train-lhtr", "--data", str(tmp_path / "missing.csv"), "--out-dir", str(tmp_path)])
        assert code == 1
        error = json.loads((tmp_path / "error.json").read_text(encoding="utf-8"))
        assert error["command"] == "train-lhtr" and error["error"] == "ParseError"
        assert "error" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path):
        cfg = _write_config(tmp_path / "cfg.json", learning_speed=3)
        assert main(["toy-experiment", "--config", cfg, "--out-dir", str(tmp_path)]) == 1

    def test_train_and_diagnose(self, tmp_path, capsys):
        cfg = _write_config(tmp_path / "cfg.json")
        out = str(tmp_path / "run")
        assert main(["gen-toy", "--n", "300", "--out-dir", out]) == 0
        data = str(tmp_path / "run" / "toy.csv")
        assert main(["train-lhtr", "--data", data, "--config", cfg, "--out-dir", out]) == 0
        trained = _last_json(capsys)
        assert trained["k"] == 75 and trained["rho1"] > 0

        model = str(tmp_path / "run" / "model.json")
        assert main(["diagnose-rv", "--data", data, "--model", model, "--config", cfg, "--out-dir", out]) == 0
        report = json.loads((tmp_path / "run" / "rv_report.json").read_text(encoding="utf-8"))
        assert report["scalars"]["rv_n_extremes"] == 75

        assert main(["tail-curve", "--data", data, "--model", model, "--lambdas", "1.0", "--out-dir", out]) == 0
        assert main(["barcode", "--data", data, "--model", model, "--lambdas", "1,2,3", "--out-dir", out]) == 0
        barcode = json.loads((tmp_path / "run" / "barcode.json").read_text(encoding="utf-8"))
        assert 0.0 <= barcode["scalars"]["barcode_constancy"] <= 1.0

    def test_training_is_reproducible(self, tmp_path):
        cfg = _write_config(tmp_path / "cfg.json")
        assert main(["gen-toy", "--n", "200", "--out-dir", str(tmp_path)]) == 0
        data = str(tmp_path / "toy.csv")
        for name in ("a", "b"):
            assert main(["train-lhtr", "--data", data, "--config", cfg, "--seed", "5", "--out-dir", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "model.json").read_bytes() == (tmp_path / "b" / "model.json").read_bytes()

    def test_sequence_pipeline(self, tmp_path, capsys):
        cfg = _write_config(tmp_path / "cfg.json", decoder_epochs=2)
        out = str(tmp_path)
        assert main(["gen-toy", "--n", "300", "--out-dir", out]) == 0
        data = str(tmp_path / "toy.csv")
        assert main(["train-lhtr", "--data", data, "--config", cfg, "--out-dir", out]) == 0
        model = str(tmp_path / "model.json")

        assert main(["gen-seqs", "--data", data, "--model", model, "--vocab", "8", "--t-max", "4", "--out-dir", out]) == 0
        assert _last_json(capsys)["n"] == 300
        seqs = str(tmp_path / "sequences.json")

        assert main(["train-decoder", "--model", model, "--data", seqs, "--config", cfg, "--out-dir", out]) == 0
        assert _last_json(capsys)["final_loss"] > 0
        decoder = str(tmp_path / "decoder.json")

        argv = ["augment", "--model", model, "--decoder", decoder, "--data", seqs, "--m", "3", "--out-dir", out]
        assert main(argv) == 0
        rows = _last_json(capsys)["rows"]
        lines = (tmp_path / "generated.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "source,lambda,tokens,preserved"
        assert len(lines) - 1 == rows and rows % 3 == 0 and rows >= 3 * 75

    def test_comparison(self, tmp_path):
        cfg = _write_config(tmp_path / "cfg.json", comparison_seeds=1)
        assert main(["compare", "--config", cfg, "--seed", "0", "--out-dir", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
        for name in ("nn", "lhtr1", "lhtr"):
            assert 0.0 <= report["scalars"][f"{name}_extreme_loss_median"] <= 1.0
            assert (tmp_path / "series" / f"tail_curve_{name}.csv").exists()
        assert report["meta"]["seeds"] == [0]

    def test_augment_experiment(self, tmp_path):
        cfg = _write_config(tmp_path / "cfg.json", decoder_epochs=2, m=3)
        assert main(["augment-experiment", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
        scalars = report["scalars"]
        assert 0.0 < scalars["dist1"] <= 1.0
        assert 0.0 <= scalars["label_preservation"] <= 1.0
        if "f1_raw" in scalars:
            assert scalars["erm_augmented_training_size"] == 4 * scalars["erm_raw_training_size"]
        for name in ("sequences.json", "decoder.json", "generated.csv"):
            assert (tmp_path / name).exists()

    @pytest.mark.slow
    @pytest.mark.parametrize("command", ["toy-experiment", "compare", "augment-experiment"])
    def test_experiment_reruns_are_identical(self, tmp_path, command):
        cfg = _write_config(tmp_path / "cfg.json", comparison_seeds=1, decoder_epochs=2, m=3)
        for name in ("a", "b"):
            assert main([command, "--config", cfg, "--seed", "4", "--out-dir", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
        csvs = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
        assert csvs
        for rel in csvs:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    @pytest.mark.slow
    def test_toy_experiment(self, tmp_path):
        cfg = _write_config(tmp_path / "cfg.json")
        assert main(["toy-experiment", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
        assert report["scalars"]["latent_extreme_k"] == 75
        for name in ("input_extremes.csv", "latent_extremes.csv", "model.json"):
            assert (tmp_path / name).exists()


class TestToyExperimentOutcome:
    @pytest.mark.slow
    def test_default_run_meets_tail_criteria(self, tmp_path):
        report = run_toy_experiment(ExperimentConfig(out_dir=str(tmp_path), seed=0, permutations=200))
        s = report.scalars
        # 隐空间极值的角度与半径无关，对照数据显著相关
        assert s["latent_rv_median_pvalue"] >= 0.1
        assert s["dependent_rv_median_pvalue"] <= 0.01
        # 隐空间选出的极值类别更平衡
        assert s["latent_extreme_minority"] > s["input_extreme_minority"]
        # 尺度不变性：C^ext ≥ 0.95 且严格优于原始输入上的基线
        assert s["cext_barcode_constancy"] >= 0.95
        assert s["cext_barcode_constancy"] > s["baseline_barcode_constancy"]
        assert s["tail_erm_barcode_constancy"] == 1.0


class TestAugmentedF1:
    def _extremes(self, n, seed):
        gen = np.random.default_rng(seed)
        r = gen.uniform(2.0, 5.0, n)
        angle = gen.uniform(0.0, np.pi / 2, n)
        Z = np.column_stack([np.cos(angle), np.sin(angle)]) * r[:, None]
        y = np.where(angle < np.pi / 6, 1, -1)
        return Z, y

    def test_reports_both_classes(self):
        encoder = Mlp([np.eye(2)], [np.zeros(2)], mode="regressor")
        Z, y = self._extremes(30, seed=0)
        Z_test, y_test = self._extremes(20, seed=1)
        report = DiagnosticReport()
        scores = compare_augmented_f1(report, encoder, Z, Z, y, Z_test, y_test, [1.5, 2.0], seed=2)

        assert set(scores) == {"raw", "augmented"}
        assert report.scalars["erm_raw_training_size"] == 30
        assert report.scalars["erm_augmented_training_size"] == 90
        minority = "positive" if np.sum(y > 0) <= np.sum(y < 0) else "negative"
        assert report.meta["f1_minority_class"] == minority
        for name in ("raw", "augmented"):
            assert report.scalars[f"f1_{name}"] == scores[name]["positive"]
            assert report.scalars[f"f1_{name}_negative"] == scores[name]["negative"]
            assert report.scalars[f"f1_{name}_minority"] == scores[name][minority]
            assert 0.0 <= report.scalars[f"f1_{name}_macro"] <= 1.0


class TestExperimentConfig:
    def test_rejects_unknown_keys(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"kappa": 0.2, "nonsense": 1})

    def test_rejects_bad_kappa(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(kappa=1.0)

    def test_toy_defaults_merge_with_overrides(self):
        assert ExperimentConfig().lhtr == {"rho3": 0.5, "optim": {"learning_rate": 1e-2}}
        cfg = ExperimentConfig(lhtr={"optim": {"epochs": 3}})
        lhtr = cfg.lhtr_config(2)
        assert (lhtr.optim.learning_rate, lhtr.optim.epochs, lhtr.rho3) == (1e-2, 3, 0.5)
        assert ExperimentConfig.from_dict(cfg.to_dict()).lhtr == cfg.lhtr

    def test_other_presets_have_no_defaults(self):
        lhtr = ExperimentConfig(preset="small").lhtr_config(768)
        assert lhtr.optim.learning_rate == 5e-4 and lhtr.rho3 == 1e-3

    def test_optim_override(self):
        cfg = ExperimentConfig(lhtr={"optim": {"epochs": 7}, "rho3": 0.0})
        lhtr = cfg.lhtr_config(3)
        assert lhtr.optim.epochs == 7 and lhtr.rho3 == 0.0
        assert lhtr.encoder_sizes[0] == 3
