"""Experiment configs, orchestration outputs, and the command line."""

import json
import warnings

import numpy as np
import pytest

from distilforge import cli
from distilforge import verification
from distilforge.experiments import (
    ABLATION_CSV_HEADER,
    ConfigError,
    build_datasets,
    load_experiment_config,
    run_ablation,
    run_experiment,
)
from distilforge.trainer import CSV_HEADER
from distilforge.verification import VerificationFailure


def base_config_dict(**overrides):
    doc = {
        "dataset": {
            "kind": "blobs",
            "num_classes": 3,
            "per_class": 6,
            "test_per_class": 4,
            "dim": 2,
            "spread": 0.5,
            "seed": 7,
        },
        "network1": {"input_dim": 2, "hidden_dims": [8, 4], "num_classes": 3, "init_seed": 1},
        "network2": {"input_dim": 2, "hidden_dims": [8, 4], "num_classes": 3, "init_seed": 2},
        "train": {
            "stage1_epochs": 1,
            "stage2_epochs": 2,
            "batch_size": 16,
            "lr": 0.05,
            "lr_milestones": [],
            "seed": 0,
        },
        "seed_repetitions": 1,
    }
    doc.update(overrides)
    return doc


def write_config(tmp_path, name="config.json", **overrides):
    path = tmp_path / name
    path.write_text(json.dumps(base_config_dict(**overrides)))
    return path


class TestLoadConfig:
    def test_valid_config(self, tmp_path):
        config = load_experiment_config(write_config(tmp_path))
        assert config.network1.hidden_dims == (8, 4)
        assert config.train.stage2_epochs == 2
        assert config.train.lr_milestones == ()
        assert config.seed_repetitions == 1
        assert config.output_dir is None

    def test_weights_section(self, tmp_path):
        doc = base_config_dict()
        doc["train"]["weights"] = {"alpha": 0.5, "gamma": 0.0}
        path = tmp_path / "c.json"
        path.write_text(json.dumps(doc))
        config = load_experiment_config(path)
        assert config.train.weights.alpha == 0.5
        assert config.train.weights.gamma == 0.0
        assert config.train.weights.beta == 0.4

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_experiment_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="valid JSON"):
            load_experiment_config(path)

    @pytest.mark.parametrize(
        "mutate, message",
        [
            (lambda d: d.update(extra=1), "config: unknown field 'extra'"),
            (lambda d: d["network1"].update(depth=3), "network1: unknown field 'depth'"),
            (lambda d: d["train"].update(optimizer="adam"), "train: unknown field"),
            (lambda d: d["train"].update(weights={"delta": 1.0}), "train.weights: unknown"),
            (lambda d: d.pop("network2"), "network2: required section is missing"),
            (lambda d: d["network1"].pop("input_dim"), "network1.input_dim: required"),
            (lambda d: d["network1"].update(input_dim=0), "network1: input_dim"),
            (lambda d: d["train"].update(lr=0.0), "train: lr must be positive"),
            (lambda d: d["train"].update(weights={"alpha": -1.0}), "train.weights:"),
            (lambda d: d["train"].update(lr_milestones=5), "lr_milestones"),
            (lambda d: d.update(seed_repetitions=0), "seed_repetitions"),
            (lambda d: d.update(output_dir=7), "output_dir"),
            (lambda d: d["dataset"].update(kind="parquet"), "dataset.kind"),
            (lambda d: d.update(dataset="blobs"), "dataset: must be a JSON object"),
        ],
    )
    def test_rejects_bad_configs(self, tmp_path, mutate, message):
        doc = base_config_dict()
        mutate(doc)
        path = tmp_path / "c.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ConfigError, match=message):
            load_experiment_config(path)


class TestBuildDatasets:
    def test_blobs(self):
        spec = base_config_dict()["dataset"]
        train, test = build_datasets(spec)
        assert len(train) == 18 and len(test) == 12
        assert train.num_classes == test.num_classes == 3
        np.testing.assert_allclose(train.features.data.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(train.features.data.std(axis=0), 1.0, atol=1e-12)

    def test_blobs_test_split_differs_from_train(self):
        spec = base_config_dict()["dataset"]
        spec["test_per_class"] = spec["per_class"]
        train, test = build_datasets(spec)
        assert not np.array_equal(train.features.data, test.features.data)

    def test_blobs_defaults(self):
        spec = {"kind": "blobs", "num_classes": 2, "per_class": 4, "dim": 2, "seed": 0}
        train, test = build_datasets(spec)
        assert len(train) == 8 and len(test) == 8

    def test_csv_kind(self, tmp_path):
        train_path = tmp_path / "train.csv"
        test_path = tmp_path / "test.csv"
        train_path.write_text("f0,f1,y\n0.0,1.0,0\n1.0,0.0,1\n2.0,2.0,2\n")
        test_path.write_text("f0,f1,y\n0.5,0.5,1\n")
        train, test = build_datasets(
            {"kind": "csv", "train": str(train_path), "test": str(test_path)}
        )
        assert len(train) == 3 and len(test) == 1
        # Class count is shared across splits.
        assert train.num_classes == test.num_classes == 3

    def test_csv_missing_path(self):
        with pytest.raises(ConfigError, match="dataset.test"):
            build_datasets({"kind": "csv", "train": "x.csv"})

    def test_idx_kind(self, tmp_path):
        from test_data import write_idx

        rng = np.random.default_rng(0)
        ipath, lpath = write_idx(
            tmp_path, rng.integers(0, 256, (6, 2, 2), dtype=np.uint8),
            np.array([0, 1, 2, 0, 1, 2], dtype=np.uint8),
        )
        tipath, tlpath = write_idx(
            tmp_path, rng.integers(0, 256, (2, 2, 2), dtype=np.uint8),
            np.array([0, 1], dtype=np.uint8), prefix="t_",
        )
        train, test = build_datasets(
            {
                "kind": "idx",
                "train_images": str(ipath), "train_labels": str(lpath),
                "test_images": str(tipath), "test_labels": str(tlpath),
            }
        )
        assert train.features.shape == (6, 4)
        assert train.num_classes == test.num_classes == 3

    def test_load_errors_become_config_errors(self, tmp_path):
        missing = tmp_path / "missing.csv"
        with pytest.raises(ConfigError, match="dataset:"):
            build_datasets({"kind": "csv", "train": str(missing), "test": str(missing)})


class TestRunExperiment:
    def test_outputs_and_summary(self, tmp_path):
        config = load_experiment_config(write_config(tmp_path, seed_repetitions=2))
        out = tmp_path / "out"
        summary = run_experiment(config, out_dir=out)
        for rep in (0, 1):
            rep_dir = out / f"rep{rep}"
            assert (rep_dir / "metrics.csv").exists()
            for name in ("net1_stage1", "net1_stage2", "net2_stage1", "net2_stage2"):
                assert (rep_dir / f"{name}.json").exists()
        written = json.loads((out / "summary.json").read_text())
        assert written == summary
        assert len(summary["final_test_top1"]["net1"]) == 2
        values = summary["final_test_top1"]["net2"]
        assert summary["mean_test_top1"]["net2"] == pytest.approx(np.mean(values))
        assert summary["stddev_test_top1"]["net2"] == pytest.approx(np.std(values, ddof=0))

    def test_metrics_csv_shape(self, tmp_path):
        config = load_experiment_config(write_config(tmp_path))
        out = tmp_path / "out"
        run_experiment(config, out_dir=out)
        lines = (out / "rep0" / "metrics.csv").read_text().splitlines()
        assert lines[0] == CSV_HEADER
        # (1 stage-1 epoch + 2 stage-2 epochs) x 2 nets.
        assert len(lines) == 1 + 6

    def test_repetitions_differ(self, tmp_path):
        config = load_experiment_config(write_config(tmp_path, seed_repetitions=2))
        out = tmp_path / "out"
        run_experiment(config, out_dir=out)
        a = (out / "rep0" / "metrics.csv").read_text()
        b = (out / "rep1" / "metrics.csv").read_text()
        assert a != b

    def test_repeat_run_is_byte_identical(self, tmp_path):
        config = load_experiment_config(write_config(tmp_path))
        first = tmp_path / "first"
        second = tmp_path / "second"
        run_experiment(config, out_dir=first)
        run_experiment(config, out_dir=second)
        assert (first / "rep0" / "metrics.csv").read_bytes() == (
            second / "rep0" / "metrics.csv"
        ).read_bytes()
        assert (first / "summary.json").read_bytes() == (second / "summary.json").read_bytes()

    def test_overwrite_guard(self, tmp_path):
        config = load_experiment_config(write_config(tmp_path))
        out = tmp_path / "out"
        run_experiment(config, out_dir=out)
        with pytest.raises(ConfigError, match="overwrite"):
            run_experiment(config, out_dir=out)
        run_experiment(config, out_dir=out, overwrite=True)

    def test_output_dir_required(self, tmp_path):
        config = load_experiment_config(write_config(tmp_path))
        with pytest.raises(ConfigError, match="output_dir: missing"):
            run_experiment(config)

    def test_incompatible_network_rejected(self, tmp_path):
        doc = base_config_dict()
        doc["network1"]["input_dim"] = 5
        path = tmp_path / "c.json"
        path.write_text(json.dumps(doc))
        config = load_experiment_config(path)
        with pytest.raises(ConfigError, match="network1.input_dim"):
            run_experiment(config, out_dir=tmp_path / "out")

    def test_class_count_mismatch_rejected(self, tmp_path):
        doc = base_config_dict()
        doc["network2"]["num_classes"] = 4
        path = tmp_path / "c.json"
        path.write_text(json.dumps(doc))
        config = load_experiment_config(path)
        with pytest.raises(ConfigError, match="network2.num_classes"):
            run_experiment(config, out_dir=tmp_path / "out")


class TestRunAblation:
    def test_outputs_and_report(self, tmp_path):
        config = load_experiment_config(write_config(tmp_path))
        out = tmp_path / "ablate"
        report = run_ablation(config, out_dir=out)
        for variant in "ABCD":
            assert (out / f"variant_{variant}" / "summary.json").exists()
        lines = (out / "ablation.csv").read_text().splitlines()
        assert lines[0] == ABLATION_CSV_HEADER
        assert len(lines) == 9
        assert [line.split(",")[0] for line in lines[1:]] == [
            "A", "A", "B", "B", "C", "C", "D", "D"
        ]
        assert set(report["mean_test_top1"]) == {"A", "B", "C", "D"}
        assert set(report["drop_vs_full"]) == {"B", "C", "D"}
        assert report["status"] in ("pass", "warn")
        written = json.loads((out / "ablation_report.json").read_text())
        assert written == report

    def test_overwrite_guard(self, tmp_path):
        config = load_experiment_config(write_config(tmp_path))
        out = tmp_path / "ablate"
        run_ablation(config, out_dir=out)
        with pytest.raises(ConfigError, match="overwrite"):
            run_ablation(config, out_dir=out)
        run_ablation(config, out_dir=out, overwrite=True)


class TestCli:
    def test_run_success(self, tmp_path, capsys):
        path = write_config(tmp_path)
        out = tmp_path / "out"
        assert cli.main(["run", str(path), "--out", str(out)]) == 0
        captured = capsys.readouterr()
        assert "net1: mean test top-1" in captured.out
        assert "net2: mean test top-1" in captured.out
        assert (out / "summary.json").exists()

    def test_run_twice_matches_byte_for_byte(self, tmp_path):
        path = write_config(tmp_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["run", str(path), "--out", str(out_a)]) == 0
        assert cli.main(["run", str(path), "--out", str(out_b)]) == 0
        assert (out_a / "rep0" / "metrics.csv").read_bytes() == (
            out_b / "rep0" / "metrics.csv"
        ).read_bytes()

    def test_config_errors_exit_1(self, tmp_path, capsys):
        missing = tmp_path / "missing.json"
        assert cli.main(["run", str(missing)]) == 1
        assert "error: config:" in capsys.readouterr().err

        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(base_config_dict(seed_repetitions=0)))
        assert cli.main(["run", str(bad), "--out", str(tmp_path / "o")]) == 1
        assert "seed_repetitions" in capsys.readouterr().err

    def test_overwrite_flag(self, tmp_path, capsys):
        path = write_config(tmp_path)
        out = tmp_path / "out"
        assert cli.main(["run", str(path), "--out", str(out)]) == 0
        assert cli.main(["run", str(path), "--out", str(out)]) == 1
        assert "--overwrite" in capsys.readouterr().err
        assert cli.main(["run", str(path), "--out", str(out), "--overwrite"]) == 0

    def test_divergence_exits_2(self, tmp_path, capsys):
        doc = base_config_dict()
        doc["train"]["lr"] = 1e25
        doc["train"]["stage2_epochs"] = 3
        path = tmp_path / "c.json"
        path.write_text(json.dumps(doc))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            code = cli.main(["run", str(path), "--out", str(tmp_path / "out")])
        assert code == 2
        assert "error: divergence:" in capsys.readouterr().err

    def test_ablate_command(self, tmp_path, capsys):
        path = write_config(tmp_path)
        out = tmp_path / "ablate"
        assert cli.main(["ablate", str(path), "--out", str(out)]) == 0
        captured = capsys.readouterr().out
        assert "variant" in captured
        assert "status:" in captured
        assert (out / "ablation.csv").exists()

    def test_seed_env_override(self, tmp_path, monkeypatch):
        path = write_config(tmp_path)
        out_plain = tmp_path / "plain"
        assert cli.main(["run", str(path), "--out", str(out_plain)]) == 0

        monkeypatch.setenv(cli.SEED_ENV_VAR, "5")
        out_env = tmp_path / "env"
        assert cli.main(["run", str(path), "--out", str(out_env)]) == 0
        monkeypatch.delenv(cli.SEED_ENV_VAR)

        explicit = base_config_dict()
        explicit["train"]["seed"] = 5
        epath = tmp_path / "explicit.json"
        epath.write_text(json.dumps(explicit))
        out_explicit = tmp_path / "explicit"
        assert cli.main(["run", str(epath), "--out", str(out_explicit)]) == 0

        env_csv = (out_env / "rep0" / "metrics.csv").read_bytes()
        assert env_csv == (out_explicit / "rep0" / "metrics.csv").read_bytes()
        assert env_csv != (out_plain / "rep0" / "metrics.csv").read_bytes()

    @pytest.mark.parametrize("value", ["abc", "-3"])
    def test_bad_seed_env_exits_1(self, tmp_path, monkeypatch, capsys, value):
        path = write_config(tmp_path)
        monkeypatch.setenv(cli.SEED_ENV_VAR, value)
        assert cli.main(["run", str(path), "--out", str(tmp_path / "out")]) == 1
        assert "DISTILFORGE_SEED" in capsys.readouterr().err

    def test_verify_pass_path(self, monkeypatch, capsys):
        monkeypatch.setattr(verification, "CHECKS", [("stub_ok", lambda: None)])
        assert cli.main(["verify"]) == 0
        out = capsys.readouterr().out
        assert "stub_ok" in out and "pass" in out

    def test_verify_failure_exits_3(self, monkeypatch, capsys):
        def failing():
            raise VerificationFailure("synthetic failure")

        monkeypatch.setattr(
            verification, "CHECKS", [("good", lambda: None), ("broken", failing)]
        )
        assert cli.main(["verify"]) == 3
        captured = capsys.readouterr()
        assert "broken" in captured.out and "FAIL" in captured.out
        assert "first failing property: broken" in captured.err
