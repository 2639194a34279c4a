"""Tests for configs, training runs, the ablation grid, and reporting."""

import csv
import dataclasses
import json

import numpy as np
import pytest

from sparsepool.data import generate, save_dataset
from sparsepool.errors import ConfigurationError, NonFiniteError, TrainingDivergedError
from sparsepool.harness import (
    DataConfig,
    ExperimentResult,
    ModelConfig,
    PoolConfig,
    RunConfig,
    TrainConfig,
    ablation_table,
    epochs_to_fraction,
    fingerprint,
    from_ini,
    load_config,
    prepare_data,
    render_report,
    run_ablation,
    run_convergence,
    run_training,
    synth_spec_from_config,
    thread_count,
    to_ini,
)


def tiny_config(**train_overrides):
    train = dict(epochs=2, batch_size=8, learning_rate=0.05, seed=0)
    train.update(train_overrides)
    return RunConfig(
        data=DataConfig(classes=3, train_per_class=6, test_per_class=3,
                        image_size=16, blob_size=4, texture_scale=4,
                        distractor_count_max=0, decoy_count_max=0,
                        distractor_count_min=0, decoy_count_min=0, seed=5),
        model=ModelConfig(kind="multires", global_size=8, crop_size=8,
                          widths=(2, 3)),
        pool=PoolConfig(mode="dynamic"),
        train=TrainConfig(**train),
    )


class TestConfigSerialization:
    def test_default_round_trip(self):
        config = RunConfig()
        assert from_ini(to_ini(config)) == config

    def test_modified_round_trip(self):
        config = tiny_config()
        text = to_ini(config)
        assert from_ini(text) == config

    def test_random_configs_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            config = RunConfig(
                data=DataConfig(classes=int(rng.integers(2, 20)),
                                image_size=int(rng.integers(16, 128)),
                                blob_visibility=float(rng.uniform(0, 1)),
                                seed=int(rng.integers(0, 1000))),
                model=ModelConfig(kind=str(rng.choice(["global", "local", "multires"])),
                                  widths=tuple(int(v) for v in rng.integers(2, 64, 3))),
                pool=PoolConfig(mode=str(rng.choice(["avg", "max", "outlier", "dynamic"])),
                                lam=float(rng.uniform(0, 4))),
                train=TrainConfig(epochs=int(rng.integers(1, 40)),
                                  learning_rate=float(rng.uniform(1e-4, 1.0)),
                                  seed=int(rng.integers(0, 1000))),
            )
            assert from_ini(to_ini(config)) == config

    def test_lambda_key_spelling(self):
        text = to_ini(RunConfig())
        assert "lambda = 2.0" in text
        assert "lam =" not in text

    def test_missing_keys_fall_back_to_defaults(self):
        config = from_ini("[train]\nepochs = 7\n")
        assert config.train.epochs == 7
        assert config.train.batch_size == TrainConfig().batch_size
        assert config.data == DataConfig()

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigurationError, match="optimizer"):
            from_ini("[optimizer]\nlr = 1\n")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigurationError, match="warmup"):
            from_ini("[train]\nwarmup = 3\n")

    def test_unparseable_value_rejected(self):
        with pytest.raises(ConfigurationError, match="epochs"):
            from_ini("[train]\nepochs = soon\n")

    def test_load_config_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "absent.ini")

    def test_fingerprint_ignores_train_seed(self):
        config = tiny_config()
        assert fingerprint(config) == fingerprint(config.with_seed(1234))

    def test_fingerprint_distinguishes_cells(self):
        config = tiny_config()
        prints = {
            fingerprint(config.with_cell(kind, mode))
            for kind in ("global", "local", "multires")
            for mode in ("avg", "max", "dynamic")
        }
        assert len(prints) == 9

    def test_fingerprint_changes_with_data_seed(self):
        config = tiny_config()
        moved = dataclasses.replace(
            config, data=dataclasses.replace(config.data, seed=99))
        assert fingerprint(config) != fingerprint(moved)


class TestThreadCount:
    def test_default_is_serial(self, monkeypatch):
        monkeypatch.delenv("SPARSEPOOL_THREADS", raising=False)
        assert thread_count() == 1

    def test_env_override(self, monkeypatch):
        monkeypatch.setenv("SPARSEPOOL_THREADS", "4")
        assert thread_count() == 4

    def test_malformed_env_rejected(self, monkeypatch):
        monkeypatch.setenv("SPARSEPOOL_THREADS", "many")
        with pytest.raises(ConfigurationError, match="SPARSEPOOL_THREADS"):
            thread_count()


class TestExperimentResult:
    def _result_dict(self):
        result, _ = run_training(tiny_config())
        return result.to_json_dict()

    def test_json_round_trip(self):
        payload = self._result_dict()
        twin = ExperimentResult.from_json_dict(json.loads(json.dumps(payload)))
        assert twin.to_json_dict() == payload

    def test_missing_field_rejected(self):
        payload = self._result_dict()
        payload.pop("test_accuracy")
        with pytest.raises(ValueError, match="test_accuracy"):
            ExperimentResult.from_json_dict(payload)

    def test_curve_length_mismatch_rejected(self):
        payload = self._result_dict()
        payload["train_loss"] = payload["train_loss"][:-1]
        with pytest.raises(ValueError, match="epoch"):
            ExperimentResult.from_json_dict(payload)

    def test_out_of_range_accuracy_rejected(self):
        payload = self._result_dict()
        payload["test_accuracy"] = 1.5
        with pytest.raises(ValueError, match="accuracy"):
            ExperimentResult.from_json_dict(payload)


class TestRunTraining:
    def test_result_invariants(self):
        config = tiny_config()
        result, params = run_training(config)
        assert result.epochs == config.train.epochs
        assert len(result.train_loss) == config.train.epochs
        assert len(result.train_accuracy) == config.train.epochs
        assert len(result.fallback_rate) == config.train.epochs
        assert 0.0 <= result.test_accuracy <= 1.0
        assert set(result.per_class_accuracy) == {"class00", "class01", "class02"}
        assert result.fingerprint == fingerprint(config)
        assert params

    def test_bitwise_determinism(self):
        a, _ = run_training(tiny_config())
        b, _ = run_training(tiny_config())
        da, db = a.to_json_dict(), b.to_json_dict()
        da.pop("wall_clock_seconds")
        db.pop("wall_clock_seconds")
        assert da == db

    def test_average_pooling_never_falls_back(self):
        config = dataclasses.replace(
            tiny_config(), pool=PoolConfig(mode="avg"))
        result, _ = run_training(config)
        assert result.fallback_rate == [0.0] * config.train.epochs

    def test_invalid_epochs_rejected(self):
        with pytest.raises(ConfigurationError, match="epochs"):
            run_training(tiny_config(epochs=0))

    def test_invalid_source_rejected(self):
        config = tiny_config()
        config = dataclasses.replace(
            config, data=dataclasses.replace(config.data, source="tape"))
        with pytest.raises(ConfigurationError, match="source"):
            run_training(config)

    def test_folder_source_matches_synth(self, tmp_path):
        config = tiny_config()
        dataset = generate(synth_spec_from_config(config.data))
        save_dataset(dataset, tmp_path)
        folder_config = dataclasses.replace(
            config,
            data=dataclasses.replace(config.data, source="folder",
                                     folder=str(tmp_path)),
        )
        synth_result, _ = run_training(config)
        folder_result, _ = run_training(folder_config)
        assert folder_result.train_loss == synth_result.train_loss
        assert folder_result.test_accuracy == synth_result.test_accuracy

    def test_injected_nan_gradient_aborts(self, monkeypatch):
        import sparsepool.estimator as est

        real_backward = est.model_backward
        calls = {"n": 0}

        def poisoned(grad_logits, ctx):
            grads = real_backward(grad_logits, ctx)
            calls["n"] += 1
            if calls["n"] == 2:
                key = sorted(grads)[0]
                grads[key] = grads[key].copy()
                grads[key].flat[0] = np.nan
            return grads

        monkeypatch.setattr(est, "model_backward", poisoned)
        with pytest.raises(TrainingDivergedError) as err:
            run_training(tiny_config())
        diag = err.value.diagnostic()
        assert diag["epoch"] == 0
        assert diag["batch"] == 1
        assert diag["where"]


class TestAblation:
    def test_grid_shape_and_artifacts(self, tmp_path):
        config = tiny_config()
        grid = run_ablation(config, tmp_path, seeds=1)
        assert len(grid) == 9
        prints = set()
        for outcomes in grid.values():
            assert len(outcomes) == 1
            assert isinstance(outcomes[0], ExperimentResult)
            prints.add(outcomes[0].fingerprint)
        assert len(prints) == 9

        table = (tmp_path / "ablation.md").read_text()
        lines = table.strip().split("\n")
        assert lines[0] == "| Architecture | Average | Max | Dynamic Outlier |"
        assert len(lines) == 5
        assert sum(line.count("%") for line in lines[2:]) == 9

        with open(tmp_path / "ablation.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["architecture", "pooling", "seed", "test_accuracy",
                           "fingerprint", "status"]
        assert len(rows) == 10
        assert len(list((tmp_path / "runs").glob("*.json"))) == 9

    def test_cell_failure_continues(self, tmp_path):
        config = tiny_config()
        config = dataclasses.replace(
            config,
            model=dataclasses.replace(config.model, global_size=8, crop_size=32),
        )
        grid = run_ablation(config, tmp_path, seeds=1)
        for mode in ("avg", "max", "dynamic"):
            assert isinstance(grid[("local", mode)][0], str)
            assert "DataError" in grid[("local", mode)][0]
            assert isinstance(grid[("global", mode)][0], ExperimentResult)
        table = (tmp_path / "ablation.md").read_text()
        assert "failed" in table

    def test_threaded_grid_matches_serial(self, tmp_path, monkeypatch):
        config = tiny_config(epochs=1)
        serial = run_ablation(config, tmp_path / "serial", seeds=1)
        monkeypatch.setenv("SPARSEPOOL_THREADS", "3")
        threaded = run_ablation(config, tmp_path / "threaded", seeds=1)
        for key in serial:
            assert serial[key][0].test_accuracy == threaded[key][0].test_accuracy
            assert serial[key][0].train_loss == threaded[key][0].train_loss


class TestConvergence:
    def test_outputs(self, tmp_path):
        config = tiny_config()
        results, stats = run_convergence(config, tmp_path, seeds=2)
        assert sorted(results) == ["dynamic", "outlier"]
        assert len(results["dynamic"]) == 2
        assert len(stats["dynamic"]) == 2
        with open(tmp_path / "convergence.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == config.train.epochs + 2
        assert rows[0][0] == "epoch"
        assert rows[-1][0] == "epochs_to_90pct"
        assert (tmp_path / "convergence.svg").exists()
        svg = (tmp_path / "convergence.svg").read_text()
        assert svg.lstrip().startswith("<?xml")
        assert len(list((tmp_path / "runs").glob("*.json"))) == 4

    def test_epochs_to_fraction(self):
        assert epochs_to_fraction([0.1, 0.5, 0.9, 1.0]) == 3
        assert epochs_to_fraction([1.0, 1.0]) == 1
        assert epochs_to_fraction([0.2, 0.3, 1.0]) == 3


class TestReport:
    def test_empty_dir(self, tmp_path):
        text, warnings = render_report(tmp_path)
        assert "0 result file(s)" in text
        assert warnings == []

    def test_malformed_file_skipped_with_warning(self, tmp_path):
        (tmp_path / "junk.json").write_text("{not json")
        result, _ = run_training(tiny_config())
        (tmp_path / "good.json").write_text(json.dumps(result.to_json_dict()))
        text, warnings = render_report(tmp_path)
        assert len(warnings) == 1
        assert "junk.json" in warnings[0]
        assert "multires-dynamic" in text

    def test_fingerprint_mismatch_warning(self, tmp_path):
        result, _ = run_training(tiny_config())
        payload = result.to_json_dict()
        (tmp_path / "a.json").write_text(json.dumps(payload))
        crooked = dict(payload, fingerprint="f" * 64, seed=1)
        (tmp_path / "b.json").write_text(json.dumps(crooked))
        _, warnings = render_report(tmp_path)
        assert any("fingerprint mismatch" in w for w in warnings)

    def test_grid_report_has_table(self, tmp_path):
        run_ablation(tiny_config(epochs=1), tmp_path, seeds=1)
        text, warnings = render_report(tmp_path / "runs")
        assert warnings == []
        assert "## Ablation grid" in text
        assert "| Architecture | Average | Max | Dynamic Outlier |" in text
        assert "## Per-class test accuracy" in text
        assert "## Outlier-pooling fallback rate by epoch" in text

    def test_table_marks_failed_cells(self):
        grid = {(k, m): [] for k in ("global", "local", "multires")
                for m in ("avg", "max", "dynamic")}
        for key in grid:
            grid[key] = ["DataError: boom"]
        table = ablation_table(grid)
        assert table.count("failed (1)") == 9


class TestUntrainedChance:
    def test_untrained_accuracy_near_chance(self):
        from sparsepool.estimator import predict_logits
        from sparsepool.harness import _LoaderCache, build_model_spec
        from sparsepool.model import init_params

        config = RunConfig(
            data=DataConfig(classes=10, train_per_class=2, test_per_class=20,
                            image_size=32, blob_size=6, texture_scale=4,
                            distractor_size=3, decoy_size=3, seed=2),
            model=ModelConfig(kind="multires", global_size=8, crop_size=8,
                              widths=(2, 3)),
            pool=PoolConfig(mode="avg"),
        )
        prepared = prepare_data(config)
        spec = build_model_spec(config, len(prepared.classes))
        _, test_loader = _LoaderCache(prepared).get(spec)
        accs = []
        for seed in range(5):
            params = init_params(spec, seed)
            logits = predict_logits(spec, params, test_loader, 64, None)
            preds = np.argmax(logits, axis=1)
            accs.append(float(np.mean(preds == prepared.test_labels)))
        assert 0.05 <= float(np.mean(accs)) <= 0.15
