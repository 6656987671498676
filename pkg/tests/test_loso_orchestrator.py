"""Tests for leave-one-subject-out folds, aggregation and stored run artifacts."""

from pathlib import Path

import numpy as np
import pytest

from rsm_codg.config_manager import ConfigurationManager
from rsm_codg.data_storage import load_config_echo, load_fold_reports, read_training_log
from rsm_codg.dataio import synthesize
from rsm_codg.loso_orchestrator import (LosoOrchestrator, aggregate_reports, load_fold_network, loso_run,
                                        prepare_fold)
from rsm_codg.models import FoldReport

DESK_PROFILE = Path(__file__).resolve().parent.parent / "config" / "desk_scale.cfg"

TINY_OVERRIDES = {
    "model.hidden": 8,
    "model.heads": 2,
    "model.embed_dim": 4,
    "model.classifier_hidden": 6,
    "model.dropout": 0.0,
    "model.precision": 64,
    "training.epochs": 2,
    "training.batch_size": 4,
    "training.val_fraction": 0.25,
    "training.noise_std": 0.0,
    "training.lr": 1e-3,
}


def tiny_manager(directory, **extra):
    manager = ConfigurationManager()
    manager.override_config({**TINY_OVERRIDES, "output.directory": str(directory), **extra})
    return manager


def report(subject, accuracy):
    return FoldReport(held_out_subject=subject, accuracy=accuracy, macro_f1=accuracy, sensitivity=accuracy,
                      specificity=accuracy, confusion=[[1]], config_hash="abc", epochs_run=1)


class TestPrepareFold:
    def test_normalises_with_source_statistics(self, small_dataset, tiny_config):
        fold = prepare_fold(small_dataset, 1, tiny_config)
        assert set(fold.test.subjects.tolist()) == {1}
        assert 1 not in fold.train.subject_ids and 1 not in fold.val.subject_ids
        flat = fold.train.samples.reshape(-1, fold.train.feature_dim)
        assert np.allclose(flat.min(axis=0), 0.0)
        assert np.allclose(flat.max(axis=0), 1.0)
        assert len(fold.train) + len(fold.val) + len(fold.test) == len(small_dataset)

    def test_unknown_subject(self, small_dataset, tiny_config):
        with pytest.raises(ValueError, match="no windows"):
            prepare_fold(small_dataset, 9, tiny_config)


class TestAggregate:
    def test_mean_and_population_std(self, tiny_config):
        aggregate = aggregate_reports([report(1, 90.0), report(0, 80.0)], tiny_config, "abc", window=4)
        assert aggregate["accuracy"] == {"mean": 85.0, "std": 5.0}
        assert aggregate["n_folds"] == 2
        assert aggregate["std_kind"] == "population"
        assert [fold["held_out_subject"] for fold in aggregate["folds"]] == [0, 1]
        assert aggregate["d_k"] == tiny_config.head_dim
        assert aggregate["hyperparameters"]["lambda_mmd"] == tiny_config.lambda_mmd


class TestLosoRun:
    def test_each_subject_held_out_once(self, small_dataset, tiny_config):
        result = loso_run(small_dataset, tiny_config, "hash", dtype=np.float64)
        assert [r.held_out_subject for r in result.reports] == [0, 1, 2]
        for fold_report in result.reports:
            assert fold_report.n_test == 12
            assert np.sum(fold_report.confusion) == 12
            assert 0.0 <= fold_report.accuracy <= 100.0
            assert fold_report.audit_passed
        assert result.aggregate["n_folds"] == 3

    def test_needs_three_subjects(self, small_dataset, tiny_config):
        two = small_dataset.select(small_dataset.subjects < 2)
        with pytest.raises(ValueError, match="at least 3"):
            loso_run(two, tiny_config)


class TestLosoOrchestrator:
    def test_run_writes_artifacts(self, small_dataset, tmp_path):
        orchestrator = LosoOrchestrator(tiny_manager(tmp_path))
        result = orchestrator.run(small_dataset)

        echo = load_config_echo(tmp_path)
        assert echo["config_hash"] == orchestrator.config_hash
        assert echo["derived"]["d_k"] == 4
        assert echo["derived"]["subjects"] == [0, 1, 2]
        assert (tmp_path / "aggregate.json").exists()
        for subject in (0, 1, 2):
            fold_directory = tmp_path / f"fold_{subject}"
            assert (fold_directory / "confusion.csv").exists()
            assert (fold_directory / "checkpoint" / "manifest.json").exists()
            records = read_training_log(fold_directory / "train_log.jsonl")
            assert records and all(r["fold"] == subject for r in records)
            fold_log = (fold_directory / "fold.log").read_text(encoding="utf-8")
            assert f"fold {subject} - rsm_codg.trainer - INFO - Fold {subject}: training" in fold_log
        stored = load_fold_reports(tmp_path)
        assert [r.accuracy for r in stored] == [r.accuracy for r in result.reports]

    def test_checkpoint_reproduces_predictions(self, small_dataset, tmp_path):
        manager = tiny_manager(tmp_path)
        orchestrator = LosoOrchestrator(manager)
        fold_report = orchestrator.run_single(small_dataset, 2)
        network, fold = load_fold_network(tmp_path / "fold_2" / "checkpoint", small_dataset, 2,
                                          orchestrator.config, dtype=np.float64)
        predictions = network.predict(fold.test.samples)
        assert float(np.mean(predictions == fold.test.labels)) * 100.0 == pytest.approx(fold_report.accuracy)

    def test_missing_checkpoint(self, small_dataset, tiny_config, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_fold_network(tmp_path / "nowhere", small_dataset, 0, tiny_config)

    def test_unknown_test_subject(self, small_dataset, tmp_path):
        with pytest.raises(ValueError, match="not in dataset"):
            LosoOrchestrator(tiny_manager(tmp_path)).run_single(small_dataset, 7)

    def test_aggregate_bytes_repeat(self, small_dataset, tmp_path):
        for name in ("first", "second"):
            LosoOrchestrator(tiny_manager(tmp_path / name, **{"output.save_checkpoints": False})).run(small_dataset)
        first = (tmp_path / "first" / "aggregate.json").read_bytes()
        assert first == (tmp_path / "second" / "aggregate.json").read_bytes()

    def test_ablation_terms_logged_as_zero(self, small_dataset, tmp_path):
        manager = tiny_manager(tmp_path, **{"ablation.no_codg": True, "output.save_checkpoints": False})
        result = LosoOrchestrator(manager).run(small_dataset)
        assert result.aggregate["ablations"] == ["no_codg", "no_mmd", "no_contrast", "no_orth"]
        records = read_training_log(tmp_path / "fold_0" / "train_log.jsonl")
        for record in (r for r in records if "iter" in r):
            assert record["loss_mmd"] == record["loss_contrast"] == record["loss_orth"] == 0.0

    def test_parallel_folds_match_serial(self, small_dataset, tiny_config):
        serial = loso_run(small_dataset, tiny_config, dtype=np.float64)
        parallel = loso_run(small_dataset, tiny_config, dtype=np.float64, fold_workers=2)
        assert serial.aggregate == parallel.aggregate


@pytest.mark.slow
class TestSyntheticGate:
    def _run(self, directory, **extra):
        manager = ConfigurationManager(str(DESK_PROFILE))
        manager.override_config({"output.directory": str(directory), **extra})
        dataset = synthesize(manager.synth_spec())
        return LosoOrchestrator(manager).run(dataset)

    def test_full_model_clears_gate_and_beats_no_align(self, tmp_path):
        full = self._run(tmp_path / "full")
        no_align = self._run(tmp_path / "no_align", **{"ablation.no_align": True})
        assert full.aggregate["accuracy"]["mean"] >= 63.3
        assert full.aggregate["accuracy"]["mean"] > no_align.aggregate["accuracy"]["mean"]

    def test_repeat_run_is_byte_identical(self, tmp_path):
        self._run(tmp_path / "a")
        self._run(tmp_path / "b")
        assert (tmp_path / "a" / "aggregate.json").read_bytes() == (tmp_path / "b" / "aggregate.json").read_bytes()
