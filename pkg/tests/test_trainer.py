"""Tests for fold training: noise, splits, batching, early stopping and the leakage audit."""

import dataclasses

import numpy as np
import pytest

from rsm_codg.data_storage import TrainingLog, read_training_log
from rsm_codg.trainer import AuditError, SubjectBatcher, inject_noise, train_fold, validation_split


def source_and_validation(dataset, held_out=2, fraction=0.25):
    source = dataset.select(dataset.subjects != held_out)
    train_index, val_index = validation_split(source, fraction, np.random.default_rng(0))
    return source.select(train_index), source.select(val_index)


class TestNoise:
    def test_eval_mode_is_identity(self, rng):
        samples = np.ones((2, 3, 4), dtype=np.float32)
        assert inject_noise(samples, 0.5, rng, train=False) is samples

    def test_zero_sigma_is_identity(self, rng):
        samples = np.ones((2, 3, 4))
        assert inject_noise(samples, 0.0, rng) is samples

    def test_train_mode_perturbs_and_keeps_dtype(self, rng):
        samples = np.zeros((200, 3, 4), dtype=np.float32)
        noisy = inject_noise(samples, 0.1, rng)
        assert noisy.dtype == np.float32
        assert 0.08 < noisy.std() < 0.12


class TestValidationSplit:
    def test_one_window_per_cell(self, small_dataset):
        train_index, val_index = validation_split(small_dataset, 0.25, np.random.default_rng(0))
        assert len(val_index) == 9
        assert len(np.intersect1d(train_index, val_index)) == 0
        assert len(train_index) + len(val_index) == len(small_dataset)
        val = small_dataset.select(val_index)
        for subject in small_dataset.subject_ids:
            for label in range(3):
                assert np.sum((val.subjects == subject) & (val.labels == label)) == 1

    def test_zero_fraction(self, small_dataset):
        train_index, val_index = validation_split(small_dataset, 0.0, np.random.default_rng(0))
        assert len(val_index) == 0
        assert len(train_index) == len(small_dataset)

    def test_reproducible(self, small_dataset):
        first = validation_split(small_dataset, 0.25, np.random.default_rng(4))
        second = validation_split(small_dataset, 0.25, np.random.default_rng(4))
        assert np.array_equal(first[1], second[1])

    @pytest.mark.parametrize("fraction", [-0.1, 1.0])
    def test_invalid_fraction(self, small_dataset, fraction):
        with pytest.raises(ValueError):
            validation_split(small_dataset, fraction, np.random.default_rng(0))


class TestSubjectBatcher:
    def test_every_iteration_sees_every_subject(self):
        subjects = np.array([0] * 5 + [1] * 3)
        batcher = SubjectBatcher(subjects, 2, np.random.default_rng(0))
        assert batcher.iterations_per_epoch == 3
        batches = list(batcher.epoch())
        assert len(batches) == 3
        for batch in batches:
            assert sorted(subjects[batch].tolist()) == [0, 0, 1, 1]

    def test_small_subject_takes_what_it_has(self):
        subjects = np.array([0] * 6 + [1])
        batch = next(SubjectBatcher(subjects, 4, np.random.default_rng(0)).epoch())
        assert sorted(subjects[batch].tolist()) == [0, 0, 0, 0, 1]

    def test_invalid_batch_size(self):
        with pytest.raises(ValueError):
            SubjectBatcher(np.zeros(3, dtype=int), 0, np.random.default_rng(0))


class TestTrainFold:
    def test_needs_two_subjects(self, small_dataset, tiny_config):
        single = small_dataset.select(small_dataset.subjects == 0)
        with pytest.raises(ValueError, match="at least 2"):
            train_fold(single, single.select(np.zeros(0, dtype=int)), tiny_config)

    def test_held_out_leak_is_refused(self, small_dataset, tiny_config):
        train, val = source_and_validation(small_dataset)
        with pytest.raises(AuditError):
            train_fold(train, val, tiny_config, fold=1, held_out=1)

    def test_writes_iteration_and_epoch_records(self, small_dataset, tiny_config, tmp_path):
        train, val = source_and_validation(small_dataset)
        with TrainingLog(tmp_path / "train_log.jsonl", 2) as log:
            result = train_fold(train, val, tiny_config, fold=2, held_out=2, log=log, dtype=np.float64)
        records = read_training_log(tmp_path / "train_log.jsonl")
        epochs = [r for r in records if r.get("kind") == "epoch"]
        iterations = [r for r in records if "iter" in r]
        assert len(epochs) == result.epochs_run == 2
        assert len(iterations) == 2 * 3
        for record in iterations:
            assert record["fold"] == 2
            assert record["n_subjects"] == 2
            assert {"loss_total", "loss_cls", "loss_contrast", "loss_orth", "loss_mmd", "loss_align",
                    "lr"} <= set(record)
        assert result.audit_passed

    def test_restores_best_epoch(self, small_dataset, tiny_config):
        train, val = source_and_validation(small_dataset)
        config = dataclasses.replace(tiny_config, epochs=4)
        result = train_fold(train, val, config, fold=2, held_out=2, dtype=np.float64)
        restored = result.network.validation_loss(val.samples, val.labels)
        assert restored == pytest.approx(result.best_val_loss, rel=1e-9)
        assert result.best_val_loss == min(entry["val_loss"] for entry in result.history)

    def test_zero_patience_stops_at_first_non_improving_epoch(self, small_dataset, tiny_config):
        train, val = source_and_validation(small_dataset)
        config = dataclasses.replace(tiny_config, epochs=8, patience=0)
        result = train_fold(train, val, config, fold=2, held_out=2, dtype=np.float64)
        assert all(entry["improved"] for entry in result.history[:-1])
        if result.epochs_run < config.epochs:
            assert not result.history[-1]["improved"]

    def test_empty_validation_uses_training_loss(self, small_dataset, tiny_config):
        train, _ = source_and_validation(small_dataset, fraction=0.0)
        empty = train.select(np.zeros(0, dtype=int))
        result = train_fold(train, empty, tiny_config, fold=2, held_out=2, dtype=np.float64)
        for entry in result.history:
            assert entry["val_loss"] == entry["train_loss"]

    def test_same_seed_same_parameters(self, small_dataset, tiny_config):
        train, val = source_and_validation(small_dataset)
        first = train_fold(train, val, tiny_config, fold=2, held_out=2, dtype=np.float64)
        second = train_fold(train, val, tiny_config, fold=2, held_out=2, dtype=np.float64)
        for path, tensor in first.network.store.items():
            assert np.array_equal(tensor.data, second.network.store[path].data)

    def test_alignment_matrices_follow_their_own_rate_without_decay(self, small_dataset, tiny_config):
        train, val = source_and_validation(small_dataset)
        config = dataclasses.replace(tiny_config, weight_decay=0.5, lambda_align=0.0)
        frozen = train_fold(train, val, dataclasses.replace(config, align_lr_scale=1e-12),
                            fold=2, held_out=2, dtype=np.float64)
        moving = train_fold(train, val, config, fold=2, held_out=2, dtype=np.float64)
        for subject, matrix in frozen.network.bank.matrices().items():
            assert np.allclose(matrix.data, np.eye(matrix.shape[0]), atol=1e-9)
            assert not np.allclose(moving.network.bank.matrix(subject).data, matrix.data, atol=1e-9)
