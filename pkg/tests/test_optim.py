"""Tests for the Adam update and the learning-rate schedule."""

import numpy as np
import pytest

from rsm_codg.optim import AdamState, NumericalError, adam_step, schedule_lr
from rsm_codg.param_store import ParamStore


def single_parameter_store(value, grad):
    store = ParamStore(np.float64)
    tensor = store.add("theta", np.array([value], dtype=np.float64))
    tensor.grad = np.array([grad], dtype=np.float64)
    return store, tensor


class TestSchedule:
    @pytest.mark.parametrize("epoch, expected", [(0, 1e-4), (14, 1e-4), (15, 7e-5), (30, 4.9e-5)])
    def test_step_decay(self, epoch, expected):
        assert schedule_lr(epoch) == pytest.approx(expected, rel=1e-12)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            schedule_lr(-1)


class TestAdam:
    def test_first_step_by_hand(self):
        store, tensor = single_parameter_store(1.0, 1.0)
        adam_step(store, AdamState(weight_decay=0.0), lr=0.1)
        assert tensor.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-9)

    def test_decoupled_weight_decay(self):
        store, tensor = single_parameter_store(2.0, 0.0)
        adam_step(store, AdamState(weight_decay=0.5), lr=0.1)
        assert tensor.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_zero_gradient_leaves_parameter(self):
        store, tensor = single_parameter_store(1.5, 0.0)
        adam_step(store, AdamState(weight_decay=0.0), lr=0.1)
        assert tensor.data[0] == 1.5

    def test_parameters_without_gradient_are_skipped(self):
        store, tensor = single_parameter_store(1.0, 1.0)
        untouched = store.add("other", np.array([3.0]))
        state = AdamState(weight_decay=0.0)
        adam_step(store, state, lr=0.1)
        assert untouched.data[0] == 3.0
        assert "other" not in state.m

    def test_non_finite_gradient_names_path(self):
        store, tensor = single_parameter_store(1.0, np.nan)
        with pytest.raises(NumericalError) as info:
            adam_step(store, AdamState(), lr=0.1)
        assert info.value.path == "theta"
        assert tensor.data[0] == 1.0

    def test_step_counters_and_version(self):
        store, _ = single_parameter_store(1.0, 1.0)
        version = store.version
        state = AdamState()
        adam_step(store, state, lr=0.1)
        assert state.t == 1
        assert store.step == 1
        assert store.version > version

    def test_deterministic(self):
        results = []
        for _ in range(2):
            store, tensor = single_parameter_store(0.3, -0.7)
            state = AdamState()
            for step in range(5):
                tensor.grad = np.array([np.sin(step + 1.0)])
                adam_step(store, state, lr=0.01)
            results.append(tensor.data.copy())
        assert np.array_equal(results[0], results[1])

    def test_scaled_prefix_takes_smaller_step(self):
        store = ParamStore(np.float64)
        shared = store.add("encoder/w", np.array([1.0]))
        matrix = store.add("align/W_s/0", np.array([1.0]))
        shared.grad = np.array([1.0])
        matrix.grad = np.array([1.0])
        adam_step(store, AdamState(weight_decay=0.0, lr_scale={"align/": 0.01}), lr=0.1)
        assert 1.0 - shared.data[0] == pytest.approx(0.1, rel=1e-6)
        assert 1.0 - matrix.data[0] == pytest.approx(0.001, rel=1e-6)

    def test_longest_prefix_wins(self):
        state = AdamState(lr_scale={"align/": 0.1, "align/W_s/3": 0.5})
        assert state.scale_for("align/W_s/3") == 0.5
        assert state.scale_for("align/W_s/4") == 0.1
        assert state.scale_for("codg/W_c1") == 1.0

    def test_excluded_prefix_is_not_decayed(self):
        store = ParamStore(np.float64)
        shared = store.add("encoder/w", np.eye(3))
        matrix = store.add("align/W_s/0", np.eye(3))
        shared.grad = np.zeros((3, 3))
        matrix.grad = np.zeros((3, 3))
        adam_step(store, AdamState(weight_decay=0.5, decay_exclude=("align/",)), lr=0.1)
        assert np.array_equal(matrix.data, np.eye(3))
        assert np.allclose(shared.data, 0.95 * np.eye(3))
