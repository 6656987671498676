"""Tests for the autodiff engine, its fused kernels and the gradient checker."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsm_codg.mstt import build_local_mask
from rsm_codg.numcore import (MaskError, ShapeError, Tensor, batch_norm, concat, dropout, exp, getitem,
                              grad_check, layer_norm, linear, log_softmax, masked_logsumexp, masked_softmax,
                              masked_softmax_attention, matmul, relu, sigmoid, tanh, tsum)


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


class TestLinear:
    def test_identity_weight(self):
        assert linear(Tensor([1.0, 2.0]), Tensor(np.eye(2))).data.tolist() == [1.0, 2.0]

    def test_hand_product(self):
        # y = x . W^T with x=[1,0], W^T=[[2,3],[4,5]]
        weight = Tensor(np.array([[2.0, 3.0], [4.0, 5.0]]).T)
        assert linear(Tensor([1.0, 0.0]), weight).data.tolist() == [2.0, 3.0]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(3,\).*\(2, 2\)"):
            linear(Tensor(np.zeros(3)), Tensor(np.eye(2)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((4, 3)))
        params = {"w": leaf(rng.standard_normal((2, 3))), "b": leaf(rng.standard_normal(2))}
        result = grad_check(lambda: tsum(tanh(linear(x, params["w"], params["b"]))), params, 6,
                            np.random.default_rng(2))
        assert result.checked == 6
        assert result.max_rel_error < 1e-6


class TestMaskedSoftmax:
    def test_banded_row_with_zero_scores(self):
        mask = build_local_mask(3, 1).matrix
        q = Tensor(np.zeros((3, 2)))
        _, weights = masked_softmax_attention(q, q, q, mask, d_k=2)
        assert weights.data[0].tolist() == [0.5, 0.5, 0.0]

    def test_self_match_limit(self):
        basis = Tensor(40.0 * np.eye(4))
        _, weights = masked_softmax_attention(basis, basis, basis, np.zeros((4, 4)), d_k=1)
        assert np.allclose(weights.data, np.eye(4), atol=1e-6)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 3), st.integers(0, 2 ** 31 - 1))
    def test_masked_entries_are_exactly_zero_and_rows_sum_to_one(self, size, radius, seed):
        rng = np.random.default_rng(seed)
        allowed = build_local_mask(size, radius).allowed
        weights = masked_softmax(Tensor(rng.standard_normal((size, size)) * 10), allowed).data
        assert np.all(weights[~allowed] == 0.0)
        assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-6)

    def test_fully_masked_row_is_rejected(self):
        allowed = np.array([[True, False], [False, False]])
        with pytest.raises(MaskError):
            masked_softmax(Tensor(np.zeros((2, 2))), allowed)

    def test_gradient_through_masked_entry_is_zero(self):
        scores = leaf(np.random.default_rng(3).standard_normal((3, 3)))
        allowed = build_local_mask(3, 0).allowed | np.eye(3, k=1, dtype=bool)
        weights = masked_softmax(scores, allowed)
        target = Tensor(np.random.default_rng(4).standard_normal((3, 3)))
        tsum(weights * target).backward()
        assert np.all(scores.grad[~allowed] == 0.0)

        def loss():
            return tsum(masked_softmax(scores, allowed) * target)
        before = loss().item()
        scores.data[2, 0] += 1e-3
        assert loss().item() == before

    def test_logsumexp_over_allowed_entries(self):
        x = Tensor(np.array([[0.0, math.log(3.0), 100.0]]))
        allowed = np.array([[True, True, False]])
        assert masked_logsumexp(x, allowed).data.item() == pytest.approx(math.log(4.0))


class TestNormalisation:
    def test_constant_vector(self):
        out = layer_norm(Tensor([1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert out.data.tolist() == [0.0, 0.0]

    def test_hand_mean_and_variance(self):
        out = layer_norm(Tensor([0.0, 2.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
        assert out.data.tolist() == pytest.approx([-1.0, 1.0])

    def test_batch_norm_updates_running_statistics(self):
        running_mean, running_var = np.zeros(2), np.ones(2)
        x = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]))
        batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), running_mean, running_var, train=True, momentum=0.5)
        assert running_mean.tolist() == pytest.approx([0.5, 1.0])
        assert running_var.tolist() == pytest.approx([1.5, 1.5])

    def test_batch_norm_eval_uses_running_statistics(self):
        out = batch_norm(Tensor(np.array([[3.0]])), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                         np.array([1.0]), np.array([4.0]), train=False, eps=0.0)
        assert out.data.item() == pytest.approx(1.0)

    def test_layer_norm_gradient(self):
        rng = np.random.default_rng(5)
        params = {"x": leaf(rng.standard_normal((3, 4))), "g": leaf(rng.uniform(0.5, 1.5, 4)),
                  "b": leaf(rng.standard_normal(4))}
        weights = Tensor(rng.standard_normal((3, 4)))
        result = grad_check(lambda: tsum(layer_norm(params["x"], params["g"], params["b"]) * weights),
                            params, 12, np.random.default_rng(6))
        assert result.max_rel_error < 1e-5


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert sigmoid(Tensor(0.0)).item() == 0.5

    def test_dropout_eval_mode_is_identity(self):
        x = Tensor(np.arange(6.0))
        assert dropout(x, 0.4, np.random.default_rng(0), train=False) is x

    def test_dropout_is_reproducible_with_equal_streams(self):
        x = Tensor(np.ones(100))
        first = dropout(x, 0.5, np.random.default_rng(9), train=True).data
        second = dropout(x, 0.5, np.random.default_rng(9), train=True).data
        assert np.array_equal(first, second)
        assert set(np.unique(first)) <= {0.0, 2.0}

    def test_log_softmax_uniform(self):
        out = log_softmax(Tensor(np.zeros((1, 3))))
        assert np.allclose(out.data, -math.log(3.0))


class TestBackward:
    def test_broadcast_gradients_are_reduced(self):
        a = leaf(np.ones((2, 3)))
        b = leaf(np.ones(3))
        tsum(a * b).backward()
        assert b.grad.tolist() == [2.0, 2.0, 2.0]

    def test_shared_node_accumulates(self):
        a = leaf(2.0)
        (a * a + a).backward()
        assert a.grad == pytest.approx(5.0)

    def test_getitem_scatters_repeated_indices(self):
        a = leaf(np.arange(3.0))
        tsum(getitem(a, np.array([0, 0, 2]))).backward()
        assert a.grad.tolist() == [2.0, 0.0, 1.0]

    def test_concat_and_matmul(self):
        rng = np.random.default_rng(7)
        params = {"a": leaf(rng.standard_normal((2, 2, 3))), "b": leaf(rng.standard_normal((3, 2)))}

        def loss():
            joined = concat([params["a"], exp(params["a"])], axis=-1)
            return tsum(tanh(matmul(joined[..., 3:], params["b"])) * matmul(joined[..., :3], params["b"]))
        result = grad_check(loss, params, 10, np.random.default_rng(8))
        assert result.max_rel_error < 1e-5

    def test_backward_needs_scalar(self):
        with pytest.raises(ShapeError):
            leaf(np.ones(2)).backward()


class TestGradCheck:
    def test_rejects_single_precision(self):
        params = {"w": Tensor(np.ones(2, dtype=np.float32), requires_grad=True)}
        with pytest.raises(ValueError, match="64-bit"):
            grad_check(lambda: tsum(params["w"]), params, 1, np.random.default_rng(0))

    def test_detects_a_wrong_gradient(self):
        w = leaf(np.array([0.7, -0.3]))

        def broken() -> Tensor:
            # forward is 2*sum(w) but the backward reports 1 per coordinate
            out = Tensor(2.0 * w.data.sum(), requires_grad=True, parents=(w,),
                         backward=lambda g: (np.ones_like(w.data) * g,))
            return out
        result = grad_check(broken, {"w": w}, 2, np.random.default_rng(0))
        assert result.max_rel_error == pytest.approx(0.5)
        assert not result.passed(1e-4)

    def test_skips_relu_kink(self):
        w = leaf(np.array([0.0]))
        result = grad_check(lambda: tsum(relu(w)), {"w": w}, 1, np.random.default_rng(0), max_attempts=3)
        assert result.skipped == 3
        assert result.checked == 0
