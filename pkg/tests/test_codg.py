"""Tests for the domain-generalisation head and its losses."""

import math

import numpy as np
import pytest

from rsm_codg.codg import (CodgHead, Diagnostics, contrastive_loss, mmd_loss, nll, orthogonal_loss,
                           total_loss)
from rsm_codg.numcore import Tensor, grad_check
from rsm_codg.param_store import ParamStore, make_rng


def contrastive_reference(embeddings, subjects, temperature):
    unit = embeddings / np.linalg.norm(embeddings, axis=1, keepdims=True)
    similarity = unit @ unit.T / temperature
    terms = []
    for i in range(len(subjects)):
        positive = [j for j in range(len(subjects)) if j != i and subjects[j] == subjects[i]]
        negative = [j for j in range(len(subjects)) if subjects[j] != subjects[i]]
        if positive and negative:
            terms.append(math.log(sum(math.exp(similarity[i, j]) for j in negative))
                         - math.log(sum(math.exp(similarity[i, j]) for j in positive)))
    return float(np.mean(terms))


class TestMmd:
    def test_two_points(self):
        features = Tensor(np.array([[0.0, 0.0], [3.0, 4.0]]))
        assert mmd_loss(features, np.array([0, 1])).item() == pytest.approx(5.0)

    def test_uses_subject_means_and_averages_pairs(self):
        features = Tensor(np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 3.0], [1.0, 0.0]]))
        subjects = np.array([0, 0, 1, 2])
        # means: (1, 0), (1, 3), (1, 0)
        assert mmd_loss(features, subjects).item() == pytest.approx((3.0 + 0.0 + 3.0) / 3)

    def test_single_subject_is_zero(self):
        features = Tensor(np.random.default_rng(0).standard_normal((5, 3)))
        assert mmd_loss(features, np.zeros(5, dtype=int)).item() == 0.0

    def test_gradients(self):
        features = Tensor(np.random.default_rng(1).standard_normal((6, 3)), requires_grad=True)
        subjects = np.array([0, 0, 1, 1, 2, 2])
        result = grad_check(lambda: mmd_loss(features, subjects), {"f": features}, 15, make_rng(0, "gradcheck"))
        assert result.max_rel_error < 1e-4


class TestContrastive:
    def test_hand_value(self):
        embeddings = Tensor(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]))
        # each anchor: log(2 * e^0) - log(e^1)
        value = contrastive_loss(embeddings, np.array([0, 0, 1, 1]), temperature=1.0).item()
        assert value == pytest.approx(math.log(2.0) - 1.0)

    def test_matches_reference(self):
        rng = np.random.default_rng(2)
        embeddings = rng.standard_normal((8, 5))
        subjects = np.array([0, 0, 0, 1, 1, 2, 2, 3])
        value = contrastive_loss(Tensor(embeddings), subjects, temperature=0.07).item()
        assert value == pytest.approx(contrastive_reference(embeddings, subjects, 0.07), rel=1e-9)

    def test_invariant_to_scaling(self):
        embeddings = np.random.default_rng(3).standard_normal((6, 4))
        subjects = np.array([0, 0, 1, 1, 2, 2])
        base = contrastive_loss(Tensor(embeddings), subjects, 0.5).item()
        scaled = contrastive_loss(Tensor(5.0 * embeddings), subjects, 0.5).item()
        assert scaled == pytest.approx(base, rel=1e-9)

    def test_one_subject_counts_diagnostic(self):
        diagnostics = Diagnostics()
        embeddings = Tensor(np.ones((4, 3)))
        assert contrastive_loss(embeddings, np.zeros(4, dtype=int), 0.07, diagnostics).item() == 0.0
        assert diagnostics.contrast_no_anchor == 1

    def test_singleton_subjects_are_not_anchors(self):
        embeddings = np.random.default_rng(4).standard_normal((3, 4))
        subjects = np.array([0, 1, 2])
        diagnostics = Diagnostics()
        assert contrastive_loss(Tensor(embeddings), subjects, 1.0, diagnostics).item() == 0.0
        assert diagnostics.contrast_no_anchor == 1

    def test_temperature_must_be_positive(self):
        with pytest.raises(ValueError):
            contrastive_loss(Tensor(np.ones((2, 2))), np.array([0, 1]), 0.0)

    def test_gradients(self):
        embeddings = Tensor(np.random.default_rng(5).standard_normal((6, 4)), requires_grad=True)
        subjects = np.array([0, 0, 1, 1, 2, 2])
        result = grad_check(lambda: contrastive_loss(embeddings, subjects, 0.5), {"e": embeddings}, 20,
                            make_rng(0, "gradcheck"))
        assert result.max_rel_error < 1e-4


class TestOrthogonal:
    def _whitened(self, batch, width, seed):
        x = np.random.default_rng(seed).standard_normal((batch, width))
        u, _, _ = np.linalg.svd(x - x.mean(axis=0), full_matrices=False)
        return math.sqrt(batch - 1) * u

    def test_whitened_features_are_near_zero(self):
        assert orthogonal_loss(Tensor(self._whitened(20, 4, 6))).item() < 1e-10

    def test_duplicated_columns(self):
        column = self._whitened(10, 1, 7)
        features = np.hstack([column, column])
        assert orthogonal_loss(Tensor(features)).item() == pytest.approx(2.0)

    def test_single_sample(self):
        diagnostics = Diagnostics()
        assert orthogonal_loss(Tensor(np.ones((1, 3))), diagnostics).item() == 0.0
        assert diagnostics.orth_small_batch == 1
        assert diagnostics.to_dict() == {"contrast_no_anchor": 0, "orth_small_batch": 1}

    def test_gradients(self):
        features = Tensor(np.random.default_rng(8).standard_normal((7, 3)), requires_grad=True)
        result = grad_check(lambda: orthogonal_loss(features), {"f": features}, 15, make_rng(0, "gradcheck"))
        assert result.max_rel_error < 1e-4


class TestNllAndTotal:
    def test_uniform_prediction(self):
        log_probs = Tensor(np.full((4, 3), math.log(1.0 / 3.0)))
        assert nll(log_probs, np.array([0, 1, 2, 0])).item() == pytest.approx(math.log(3.0))

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="Labels"):
            nll(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_zero_weights_leave_classification(self):
        terms = [Tensor(np.array(v)) for v in (1.5, 2.0, 3.0, 4.0)]
        bundle = total_loss(*terms, lambda_contrast=0.0, lambda_orth=0.0, lambda_mmd=0.0)
        assert bundle.total.item() == 1.5

    def test_weighted_sum(self):
        terms = [Tensor(np.array(v)) for v in (1.0, 2.0, 3.0, 4.0)]
        bundle = total_loss(*terms, lambda_contrast=0.1, lambda_orth=0.01, lambda_mmd=0.5)
        assert bundle.total.item() == pytest.approx(1.0 + 0.2 + 0.03 + 2.0)
        assert set(bundle.as_floats()) == {"loss_total", "loss_cls", "loss_contrast", "loss_orth", "loss_mmd",
                                           "loss_align"}
        assert bundle.as_floats()["loss_align"] == 0.0

    def test_negative_weight(self):
        terms = [Tensor(np.array(1.0))] * 4
        with pytest.raises(ValueError, match="orth"):
            total_loss(*terms, lambda_contrast=0.1, lambda_orth=-1.0, lambda_mmd=0.1)


class TestCodgHead:
    def _head(self, invariant=True):
        store = ParamStore(np.float64)
        head = CodgHead(store, make_rng(0, "init/codg"), hidden=8, feature_dim=12, window=4, classes=3,
                        embed_dim=5, classifier_hidden=6, invariant=invariant)
        return store, head

    def test_orthogonal_projection_at_init(self):
        store, _ = self._head()
        w = store["codg/W_orth"].data
        assert np.allclose(w @ w.T, np.eye(8), atol=1e-10)

    def test_shapes(self):
        _, head = self._head()
        rng = np.random.default_rng(9)
        features = head.features(Tensor(rng.standard_normal((5, 8))))
        assert features.shape == (5, 8)
        embedding = head.embed(Tensor(rng.random((5, 12))), Tensor(rng.random((5, 4))))
        assert embedding.shape == (5, 10)
        log_probs = head.classify(features, train=False)
        assert np.allclose(np.exp(log_probs.data).sum(axis=1), 1.0)

    def test_without_invariant_extractor(self):
        store, head = self._head(invariant=False)
        assert "codg/W_orth" not in store
        z = Tensor(np.ones((2, 8)))
        assert head.features(z) is z
