import numpy as np
import pytest

from sta_reid.losses import (
    LabeledBatch,
    batch_hard_stats,
    batch_hard_triplet,
    make_loss_report,
    softmax_xent,
    total_objective,
)
from sta_reid.numerics import GradPair, gradcheck


def one_d_batch(groups):
    """1-D embeddings from {label: [values]}, rows in listed order."""
    embs, labels = [], []
    for label, values in groups.items():
        for v in values:
            embs.append([float(v)])
            labels.append(label)
    return LabeledBatch(np.array(embs), np.array(labels))


class TestBatchHardTriplet:
    def test_all_identical_embeddings(self):
        batch = LabeledBatch(np.zeros((4, 3)), np.array([0, 0, 1, 1]))
        loss = float(batch_hard_triplet(batch, margin=0.3).value)
        np.testing.assert_allclose(loss, 1.2, atol=1e-12)

    def test_well_separated_clusters_clamp_to_zero(self):
        batch = one_d_batch({0: [0.0, 1.0], 1: [10.0, 12.0]})
        assert float(batch_hard_triplet(batch, margin=0.3).value) == 0.0

    def test_hand_enumerated_terms(self):
        batch = one_d_batch({0: [0.0, 5.0], 1: [6.0, 7.0]})
        _, _, _, terms, _ = batch_hard_stats(batch, margin=1.0)
        np.testing.assert_allclose(terms, [0.0, 5.0, 1.0, 0.0], atol=1e-12)
        assert float(batch_hard_triplet(batch, margin=1.0).value) == 6.0

    def test_mean_reduction(self):
        batch = one_d_batch({0: [0.0, 5.0], 1: [6.0, 7.0]})
        assert float(batch_hard_triplet(batch, margin=1.0, reduction="mean").value) == 6.0 / 4

    def test_identity_with_single_row_rejected(self):
        batch = LabeledBatch(np.zeros((3, 2)), np.array([0, 0, 1]))
        with pytest.raises(ValueError, match="at least 2"):
            batch_hard_triplet(batch, margin=0.3)

    def test_rigid_motion_invariance(self):
        rng = np.random.default_rng(0)
        emb = rng.normal(size=(8, 4))
        labels = np.repeat([0, 1], 4)
        base = float(batch_hard_triplet(LabeledBatch(emb, labels), 0.5).value)
        # random rotation (QR orthogonal factor) plus translation
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        moved = emb @ q + rng.normal(size=4)
        shifted = float(batch_hard_triplet(LabeledBatch(moved, labels), 0.5).value)
        np.testing.assert_allclose(shifted, base, atol=1e-9)

    def test_moving_negative_farther_never_increases(self):
        rng = np.random.default_rng(1)
        emb = rng.normal(size=(4, 2))
        labels = np.array([0, 0, 1, 1])
        base = float(batch_hard_triplet(LabeledBatch(emb, labels), 1.0).value)
        # push identity-1 rows radially away from everything
        moved = emb.copy()
        moved[2:] = moved[2:] + np.array([100.0, 100.0])
        far = float(batch_hard_triplet(LabeledBatch(moved, labels), 1.0).value)
        assert far <= base

    def test_gradcheck_generic_point(self):
        rng = np.random.default_rng(2)
        emb = rng.normal(size=(6, 3))
        labels = np.repeat([0, 1, 2], 2)

        def fn(t):
            pair = batch_hard_triplet(LabeledBatch(t, labels), margin=5.0)
            return GradPair(pair.value, pair.backward)

        assert gradcheck(fn, emb) < 1e-5


def softmax_xent_naive(logits, labels):
    """Direct definition without stabilization; fine for small logits."""
    total = 0.0
    for row, label in zip(logits, labels):
        total -= np.log(np.exp(row[label]) / np.exp(row).sum())
    return total


class TestSoftmaxXent:
    def test_uniform_logits(self):
        batch = LabeledBatch(np.zeros((1, 2)), np.array([0]), logits=np.zeros((1, 4)))
        np.testing.assert_allclose(float(softmax_xent(batch).value), np.log(4.0), atol=1e-12)

    def test_near_one_hot_logits(self):
        logits = np.zeros((2, 5))
        logits[0, 3] = 1000.0
        logits[1, 1] = 1000.0
        batch = LabeledBatch(np.zeros((2, 2)), np.array([3, 1]), logits=logits)
        assert float(softmax_xent(batch).value) < 1e-8

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(3, 5))
        labels = rng.integers(0, 5, size=3)
        batch = LabeledBatch(np.zeros((3, 2)), labels, logits=logits)
        np.testing.assert_allclose(float(softmax_xent(batch).value),
                                   softmax_xent_naive(logits, labels), atol=1e-10)

    def test_label_out_of_range(self):
        batch = LabeledBatch(np.zeros((1, 2)), np.array([4]), logits=np.zeros((1, 3)))
        with pytest.raises(ValueError, match=r"\[0, 3\)"):
            softmax_xent(batch)

    def test_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            logits = rng.normal(size=(4, 6)) * 3
            labels = rng.integers(0, 6, size=4)
            batch = LabeledBatch(np.zeros((4, 2)), labels, logits=logits)
            assert float(softmax_xent(batch).value) >= 0.0

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(3, 4))
        labels = np.array([0, 2, 3])

        def fn(t):
            pair = softmax_xent(LabeledBatch(np.zeros((3, 2)), labels, logits=t))
            return GradPair(pair.value, pair.backward)

        assert gradcheck(fn, logits) < 1e-6

    def test_mean_reduction(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(4, 3))
        labels = rng.integers(0, 3, size=4)
        batch = LabeledBatch(np.zeros((4, 2)), labels, logits=logits)
        np.testing.assert_allclose(float(softmax_xent(batch, reduction="mean").value),
                                   float(softmax_xent(batch).value) / 4, atol=1e-12)


class TestTotalObjective:
    def test_lambda_zero_drops_reg(self):
        assert total_objective(1.5, 2.5, 100.0, lam=0.0) == 4.0

    def test_arithmetic(self):
        assert total_objective(1.0, 2.0, 0.5, lam=2.0) == 4.0

    def test_all_zero(self):
        assert total_objective(0.0, 0.0, 0.0, lam=0.1) == 0.0

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            total_objective(1.0, 1.0, 1.0, lam=-0.1)

    def test_report_invariant(self):
        report = make_loss_report(l_softmax=1.25, l_triplet=0.5, reg=0.75, lam=0.1, active_triplets=3)
        assert abs(report.total - (report.l_softmax + report.l_triplet + 0.1 * report.reg)) < 1e-12
        assert report.active_triplets == 3
