import numpy as np
import pytest

from oracles import brute_batch_hard
from relreid.errors import ConfigError
from relreid.head import HeadConfig, HeadParams, feature_count, multiscale_forward
from relreid.objectives import (
    ClassifierBank,
    batch_hard_triplet,
    combined_loss,
    cross_entropy_loss,
)
from relreid.tensor import Tensor, constant, grad_check


def make_bank(embed_dim=8, n_classes=3, n_features=7, seed=0):
    return ClassifierBank(embed_dim, n_classes, n_features, np.random.default_rng(seed))


class TestCrossEntropy:
    def test_uniform_logits_seven_features(self):
        # zero weights and biases: every classifier emits uniform logits
        bank = make_bank(n_classes=2)
        for aff in bank.items:
            aff.w.data = np.zeros_like(aff.w.data)
            aff.b.data = np.zeros_like(aff.b.data)
        feats = [constant(np.ones((1, 8), dtype=np.float32)) for _ in range(7)]
        loss = cross_entropy_loss(feats, np.array([0]), bank)
        np.testing.assert_allclose(float(loss.data), 7 * np.log(2.0), rtol=1e-6)

    def test_confident_logits_drive_loss_to_zero(self):
        bank = make_bank(n_classes=2, n_features=1)
        bank.items[0].w.data = np.zeros_like(bank.items[0].w.data)
        bank.items[0].b.data = np.array([40.0, -40.0], dtype=np.float32)
        feats = [constant(np.ones((3, 8), dtype=np.float32))]
        loss = cross_entropy_loss(feats, np.array([0, 0, 0]), bank)
        assert float(loss.data) < 1e-6

    def test_matches_direct_probability_oracle(self):
        rng = np.random.default_rng(1)
        bank = make_bank(n_classes=5, n_features=3, seed=2)
        feats = [Tensor(rng.standard_normal((4, 8)), dtype=np.float64) for _ in range(3)]
        labels = rng.integers(0, 5, 4)
        loss = float(cross_entropy_loss(feats, labels, bank).data)
        expected = 0.0
        for f, aff in zip(feats, bank.items):
            logits = f.data @ aff.w.data + aff.b.data
            probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
            expected -= np.log(probs[np.arange(4), labels]).sum()
        np.testing.assert_allclose(loss, expected, atol=1e-6)

    def test_label_out_of_range_rejected(self):
        bank = make_bank(n_classes=3, n_features=1)
        feats = [constant(np.zeros((2, 8), dtype=np.float32))]
        with pytest.raises(ValueError, match="label"):
            cross_entropy_loss(feats, np.array([0, 3]), bank)

    def test_nonnegative_on_random_inputs(self):
        rng = np.random.default_rng(3)
        bank = make_bank(n_features=2, seed=4)
        for _ in range(25):
            feats = [constant(rng.standard_normal((5, 8)).astype(np.float32))
                     for _ in range(2)]
            labels = rng.integers(0, 3, 5)
            assert float(cross_entropy_loss(feats, labels, bank).data) >= 0.0

    def test_bank_size_mismatch_rejected(self):
        bank = make_bank(n_features=2)
        feats = [constant(np.zeros((1, 8), dtype=np.float32))]
        with pytest.raises(ConfigError, match="classifiers"):
            cross_entropy_loss(feats, np.array([0]), bank)


class TestBatchHardTriplet:
    def test_hand_example_two_identities(self):
        # A:{0,2}, B:{1,3} in one dimension; every anchor contributes 1.5
        emb = Tensor(np.array([[0.0], [2.0], [1.0], [3.0]]), dtype=np.float64)
        labels = np.array([0, 0, 1, 1])
        loss = batch_hard_triplet(emb, labels, margin=0.5)
        assert float(loss.data) == 6.0

    def test_separated_clusters_inactive_hinge(self):
        emb = Tensor(np.array([[0.0], [1.0], [5.0], [6.0]]), dtype=np.float64)
        labels = np.array([0, 0, 1, 1])
        assert float(batch_hard_triplet(emb, labels, margin=0.3).data) == 0.0

    def test_coincident_identity_at_margin_boundary(self):
        # coincident positives (hp = 0) and the nearest negative exactly
        # margin away: every hinge sits at its boundary and contributes 0
        emb = Tensor(np.array([[0.0], [0.0], [0.3]]), dtype=np.float64)
        labels = np.array([0, 0, 1])
        loss = batch_hard_triplet(emb, labels, margin=0.3)
        assert float(loss.data) == 0.0

    def test_matches_brute_force_on_random_batches(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            n_ids = rng.integers(2, 5)
            per_id = rng.integers(1, 5)
            n = int(n_ids * per_id)
            if n > 16:
                continue
            labels = np.repeat(np.arange(n_ids), per_id)
            emb = rng.standard_normal((n, rng.integers(1, 6)))
            mine = float(batch_hard_triplet(Tensor(emb, dtype=np.float64), labels, 0.4).data)
            np.testing.assert_allclose(mine, brute_batch_hard(emb, labels, 0.4), atol=1e-6)

    def test_translation_invariance(self):
        rng = np.random.default_rng(6)
        labels = np.array([0, 0, 1, 1, 2, 2])
        emb = rng.standard_normal((6, 4))
        shifted = emb + rng.standard_normal(4)
        a = float(batch_hard_triplet(Tensor(emb, dtype=np.float64), labels, 0.3).data)
        b = float(batch_hard_triplet(Tensor(shifted, dtype=np.float64), labels, 0.3).data)
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_label_permutation_equivariance(self):
        rng = np.random.default_rng(7)
        labels = np.array([0, 0, 1, 1, 2, 2])
        relabeled = np.array([5, 5, 9, 9, 1, 1])  # bijective renaming
        emb = rng.standard_normal((6, 3))
        a = float(batch_hard_triplet(Tensor(emb, dtype=np.float64), labels, 0.3).data)
        b = float(batch_hard_triplet(Tensor(emb, dtype=np.float64), relabeled, 0.3).data)
        assert a == b

    def test_single_identity_rejected(self):
        emb = Tensor(np.zeros((4, 2)), dtype=np.float64)
        with pytest.raises(ValueError, match="identities"):
            batch_hard_triplet(emb, np.array([3, 3, 3, 3]), 0.3)


class TestCombinedLoss:
    def _setup(self, seed=8):
        rng = np.random.default_rng(seed)
        cfg = HeadConfig(scales=(6,), channels=16, embed_dim=8)
        params = HeadParams(cfg, rng)
        bank = ClassifierBank(8, 2, feature_count(cfg), rng)
        maps = constant(rng.standard_normal((4, 12, 3, 16)).astype(np.float32))
        labels = np.array([0, 0, 1, 1])
        return cfg, params, bank, maps, labels

    def test_zero_weight_leaves_triplet_only(self):
        cfg, params, bank, maps, labels = self._setup()
        feats, rep = multiscale_forward(maps, cfg, params)
        loss, terms = combined_loss(feats, rep, labels, bank, 0.3, 0.0)
        np.testing.assert_allclose(float(loss.data), terms["triplet"], rtol=1e-6)

    def test_weighted_sum_arithmetic(self):
        cfg, params, bank, maps, labels = self._setup()
        feats, rep = multiscale_forward(maps, cfg, params)
        loss, terms = combined_loss(feats, rep, labels, bank, 0.3, 2.0)
        np.testing.assert_allclose(float(loss.data),
                                   terms["triplet"] + 2.0 * terms["cross_entropy"],
                                   rtol=1e-6)

    def test_gradient_vs_finite_differences(self):
        cfg, params, bank, maps, labels = self._setup(seed=12)
        params.set_mode("training")

        def build():
            feats, rep = multiscale_forward(maps, cfg, params)
            loss, _ = combined_loss(feats, rep, labels, bank, 0.3, 2.0)
            return loss

        leaves = dict(params.named_parameters() + bank.named_parameters())
        report = grad_check(build, leaves)
        assert report.passed, f"max rel err {report.max_rel_err:.3e}"
