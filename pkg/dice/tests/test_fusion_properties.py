import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from dice.fusion import (
    Branch,
    FusionConfig,
    FusionMode,
    consensus_filter,
    fuse_block,
    importance_weights,
    stack_task_vectors,
)
from dice.validation import dense_oracle

CASES = 200


def random_instance(rng, max_k=5, max_n=64):
    k = int(rng.integers(1, max_k + 1))
    n = int(rng.integers(1, max_n + 1))
    base = rng.normal(size=n).astype(np.float32)
    taus = rng.normal(scale=0.1, size=(k, n)).astype(np.float32)
    taus[rng.random((k, n)) < 0.05] = 0.0
    return base, taus


class FusionPropertyTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(20240611)

    def test_weights_lie_on_the_simplex(self):
        for _ in range(CASES):
            _, taus = random_instance(self.rng)
            cfg = FusionConfig(beta=float(self.rng.uniform(0.01, 20)))
            consensus = consensus_filter(taus, cfg)
            weights = importance_weights(taus, consensus, cfg)
            self.assertTrue(np.all(weights >= 0))
            self.assertTrue(np.all(weights[~consensus.active] == 0))
            assert_allclose(weights.sum(axis=0), 1.0, atol=1e-6)

    def test_active_set_is_never_empty(self):
        for _ in range(CASES):
            _, taus = random_instance(self.rng)
            delta = float(self.rng.uniform(0, taus.shape[0]))
            consensus = consensus_filter(taus, FusionConfig(delta=delta))
            self.assertTrue(np.all(consensus.active_size >= 1))
            self.assertTrue(np.all((consensus.branch == Branch.POSITIVE_MAJORITY) == (consensus.votes > delta)))

    def test_update_is_a_convex_combination_with_the_majority_sign(self):
        for _ in range(CASES):
            base, taus = random_instance(self.rng)
            cfg = FusionConfig(beta=float(self.rng.uniform(0.1, 10)))
            consensus = consensus_filter(taus, cfg)
            weights = importance_weights(taus, consensus, cfg)
            update = (weights.astype(np.float64) * taus).sum(axis=0)
            masked_low = np.where(consensus.active, taus, np.inf).min(axis=0)
            masked_high = np.where(consensus.active, taus, -np.inf).max(axis=0)
            slack = 1e-6 * np.abs(taus).max(axis=0) + 1e-12
            self.assertTrue(np.all(update >= masked_low - slack))
            self.assertTrue(np.all(update <= masked_high + slack))

            fused, _ = fuse_block(base, taus, cfg)
            applied = fused.astype(np.float64) - base
            tolerance = 1e-6 * (np.abs(base) + np.abs(taus).sum(axis=0))
            self.assertTrue(np.all(applied[consensus.branch == Branch.POSITIVE_MAJORITY]
                                   >= -tolerance[consensus.branch == Branch.POSITIVE_MAJORITY]))
            self.assertTrue(np.all(applied[consensus.branch == Branch.NEGATIVE_MAJORITY]
                                   <= tolerance[consensus.branch == Branch.NEGATIVE_MAJORITY]))

    def test_task_order_does_not_change_a_single_bit(self):
        for _ in range(CASES):
            base, taus = random_instance(self.rng)
            order = self.rng.permutation(taus.shape[0])
            for mode in FusionMode:
                cfg = FusionConfig(mode=mode)
                fused, stats = fuse_block(base, taus, cfg)
                permuted, permuted_stats = fuse_block(base, taus[order], cfg)
                self.assertEqual(fused.tobytes(), permuted.tobytes())
                self.assertEqual(stats.active_histogram, permuted_stats.active_histogram)

    def test_matches_the_dense_oracle_in_every_mode(self):
        for index in range(CASES):
            base, taus = random_instance(self.rng)
            mode = list(FusionMode)[index % len(FusionMode)]
            cfg = FusionConfig(mode=mode, beta=float(self.rng.uniform(0.1, 5)))
            fused, _ = fuse_block(base, taus, cfg)
            expected = dense_oracle(base, taus, cfg)
            scale = np.abs(base) + np.abs(taus).sum(axis=0)
            self.assertTrue(np.all(np.abs(fused - expected) <= 1e-6 * scale + 1e-30), msg=f"case {index} {mode}")

    def test_no_filter_is_one_mean_gradient_step(self):
        eta = np.float32(0.05)
        for _ in range(CASES):
            base, taus = random_instance(self.rng)
            gradients = self.rng.normal(size=taus.shape).astype(np.float32)
            fused, _ = fuse_block(base, -eta * gradients, FusionConfig(mode=FusionMode.NO_FILTER))
            expected = base.astype(np.float64) - float(eta) * gradients.astype(np.float64).mean(axis=0)
            assert_allclose(fused, expected, rtol=0, atol=1e-6)

    def test_single_task_returns_base_plus_its_task_vector(self):
        for _ in range(CASES):
            base, taus = random_instance(self.rng, max_k=1)
            expected = base + taus[0]
            for mode in FusionMode:
                cfg = FusionConfig(mode=mode, beta=float(self.rng.uniform(0.01, 20)))
                fused, _ = fuse_block(base, taus, cfg)
                self.assertEqual(fused.tobytes(), expected.tobytes(), msg=f"{mode}")

    def test_branch_counts_sum_to_the_element_count(self):
        for _ in range(CASES):
            base, taus = random_instance(self.rng)
            _, stats = fuse_block(base, taus, FusionConfig())
            self.assertEqual(sum(stats.branch_counts.values()), base.size)
            self.assertEqual(sum(stats.active_histogram), base.size)
            self.assertEqual(stats.active_histogram[0], 0)

    def test_inverted_active_set_is_caught_by_the_oracle(self):
        base = np.zeros(3, dtype=np.float32)
        taus = stack_task_vectors([[0.2, -0.1, 0.3], [0.4, 0.1, -0.2], [-0.1, 0.2, 0.5]])
        cfg = FusionConfig(delta=1.5)
        broken, _ = fuse_block(base, taus, cfg, invert_active_set=True)
        self.assertFalse(np.allclose(broken, dense_oracle(base, taus, cfg), atol=1e-4))
