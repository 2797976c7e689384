import numpy as np
from django.test import SimpleTestCase

from dice import fixtures
from dice.fusion import FusionConfig, FusionMode
from dice.simulation import MagnitudeDist
from dice.validation import (
    GAP_KS,
    GAP_PS,
    GAP_TRIALS,
    check_hoeffding_conformance,
    check_oracle_equivalence,
    check_roundtrip_io,
    check_worked_example,
    dense_oracle,
    run_checks,
)


class DenseOracleTests(SimpleTestCase):
    def test_worked_example(self):
        base = fixtures.BASE['dense.weight']
        taus = fixtures.TASK_VECTORS
        expected = fixtures.EXPECTED_FULL['dense.weight']
        taus_weight = np.array([tau['dense.weight'] for tau in taus], dtype=np.float32)
        cfg = FusionConfig(delta=fixtures.DELTA, beta=fixtures.BETA)
        np.testing.assert_allclose(dense_oracle(base, taus_weight, cfg), expected, atol=1e-4)

    def test_no_weight_sums_the_active_set(self):
        taus = np.array([[0.2], [0.4], [-0.1]], dtype=np.float32)
        result = dense_oracle([1.0], taus, FusionConfig(mode=FusionMode.NO_WEIGHT))
        self.assertAlmostEqual(float(result[0]), 1.6, places=6)


class RunChecksTests(SimpleTestCase):
    def test_every_check_passes(self):
        results = run_checks(seed=3, instances=100)
        self.assertEqual([r.name for r in results],
                         ['oracle_equivalence', 'worked_example', 'hoeffding_conformance', 'roundtrip_io', 'invariants'])
        for result in results:
            self.assertTrue(result.passed, msg=f"{result.name}: {result.detail}")

    def test_individual_checks(self):
        self.assertTrue(check_worked_example()[0])
        self.assertTrue(check_roundtrip_io(seed=8)[0])

    def test_inverted_active_set_is_detected(self):
        passed, detail = check_oracle_equivalence(seed=0, instances=100, inject_fault=True)
        self.assertFalse(passed)
        self.assertIn('disagree', detail)

    def test_injected_fault_fails_only_the_oracle_check(self):
        results = {r.name: r.passed for r in run_checks(seed=0, instances=50, inject_fault=True)}
        self.assertFalse(results.pop('oracle_equivalence'))
        self.assertTrue(all(results.values()))


class HoeffdingConformanceTests(SimpleTestCase):
    def test_heavy_tailed_grid_shows_a_strict_averaging_gap(self):
        self.assertEqual((GAP_KS, GAP_PS, GAP_TRIALS), ((5, 9, 15), (0.6, 0.7), 200_000))
        passed, detail = check_hoeffding_conformance(seed=0)
        self.assertTrue(passed, msg=detail)
        self.assertIn('strictly worse', detail)

    def test_unit_magnitudes_leave_no_averaging_gap(self):
        # odd K with unit magnitudes: the mean's sign is the majority vote, so the gap is zero
        passed, detail = check_hoeffding_conformance(seed=0, magnitudes=MagnitudeDist('unit'))
        self.assertFalse(passed)
        self.assertIn('within band', detail)
