import json
import tempfile
from pathlib import Path

import numpy as np
import pytest
from django.test import SimpleTestCase
from scipy import stats

from .exceptions import DomainError, StageError
from .sampling import (DesignMatrix, DesignStage, correlate, design_digest, lhs, marginals_digest, mc_uniform,
                       rng_for, to_physical, write_design_csv)
from .uncertainty import (CopulaFamily, Marginal, PairCopula, VineEdge, VineKind, VineSpec, default_scenario_vine,
                          independence_vine)

SCENARIO_MARGINALS = [
    Marginal.weibull(2.06, 7.41),
    Marginal.weibull(2.1, 7.2),
    Marginal.weibull(2.06, 7.41),
    Marginal.weibull(2.3, 7.2),
    Marginal.gaussian(1.0, 0.05, units='pu'),
]


def gaussian_pair(rho=0.5):
    return VineSpec(VineKind.DVINE, 2, (VineEdge(1, 1, PairCopula(CopulaFamily.GAUSSIAN, rho)),))


class LatinHypercubeTests(SimpleTestCase):
    """Test cases for Latin hypercube designs"""

    def test_one_point_per_stratum(self):
        """Test every column has exactly one value per equal-width stratum"""
        for n, p in ((10, 2), (15, 5), (37, 3)):
            design = lhs(n, p, seed=2024)
            with self.subTest(n=n, p=p):
                self.assertEqual(design.values.shape, (n, p))
                for j in range(p):
                    strata = np.floor(design.values[:, j] * n).astype(int)
                    self.assertEqual(sorted(strata.tolist()), list(range(n)))

    def test_single_point(self):
        """Test that n=1 gives one point strictly inside the unit cube"""
        values = lhs(1, 4, seed=0).values
        self.assertEqual(values.shape, (1, 4))
        self.assertTrue(np.all((values > 0) & (values < 1)))

    def test_reproducible(self):
        """Test that a fixed seed gives an identical matrix"""
        first = lhs(15, 5, seed=2024)
        second = lhs(15, 5, seed=2024)
        np.testing.assert_array_equal(first.values, second.values)
        self.assertEqual(design_digest(first), design_digest(second))

    def test_seed_and_stream_change_design(self):
        """Test that a different seed or stream gives a different matrix"""
        base = lhs(15, 5, seed=2024).values
        self.assertFalse(np.array_equal(base, lhs(15, 5, seed=2025).values))
        self.assertFalse(np.array_equal(base, lhs(15, 5, seed=2024, stream='evaluation').values))

    def test_stage_and_labels(self):
        """Test the design starts at the independent-uniform stage with default labels"""
        design = lhs(4, 2, seed=1)
        self.assertEqual(design.stage, DesignStage.UNIFORM_IID)
        self.assertEqual(design.column_labels, ('x1', 'x2'))
        self.assertEqual(design.seed, 1)

    def test_invalid_size(self):
        """Test that empty designs are rejected"""
        with self.assertRaises(DomainError):
            lhs(0, 2, seed=1)
        with self.assertRaises(DomainError):
            lhs(5, 0, seed=1)


class MonteCarloTests(SimpleTestCase):
    """Test cases for plain Monte Carlo designs"""

    def test_column_means(self):
        """Test column means lie within three standard errors of one half"""
        design = mc_uniform(10_000, 5, seed=3)
        bound = 3 * 0.5 / np.sqrt(10_000)
        self.assertTrue(np.all(np.abs(design.values.mean(axis=0) - 0.5) < bound))

    def test_reproducible(self):
        """Test that a fixed seed reproduces the design"""
        np.testing.assert_array_equal(mc_uniform(50, 3, seed=9).values, mc_uniform(50, 3, seed=9).values)

    def test_empty_design(self):
        """Test that n=0 is a valid empty design"""
        design = mc_uniform(0, 5, seed=1)
        self.assertEqual(design.values.shape, (0, 5))
        self.assertEqual(correlate(design, default_scenario_vine()).n, 0)

    def test_unknown_stream(self):
        """Test that an unknown RNG stream is rejected"""
        with self.assertRaises(DomainError):
            rng_for(1, 'validation')

    def test_streams_are_independent(self):
        """Test that training and evaluation streams of one seed differ"""
        a = rng_for(5, 'training').uniform(size=4)
        b = rng_for(5, 'evaluation').uniform(size=4)
        self.assertFalse(np.array_equal(a, b))


class TransformChainTests(SimpleTestCase):
    """Test cases for the uniform to correlated to physical chain"""

    def test_independence_vine_leaves_values(self):
        """Test that correlating with the independence vine changes only the stage"""
        design = lhs(20, 3, seed=4)
        correlated = correlate(design, independence_vine(3))
        np.testing.assert_array_equal(correlated.values, design.values)
        self.assertEqual(correlated.stage, DesignStage.UNIFORM_CORRELATED)

    def test_correlated_lhs_tau(self):
        """Test a Gaussian vine on a Latin hypercube gives tau near one third"""
        correlated = correlate(lhs(1000, 2, seed=8), gaussian_pair())
        tau = stats.kendalltau(correlated.values[:, 0], correlated.values[:, 1])[0]
        self.assertAlmostEqual(tau, 1 / 3, delta=0.05)

    def test_correlate_twice(self):
        """Test that correlating an already correlated design is a stage error"""
        correlated = correlate(lhs(5, 2, seed=1), gaussian_pair())
        with self.assertRaises(StageError):
            correlate(correlated, gaussian_pair())

    def test_dimension_mismatch(self):
        """Test that the design width must match the vine"""
        with self.assertRaises(DomainError):
            correlate(lhs(5, 3, seed=1), gaussian_pair())

    def test_physical_medians(self):
        """Test Gaussian and Weibull quantiles at known uniforms"""
        design = DesignMatrix([[0.5, 1 - np.exp(-1)]], DesignStage.UNIFORM_CORRELATED, seed=0)
        physical = to_physical(design, [Marginal.gaussian(100, 5), Marginal.weibull(2.06, 7.41)])
        np.testing.assert_allclose(physical.values, [[100.0, 7.41]], rtol=1e-12)
        self.assertEqual(physical.stage, DesignStage.PHYSICAL)
        self.assertEqual(len(physical.marginals_digest), 64)

    def test_physical_twice(self):
        """Test that a physical design cannot be transformed again"""
        design = to_physical(lhs(5, 1, seed=1), [Marginal.gaussian(0, 1)])
        with self.assertRaises(StageError):
            to_physical(design, [Marginal.gaussian(0, 1)])

    def test_marginal_count(self):
        """Test that one marginal per column is required"""
        with self.assertRaises(DomainError):
            to_physical(lhs(5, 2, seed=1), [Marginal.gaussian(0, 1)])

    def test_physical_is_monotone(self):
        """Test that sorting order survives the physical transform per column"""
        design = correlate(lhs(200, 5, seed=12), default_scenario_vine())
        physical = to_physical(design, SCENARIO_MARGINALS)
        for j in range(5):
            np.testing.assert_array_equal(np.argsort(design.values[:, j]), np.argsort(physical.values[:, j]))

    def test_labels_follow_the_chain(self):
        """Test that column labels travel through every stage"""
        labels = ('load', 'wind')
        design = lhs(6, 2, seed=1, column_labels=labels)
        physical = to_physical(correlate(design, gaussian_pair()),
                               [Marginal.gaussian(1, 0.05), Marginal.weibull(2, 5)])
        self.assertEqual(physical.column_labels, labels)

    def test_values_are_read_only(self):
        """Test that design values cannot be modified in place"""
        design = lhs(3, 2, seed=1)
        with self.assertRaises(ValueError):
            design.values[0, 0] = 0.5

    def test_values_must_be_two_dimensional(self):
        """Test that a vector is not a design"""
        with self.assertRaises(DomainError):
            DesignMatrix(np.ones(3), DesignStage.UNIFORM_IID, seed=0)

    @pytest.mark.slow
    def test_correlation_preserves_uniform_margins(self):
        """Test each correlated column stays uniform under a KS test at the 1% level"""
        n = 50_000
        design = correlate(mc_uniform(n, 5, seed=21), default_scenario_vine())
        critical = 1.628 / np.sqrt(n)
        for j in range(5):
            with self.subTest(column=j):
                self.assertLess(stats.kstest(design.values[:, j], 'uniform').statistic, critical)

    @pytest.mark.slow
    def test_physical_means(self):
        """Test empirical means of the scenario inputs against their analytic means"""
        n = 50_000
        design = to_physical(correlate(mc_uniform(n, 5, seed=22), default_scenario_vine()), SCENARIO_MARGINALS)
        for j, marginal in enumerate(SCENARIO_MARGINALS):
            with self.subTest(column=j):
                standard_error = marginal.std / np.sqrt(n)
                self.assertLess(abs(design.values[:, j].mean() - marginal.mean), 3 * standard_error)


class DesignExportTests(SimpleTestCase):
    """Test cases for the CSV export and its sidecar"""

    def test_csv_and_sidecar(self):
        """Test the CSV header and the metadata written next to it"""
        marginals = [Marginal.gaussian(1, 0.05), Marginal.weibull(2, 5)]
        design = to_physical(lhs(4, 2, seed=7, column_labels=('load', 'wind')), marginals)
        with tempfile.TemporaryDirectory() as tmp:
            path = write_design_csv(design, Path(tmp) / 'design_training.csv')
            lines = path.read_text().splitlines()
            sidecar = json.loads(path.with_suffix('.json').read_text())
            loaded = np.loadtxt(path, delimiter=',', skiprows=1)
        self.assertEqual(lines[0], 'load,wind')
        self.assertEqual(len(lines), 5)
        np.testing.assert_array_equal(loaded, design.values)
        self.assertEqual(sidecar['stage'], 'physical')
        self.assertEqual(sidecar['seed'], 7)
        self.assertEqual(sidecar['marginals_digest'], marginals_digest(marginals))
        self.assertEqual(sidecar['values_digest'], design_digest(design))

    def test_digest_depends_on_labels(self):
        """Test that relabelled but equal values give a different digest"""
        design = lhs(3, 2, seed=1)
        relabelled = design.with_values(design.values, design.stage, column_labels=('a', 'b'))
        self.assertNotEqual(design_digest(design), design_digest(relabelled))
