import json
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase
from scipy.integrate import trapezoid
from scipy.stats import norm

from .exceptions import AssessmentAbortedError, CaseValidationError, DomainError
from .gpe import Basis, KernelFamily
from .pipeline import (AssessmentMethod, apply_inputs, compare_results, config_from_dict, emulator_labels,
                       evaluate_margins, evaluation_designs, kde, load_config, load_scenario_case, run_assessment,
                       run_mc_benchmark, summary_stats, training_designs, write_comparison, write_outputs)

DATA_DIR = Path(__file__).resolve().parent / 'data'
SCENARIO_DIR = DATA_DIR / 'scenarios'


def scenario_document(name='two_bus', **overrides):
    data = json.loads((SCENARIO_DIR / f'{name}.json').read_text())
    data.update(overrides)
    return data


def two_bus_config(**overrides):
    return config_from_dict(scenario_document(**overrides), base_dir=SCENARIO_DIR)


def two_bus_margin(load_factor, wind_mw):
    # nose of the lossless line at 500 MW net load; growth follows the bus load
    return 500.0 + wind_mw - 100.0 * load_factor


class SummaryStatsTests(SimpleTestCase):
    """Test cases for summary statistics"""

    def test_small_vector(self):
        """Test mean, unbiased std and interpolated quantiles of [1, 2, 3]"""
        stats = summary_stats([1.0, 2.0, 3.0])
        self.assertEqual(stats['mean'], 2.0)
        self.assertEqual(stats['std'], 1.0)
        self.assertAlmostEqual(stats['q05'], 1.1)
        self.assertEqual(stats['q50'], 2.0)
        self.assertAlmostEqual(stats['q95'], 2.9)

    def test_constant_vector(self):
        """Test a constant vector has zero spread"""
        stats = summary_stats(np.full(50, 7.5))
        self.assertEqual(stats['std'], 0.0)
        self.assertEqual(stats['q05'], 7.5)

    def test_single_value(self):
        """Test that one sample gives zero std instead of NaN"""
        self.assertEqual(summary_stats([3.0])['std'], 0.0)

    def test_normal_quantiles(self):
        """Test the 5% quantile of standard-normal draws"""
        samples = np.random.default_rng(11).standard_normal(10_000)
        self.assertAlmostEqual(summary_stats(samples)['q05'], norm.ppf(0.05), delta=0.05)

    def test_empty_input(self):
        """Test that an empty sample is rejected"""
        with self.assertRaises(DomainError):
            summary_stats([])


class KdeTests(SimpleTestCase):
    """Test cases for the kernel density estimate"""

    def setUp(self):
        self.samples = np.random.default_rng(5).standard_normal(10_000)

    def test_normal_peak(self):
        """Test the peak density of standard-normal samples"""
        pdf = kde(self.samples)
        self.assertAlmostEqual(pdf[:, 1].max(), 1 / np.sqrt(2 * np.pi), delta=0.05 / np.sqrt(2 * np.pi))

    def test_integrates_to_one(self):
        """Test that the density integrates to one on its grid"""
        pdf = kde(self.samples)
        self.assertAlmostEqual(trapezoid(pdf[:, 1], pdf[:, 0]), 1.0, delta=1e-3)

    def test_grid(self):
        """Test the grid size and that it spans three bandwidths past the data"""
        h = 0.2
        pdf = kde(self.samples, bandwidth=h)
        self.assertEqual(pdf.shape, (512, 2))
        self.assertAlmostEqual(pdf[0, 0], self.samples.min() - 3 * h)
        self.assertAlmostEqual(pdf[-1, 0], self.samples.max() + 3 * h)
        self.assertTrue(np.all(pdf[:, 1] >= 0))

    def test_degenerate_samples_give_spike(self):
        """Test that constant samples return a unit-area triangle at the value"""
        pdf = kde(np.full(40, 250.0))
        self.assertEqual(pdf.shape, (3, 2))
        self.assertEqual(pdf[1, 0], 250.0)
        self.assertEqual(pdf[0, 1], 0.0)
        self.assertEqual(pdf[2, 1], 0.0)
        self.assertAlmostEqual(trapezoid(pdf[:, 1], pdf[:, 0]), 1.0, places=6)

    def test_too_few_samples(self):
        """Test that fewer than 30 samples are rejected"""
        with self.assertRaises(DomainError):
            kde(self.samples[:29])

    def test_invalid_bandwidth(self):
        """Test that a non-positive bandwidth is rejected"""
        with self.assertRaises(DomainError):
            kde(self.samples, bandwidth=0.0)


class ScenarioConfigTests(SimpleTestCase):
    """Test cases for reading and validating scenario documents"""

    def test_shipped_scenarios_are_valid(self):
        """Test that both shipped scenarios load"""
        for name in ('two_bus', 'ieee57_wind'):
            with self.subTest(scenario=name):
                config = load_config(SCENARIO_DIR / f'{name}.json')
                self.assertEqual(len(config.inputs), config.vine.dim)

    def test_fields(self):
        """Test the converted fields of the two-bus scenario"""
        config = load_config(SCENARIO_DIR / 'two_bus.json')
        self.assertEqual(config.name, 'two_bus')
        self.assertEqual(config.input_labels, ('load_factor', 'wind2'))
        self.assertTrue(config.inputs[0].is_load_factor)
        self.assertEqual(config.inputs[1].bus, 2)
        self.assertEqual(config.basis, Basis.LINEAR)
        self.assertEqual(config.kernel_family, KernelFamily.SQUARED_EXPONENTIAL)
        self.assertEqual(config.marginals[1].family.value, 'weibull')
        self.assertEqual(config.growth.mode, 'system')
        self.assertEqual(len(config.digest), 64)

    def test_relative_case_path(self):
        """Test that a relative case path resolves against the config directory"""
        config = load_config(SCENARIO_DIR / 'two_bus.json')
        self.assertEqual(config.case_path.resolve(), (DATA_DIR / 'case2.m').resolve())

    def test_digest_tracks_content(self):
        """Test that the config digest changes with any field"""
        self.assertEqual(two_bus_config().digest, two_bus_config().digest)
        self.assertNotEqual(two_bus_config().digest, two_bus_config(seed=8).digest)

    def test_kernel_object(self):
        """Test a kernel given as an object with a shape parameter"""
        config = two_bus_config(kernel={'family': 'rq', 'alpha': 0.5})
        self.assertEqual(config.kernel_family, KernelFamily.RATIONAL_QUADRATIC)
        self.assertEqual(config.kernel_alpha, 0.5)

    def test_dimension_mismatch(self):
        """Test that the input count must match the vine dimension"""
        data = scenario_document()
        data['inputs'].append({'name': 'wind_extra', 'bus': 2,
                               'marginal': {'family': 'weibull', 'shape': 2, 'scale': 5}})
        with self.assertRaises(ValidationError) as ctx:
            config_from_dict(data)
        self.assertIn('vine has dimension 2', str(ctx.exception))

    def test_too_few_training_points(self):
        """Test that n_train must exceed the basis width"""
        with self.assertRaises(ValidationError) as ctx:
            two_bus_config(n_train=3)
        self.assertIn('n_train must be at least 4', str(ctx.exception))

    def test_too_few_monte_carlo_samples(self):
        """Test the lower bound on n_mc"""
        with self.assertRaises(ValidationError):
            two_bus_config(n_mc=50)

    def test_unknown_kernel(self):
        """Test that an unknown kernel family is rejected"""
        with self.assertRaises(ValidationError) as ctx:
            two_bus_config(kernel='cubic')
        self.assertIn('Unknown kernel', str(ctx.exception))

    def test_unknown_basis(self):
        """Test that an unknown basis is rejected"""
        with self.assertRaises(ValidationError):
            two_bus_config(basis='cubic')

    def test_unknown_marginal(self):
        """Test that an unknown marginal family is rejected"""
        data = scenario_document()
        data['inputs'][1]['marginal'] = {'family': 'beta', 'a': 1, 'b': 2}
        with self.assertRaises(ValidationError):
            config_from_dict(data)

    def test_bad_bus_reference(self):
        """Test that an input bus must be an id or the load-factor marker"""
        data = scenario_document()
        data['inputs'][1]['bus'] = 'sixteen'
        with self.assertRaises(ValidationError):
            config_from_dict(data)

    def test_per_bus_needs_std(self):
        """Test that the per-bus load model requires load_std"""
        with self.assertRaises(ValidationError):
            two_bus_config(load_model='per-bus')

    def test_missing_field(self):
        """Test that a document without a seed is rejected"""
        data = scenario_document()
        del data['seed']
        with self.assertRaises(ValidationError) as ctx:
            config_from_dict(data)
        self.assertIn('seed', str(ctx.exception))

    def test_missing_file(self):
        """Test that a missing config file is a validation error"""
        with self.assertRaises(ValidationError):
            load_config(SCENARIO_DIR / 'missing.json')

    def test_invalid_json(self):
        """Test that malformed JSON is a validation error naming the line"""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'broken.json'
            path.write_text('{\n  "name": "broken",\n}')
            with self.assertRaises(ValidationError) as ctx:
                load_config(path)
        self.assertIn('line 3', str(ctx.exception))

    def test_document_must_be_object(self):
        """Test that a top-level JSON list is rejected"""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'list.json'
            path.write_text('[1, 2]')
            with self.assertRaises(ValidationError):
                load_config(path)

    def test_unknown_bus_in_case(self):
        """Test that a wind input at a bus missing from the case is rejected"""
        data = scenario_document()
        data['inputs'][1]['bus'] = 9
        config = config_from_dict(data, base_dir=SCENARIO_DIR)
        with self.assertRaises(CaseValidationError):
            load_scenario_case(config)

    def test_unknown_target_bus(self):
        """Test that the target bus must exist in the case"""
        with self.assertRaises(CaseValidationError):
            load_scenario_case(two_bus_config(target_bus=3))

    def test_per_bus_training_size_checked_against_case(self):
        """Test that per-bus load columns count towards the training-size requirement"""
        data = scenario_document('ieee57_wind', load_model='per-bus', load_std=0.05, n_train=15)
        config = config_from_dict(data, base_dir=SCENARIO_DIR)
        with self.assertRaises(ValidationError) as ctx:
            load_scenario_case(config)
        self.assertIn('n_train must be at least 96', str(ctx.exception))
        self.assertIn('47 emulator inputs', str(ctx.exception))

    def test_per_bus_training_size_met(self):
        """Test that a per-bus scenario with enough training points loads"""
        config = two_bus_config(load_model='per-bus', load_std=0.05, n_train=5)
        case = load_scenario_case(config)
        self.assertEqual(len(emulator_labels(config, case)), 3)


class ApplyInputsTests(SimpleTestCase):
    """Test cases for turning input rows into injections"""

    def setUp(self):
        self.config = two_bus_config()
        self.case = load_scenario_case(self.config)

    def test_identity_row(self):
        """Test that a unit load factor and no wind reproduce the base case"""
        injections = apply_inputs(self.case, [1.0, 0.0], self.config)
        np.testing.assert_array_equal(injections.p_load, [0.0, 100.0])
        np.testing.assert_array_equal(injections.p_extra, [0.0, 0.0])

    def test_load_factor_and_wind(self):
        """Test that the load factor scales loads and wind adds an injection"""
        injections = apply_inputs(self.case, [1.1, 20.0], self.config)
        np.testing.assert_allclose(injections.p_load, [0.0, 110.0])
        np.testing.assert_allclose(injections.q_load, [0.0, 0.0])
        np.testing.assert_allclose(injections.p_extra, [0.0, 20.0])

    def test_wind_cap(self):
        """Test that wind above the configured cap is clipped"""
        data = scenario_document()
        data['inputs'][1]['wind_cap_mw'] = 15
        config = config_from_dict(data, base_dir=SCENARIO_DIR)
        injections = apply_inputs(self.case, [1.0, 20.0], config)
        self.assertEqual(injections.p_extra[1], 15.0)

    def test_row_length(self):
        """Test that a row of the wrong length is rejected"""
        with self.assertRaises(DomainError):
            apply_inputs(self.case, [1.0], self.config)

    def test_unknown_bus(self):
        """Test that an input at a missing bus fails while applying"""
        data = scenario_document()
        data['inputs'][1]['bus'] = 9
        config = config_from_dict(data, base_dir=SCENARIO_DIR)
        with self.assertRaises(CaseValidationError):
            apply_inputs(self.case, [1.0, 5.0], config)

    def test_scenario_row(self):
        """Test a full 57-bus row: four wind buses and a global load scale"""
        config = load_config(SCENARIO_DIR / 'ieee57_wind.json')
        case = load_scenario_case(config)
        base = apply_inputs(case, [0.0, 0.0, 0.0, 0.0, 1.0], config)
        row = apply_inputs(case, [10.0, 4.0, 6.5, 2.0, 1.05], config)
        np.testing.assert_allclose(row.p_load, 1.05 * base.p_load)
        np.testing.assert_allclose(row.q_load, 1.05 * base.q_load)
        changed = {bus_id for bus_id, extra in zip((b.id for b in case.buses), row.p_extra) if extra}
        self.assertEqual(changed, {16, 17, 47, 48})
        self.assertEqual(row.p_extra[case.index_of[16]], 10.0)
        self.assertEqual(row.p_extra[case.index_of[48]], 2.0)

    def test_per_bus_load_model(self):
        """Test that per-bus multipliers follow the vine block"""
        config = two_bus_config(load_model='per-bus', load_std=0.05)
        self.assertEqual(emulator_labels(config, self.case), ('load_factor', 'wind2', 'load_2'))
        injections = apply_inputs(self.case, [1.0, 0.0, 1.2], config)
        np.testing.assert_allclose(injections.p_load, [0.0, 120.0])
        with self.assertRaises(DomainError):
            apply_inputs(self.case, [1.0, 0.0], config)

    def test_per_bus_designs(self):
        """Test that per-bus designs carry one extra column per loaded bus"""
        config = two_bus_config(load_model='per-bus', load_std=0.05)
        designs = training_designs(config, self.case)
        self.assertEqual(designs['physical'].values.shape, (12, 3))
        self.assertEqual(designs['physical'].column_labels, ('load_factor', 'wind2', 'load_2'))
        self.assertIn('per_bus_uniform', designs)


class EvaluateMarginsTests(SimpleTestCase):
    """Test cases for batch CPF evaluation"""

    def test_two_bus_closed_form(self):
        """Test CPF margins against the lossless-line closed form"""
        config = two_bus_config()
        case = load_scenario_case(config)
        rows = np.array([[1.0, 0.0], [0.9, 10.0], [1.1, 3.0]])
        margins = evaluate_margins(case, config, rows)
        for row, margin in zip(rows, margins):
            self.assertAlmostEqual(margin, two_bus_margin(*row), delta=2e-3 * two_bus_margin(*row))

    def test_failed_rows_are_none(self):
        """Test that an infeasible row comes back as None in place"""
        config = two_bus_config()
        case = load_scenario_case(config)
        margins = evaluate_margins(case, config, np.array([[1.0, 0.0], [6.0, 0.0]]))
        self.assertIsNotNone(margins[0])
        self.assertIsNone(margins[1])


class TwoBusAssessmentTests(SimpleTestCase):
    """Test cases for the surrogate and benchmark runs on the two-bus scenario"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.config = two_bus_config()
        cls.gpe = run_assessment(cls.config)
        cls.mc = run_mc_benchmark(cls.config)

    def test_result_shapes(self):
        """Test margin counts, methods and the timing ledger"""
        self.assertEqual(self.gpe.method, AssessmentMethod.GPE)
        self.assertEqual(self.mc.method, AssessmentMethod.DIRECT_MC)
        self.assertEqual(self.gpe.margins.shape, (200,))
        self.assertEqual(self.mc.margins.shape, (200,))
        self.assertEqual(self.gpe.training_margins.shape, (12,))
        for key in ('t_train_cpf', 't_gpe_train', 't_gpe_eval', 't_total'):
            self.assertGreaterEqual(self.gpe.timing[key], 0.0)
        self.assertGreater(self.mc.timing['t_mc_cpf'], 0.0)

    def test_seed_matched_samples(self):
        """Test that both methods evaluate the same physical samples"""
        self.assertEqual(self.gpe.sample_digest, self.mc.sample_digest)
        np.testing.assert_array_equal(self.gpe.designs['evaluation_physical'].values,
                                      self.mc.designs['evaluation_physical'].values)

    def test_means_agree(self):
        """Test the surrogate mean against the direct Monte Carlo mean"""
        self.assertAlmostEqual(self.gpe.stats['mean'], self.mc.stats['mean'], delta=0.005 * self.mc.stats['mean'])

    def test_benchmark_matches_closed_form(self):
        """Test the Monte Carlo margins against the lossless-line closed form"""
        physical = self.mc.designs['evaluation_physical'].values
        expected = two_bus_margin(physical[:, 0], physical[:, 1])
        np.testing.assert_allclose(self.mc.margins, expected, rtol=2e-3)
        self.assertEqual(self.mc.n_excluded, 0)
        self.assertEqual(self.mc.exclusion_rate, 0.0)

    def test_pdfs_integrate_to_one(self):
        """Test that both densities integrate to one"""
        for result in (self.gpe, self.mc):
            with self.subTest(method=result.method.value):
                pdf = result.pdf_points
                self.assertAlmostEqual(trapezoid(pdf[:, 1], pdf[:, 0]), 1.0, delta=1e-3)

    def test_comparison(self):
        """Test the comparison report between the two methods"""
        comparison = compare_results(self.gpe, self.mc)
        self.assertEqual(set(comparison), {'rel_mean_diff', 'rel_std_diff', 'ks_statistic', 'speedup',
                                           'same_samples', 'mc_exclusion_rate'})
        self.assertTrue(comparison['same_samples'])
        self.assertLess(comparison['rel_mean_diff'], 0.005)
        self.assertLessEqual(comparison['ks_statistic'], 1.0)

    def test_summary(self):
        """Test the summary document of each method"""
        summary = self.gpe.summary()
        self.assertEqual(summary['method'], 'gpe')
        self.assertEqual(summary['kernel'], 'se')
        self.assertEqual(summary['basis'], 'linear')
        self.assertEqual(summary['n_samples'], 200)
        self.assertNotIn('kernel', self.mc.summary())

    def test_output_files(self):
        """Test the names and headers of the files written for each method"""
        with tempfile.TemporaryDirectory() as tmp:
            written = {path.name for path in write_outputs(self.gpe, tmp)}
            written |= {path.name for path in write_outputs(self.mc, tmp)}
            written.add(write_comparison(compare_results(self.gpe, self.mc), tmp).name)
            on_disk = {path.name for path in Path(tmp).iterdir()}
            margins_header = (Path(tmp) / 'margins_gpe.csv').read_text().splitlines()[0]
            pdf_header = (Path(tmp) / 'pdf_mc.csv').read_text().splitlines()[0]
            summary = json.loads((Path(tmp) / 'summary_mc.json').read_text())
        for name in ('margins_gpe.csv', 'pdf_gpe.csv', 'summary_gpe.json', 'emulator_se.json',
                     'design_training_physical.csv', 'design_evaluation_uniform_correlated.csv',
                     'margins_mc.csv', 'pdf_mc.csv', 'summary_mc.json', 'comparison.json'):
            self.assertIn(name, written)
        self.assertIn('design_training_physical.json', on_disk)
        self.assertEqual(margins_header, 'margin_mw')
        self.assertEqual(pdf_header, 'margin_mw,density')
        self.assertEqual(summary['method'], 'mc')

    def test_zero_samples(self):
        """Test that the benchmark refuses an empty evaluation sample"""
        with self.assertRaises(DomainError):
            run_mc_benchmark(replace(self.config, n_mc=0))
        with self.assertRaises(DomainError):
            evaluation_designs(replace(self.config, n_mc=0), load_scenario_case(self.config))


class DeterminismTests(SimpleTestCase):
    """Test cases for reproducible runs"""

    def test_outputs_are_byte_identical(self):
        """Test that two runs of one config write identical CSV files"""
        config = two_bus_config(n_mc=150)
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            write_outputs(run_assessment(config), first)
            write_outputs(run_assessment(config), second)
            names = sorted(path.name for path in Path(first).glob('*.csv'))
            self.assertIn('margins_gpe.csv', names)
            for name in names:
                with self.subTest(file=name):
                    self.assertEqual((Path(first) / name).read_bytes(), (Path(second) / name).read_bytes())

    def test_seed_changes_samples(self):
        """Test that another seed evaluates other samples"""
        config = two_bus_config()
        case = load_scenario_case(config)
        a = evaluation_designs(config, case)['physical']
        b = evaluation_designs(replace(config, seed=8), case)['physical']
        self.assertFalse(np.array_equal(a.values, b.values))


class DegenerateScenarioTests(SimpleTestCase):
    """Test cases for scenarios at the edges of the input space"""

    def test_deterministic_inputs_collapse(self):
        """Test that near-zero input variance gives a near-zero margin spread"""
        data = scenario_document(
            n_mc=100, basis='constant',
            vine={'kind': 'D', 'dim': 2, 'edges': [{'tree': 1, 'index': 1, 'family': 'independence'}]},
        )
        data['inputs'][0]['marginal'] = {'family': 'gaussian', 'mean': 1.0, 'std': 1e-9, 'units': 'pu'}
        data['inputs'][1]['marginal'] = {'family': 'gaussian', 'mean': 10.0, 'std': 1e-9}
        result = run_assessment(config_from_dict(data, base_dir=SCENARIO_DIR))
        self.assertLess(result.stats['std'], 1e-3 * result.stats['mean'])
        self.assertAlmostEqual(result.stats['mean'], two_bus_margin(1.0, 10.0), delta=0.5)
        peak = result.pdf_points[np.argmax(result.pdf_points[:, 1]), 0]
        self.assertAlmostEqual(peak, result.stats['mean'], delta=0.5)

    def test_infeasible_base_case_aborts(self):
        """Test that a load factor past the nose for every sample aborts the run"""
        data = scenario_document()
        data['inputs'][0]['marginal'] = {'family': 'gaussian', 'mean': 6.0, 'std': 1e-3, 'units': 'pu'}
        with self.assertRaises(AssessmentAbortedError):
            run_assessment(config_from_dict(data, base_dir=SCENARIO_DIR))


@pytest.mark.slow
class ScenarioAcceptanceTests(SimpleTestCase):
    """Test cases comparing surrogate and benchmark on the 57-bus wind scenario"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.config = replace(load_config(SCENARIO_DIR / 'ieee57_wind.json'), n_mc=2000)
        cls.case = load_scenario_case(cls.config)
        cls.mc = run_mc_benchmark(cls.config, case=cls.case)

    def test_surrogate_fidelity(self):
        """Test mean, std and KS agreement for both acceptance kernels"""
        for family in (KernelFamily.MATERN32, KernelFamily.SQUARED_EXPONENTIAL):
            with self.subTest(kernel=family.value):
                gpe = run_assessment(replace(self.config, kernel_family=family), case=self.case)
                comparison = compare_results(gpe, self.mc)
                self.assertTrue(comparison['same_samples'])
                self.assertLessEqual(comparison['rel_mean_diff'], 0.01)
                self.assertLessEqual(comparison['rel_std_diff'], 0.10)
                self.assertLessEqual(comparison['ks_statistic'], 0.10)
                self.assertGreaterEqual(comparison['speedup'], 100.0)

    def test_benchmark_exclusions(self):
        """Test that nearly every benchmark sample converged"""
        self.assertLess(self.mc.exclusion_rate, 0.01)
