import json
from datetime import timedelta
from pathlib import Path

import numpy as np
from django.test import TestCase, Client
from django.urls import reverse
from django.utils import timezone

from .forms import ScenarioConfigForm
from .gpe import Basis, KernelFamily, train
from .models import AssessmentRun
from .pipeline import AssessmentMethod, AssessmentResult, _timing, config_from_dict, summary_stats
from .utils import record_assessment

SCENARIO_DIR = Path(__file__).resolve().parent / 'data' / 'scenarios'


def two_bus_document(**overrides):
    data = json.loads((SCENARIO_DIR / 'two_bus.json').read_text())
    data.update(overrides)
    return data


def make_run(**overrides):
    fields = dict(
        scenario='two_bus', method='gpe', kernel='se', basis='linear', n_train=12, n_mc=200, seed=7,
        mean_mw=396.1, std_mw=6.2, q05_mw=386.0, q50_mw=396.0, q95_mw=406.5,
        timing={'t_total': 1.5}, sample_digest='a' * 64,
    )
    fields.update(overrides)
    return AssessmentRun.objects.create(**fields)


class AssessmentRunModelTests(TestCase):
    """Test cases for the AssessmentRun model"""

    def test_create_run(self):
        """Test creating a run with its defaults"""
        run = make_run()
        self.assertEqual(run.exclusion_rate, 0.0)
        self.assertEqual(run.config_digest, '')
        self.assertIsNotNone(run.created_at)

    def test_string_representation(self):
        """Test the string representation of a run"""
        self.assertEqual(str(make_run()), 'two_bus [gpe] mean=396.100 MW')

    def test_as_dict(self):
        """Test the JSON-ready dictionary of a run"""
        run = make_run()
        data = run.as_dict()
        self.assertEqual(data['id'], run.pk)
        self.assertEqual(data['stats'], {'mean': 396.1, 'std': 6.2, 'q05': 386.0, 'q50': 396.0, 'q95': 406.5})
        self.assertEqual(data['timing'], {'t_total': 1.5})
        json.dumps(data)

    def test_newest_first(self):
        """Test that runs are ordered newest first"""
        older = make_run(scenario='older', created_at=timezone.now() - timedelta(hours=1))
        newer = make_run(scenario='newer')
        self.assertEqual(list(AssessmentRun.objects.all()), [newer, older])


class RecordAssessmentTests(TestCase):
    """Test cases for storing results in the run ledger"""

    def setUp(self):
        self.config = config_from_dict(two_bus_document(), base_dir=SCENARIO_DIR)
        self.margins = np.linspace(380.0, 410.0, 40)

    def test_record_benchmark(self):
        """Test recording a direct Monte Carlo result"""
        result = AssessmentResult(
            method=AssessmentMethod.DIRECT_MC, margins=self.margins, stats=summary_stats(self.margins),
            pdf_points=np.empty((0, 2)), timing=_timing(t_mc_cpf=3.0, t_total=3.1), sample_digest='b' * 64,
            n_excluded=10,
        )
        run = record_assessment(result, self.config, '/tmp/out')
        self.assertEqual(run.method, 'mc')
        self.assertEqual(run.kernel, '')
        self.assertEqual(run.n_train, 0)
        self.assertEqual(run.n_mc, 200)
        self.assertEqual(run.exclusion_rate, 0.2)
        self.assertEqual(run.config_digest, self.config.digest)
        self.assertEqual(run.output_dir, '/tmp/out')
        self.assertAlmostEqual(run.mean_mw, 395.0)

    def test_record_surrogate(self):
        """Test recording a surrogate result with its emulator settings"""
        rng = np.random.default_rng(0)
        x = rng.uniform(size=(8, 2))
        emulator = train(x, 3.0 + x @ [1.0, -2.0], Basis.LINEAR, KernelFamily.MATERN32)
        result = AssessmentResult(
            method=AssessmentMethod.GPE, margins=self.margins, stats=summary_stats(self.margins),
            pdf_points=np.empty((0, 2)), timing=_timing(), sample_digest='c' * 64, emulator=emulator,
        )
        run = record_assessment(result, self.config)
        run.refresh_from_db()
        self.assertEqual(run.kernel, 'matern32')
        self.assertEqual(run.basis, 'linear')
        self.assertEqual(run.n_train, 12)
        self.assertEqual(run.timing['t_gpe_eval'], 0.0)


class ScenarioConfigFormTests(TestCase):
    """Test cases for the ScenarioConfigForm"""

    def test_valid_form(self):
        """Test the shipped two-bus document validates"""
        form = ScenarioConfigForm(data=two_bus_document())
        self.assertTrue(form.is_valid(), form.errors)
        self.assertEqual(form.cleaned_data['inputs'][0]['bus'], None)
        self.assertEqual(form.cleaned_data['kernel']['family'], KernelFamily.SQUARED_EXPONENTIAL)
        self.assertEqual(form.cleaned_data['growth'],
                         {'mode': 'system', 'bus': None, 'power_factor': 'constant'})

    def test_basis_spelling(self):
        """Test that the basis name is normalised"""
        form = ScenarioConfigForm(data=two_bus_document(basis='Pure-Quadratic', n_train=12))
        self.assertTrue(form.is_valid(), form.errors)
        self.assertEqual(form.cleaned_data['basis'], Basis.PURE_QUADRATIC)

    def test_duplicate_input_names(self):
        """Test that input names must be unique"""
        data = two_bus_document()
        data['inputs'][1]['name'] = 'load_factor'
        form = ScenarioConfigForm(data=data)
        self.assertFalse(form.is_valid())
        self.assertIn('inputs', form.errors)

    def test_empty_inputs(self):
        """Test that an empty input list is rejected"""
        form = ScenarioConfigForm(data=two_bus_document(inputs=[]))
        self.assertFalse(form.is_valid())

    def test_negative_wind_cap(self):
        """Test that a wind cap must be non-negative"""
        data = two_bus_document()
        data['inputs'][1]['wind_cap_mw'] = -1
        self.assertFalse(ScenarioConfigForm(data=data).is_valid())

    def test_bus_growth_needs_bus(self):
        """Test that bus growth mode names its bus"""
        form = ScenarioConfigForm(data=two_bus_document(growth={'mode': 'bus'}))
        self.assertFalse(form.is_valid())
        self.assertIn('growth', form.errors)

    def test_unknown_power_factor(self):
        """Test that only constant and unity power factors are accepted"""
        form = ScenarioConfigForm(data=two_bus_document(growth={'power_factor': 'lagging'}))
        self.assertFalse(form.is_valid())

    def test_invalid_vine(self):
        """Test that a vine parameter outside its family range is rejected"""
        vine = {'kind': 'D', 'dim': 2, 'edges': [{'tree': 1, 'index': 1, 'family': 'gaussian', 'parameter': 1.5}]}
        form = ScenarioConfigForm(data=two_bus_document(vine=vine))
        self.assertFalse(form.is_valid())
        self.assertIn('vine', form.errors)

    def test_kernel_alpha(self):
        """Test that the kernel shape parameter must be positive"""
        form = ScenarioConfigForm(data=two_bus_document(kernel={'family': 'rq', 'alpha': 0}))
        self.assertFalse(form.is_valid())
        self.assertIn('kernel', form.errors)


class ViewTests(TestCase):
    """Test cases for the run ledger views"""

    def setUp(self):
        self.client = Client()

    def test_run_list(self):
        """Test the list view returns recent runs newest first"""
        make_run(scenario='first', created_at=timezone.now() - timedelta(hours=1))
        make_run(scenario='second')
        response = self.client.get(reverse('margins:run_list'))
        self.assertEqual(response.status_code, 200)
        runs = response.json()['runs']
        self.assertEqual([run['scenario'] for run in runs], ['second', 'first'])

    def test_run_list_is_capped(self):
        """Test that the list view returns at most ten runs"""
        for i in range(12):
            make_run(scenario=f'run{i}')
        response = self.client.get(reverse('margins:run_list'))
        self.assertEqual(len(response.json()['runs']), 10)

    def test_empty_list(self):
        """Test the list view without any runs"""
        response = self.client.get(reverse('margins:run_list'))
        self.assertEqual(response.json(), {'runs': []})

    def test_run_detail(self):
        """Test the detail view of one run"""
        run = make_run()
        response = self.client.get(reverse('margins:run_detail', args=[run.pk]))
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.json()['sample_digest'], 'a' * 64)

    def test_run_detail_not_found(self):
        """Test the detail view of a missing run"""
        response = self.client.get(reverse('margins:run_detail', args=[999]))
        self.assertEqual(response.status_code, 404)

    def test_post_not_allowed(self):
        """Test that the ledger is read-only over HTTP"""
        response = self.client.post(reverse('margins:run_list'))
        self.assertEqual(response.status_code, 405)
