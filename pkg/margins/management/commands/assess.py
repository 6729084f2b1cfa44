from pathlib import Path

from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from margins.exceptions import NumericalError
from margins.pipeline import (compare_results, config_from_dict, load_scenario_case, read_scenario_document,
                              run_assessment, run_mc_benchmark, write_comparison, write_outputs)
from margins.utils import record_assessment

CONFIG_ERROR = 2
NUMERICAL_ERROR = 3


class Command(BaseCommand):
    help = 'Run a probabilistic load-margin assessment (surrogate, direct Monte Carlo or both)'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Scenario JSON file')
        parser.add_argument('--method', choices=['gpe', 'mc', 'both'], default='gpe')
        parser.add_argument('--seed', type=int, help='Override the scenario seed')
        parser.add_argument('--out', help='Output directory (default: the scenario output_dir)')
        parser.add_argument('--kernel', help='Override the scenario kernel family (se, exponential, rq, matern32)')
        parser.add_argument('--workers', type=int, help='Worker processes for CPF evaluations')
        parser.add_argument('--record', action='store_true', help='Store each result in the run ledger')

    def handle(self, *args, **options):
        try:
            config = self._config(options)
            case = load_scenario_case(config)
            out_dir = Path(options['out']) if options['out'] else config.output_dir

            results = {}
            if options['method'] in ('gpe', 'both'):
                results['gpe'] = run_assessment(config, workers=options['workers'], case=case)
            if options['method'] in ('mc', 'both'):
                results['mc'] = run_mc_benchmark(config, workers=options['workers'], case=case)
        except ValidationError as exc:
            raise CommandError(f'Invalid configuration: {"; ".join(exc.messages)}', returncode=CONFIG_ERROR)
        except NumericalError as exc:
            raise CommandError(f'Numerical failure: {exc}', returncode=NUMERICAL_ERROR)

        for method, result in results.items():
            write_outputs(result, out_dir)
            stats = result.stats
            self.stdout.write(
                f'{method}: mean={stats["mean"]:.4f} MW std={stats["std"]:.4f} MW '
                f'q05={stats["q05"]:.4f} q50={stats["q50"]:.4f} q95={stats["q95"]:.4f} '
                f'({result.timing["t_total"]:.2f}s)'
            )
            if options['record']:
                record_assessment(result, config, out_dir)

        if len(results) == 2:
            comparison = compare_results(results['gpe'], results['mc'])
            write_comparison(comparison, out_dir)
            self.stdout.write(
                f'comparison: rel_mean_diff={comparison["rel_mean_diff"]:.4%} '
                f'rel_std_diff={comparison["rel_std_diff"]:.4%} ks={comparison["ks_statistic"]:.4f} '
                f'speedup={comparison["speedup"]:.0f}x'
            )
        self.stdout.write(self.style.SUCCESS(f'Outputs written to {out_dir}'))

    def _config(self, options):
        # overrides go into the document so the digest describes the run
        path = Path(options['config'])
        data = read_scenario_document(path)
        if options['seed'] is not None:
            data['seed'] = options['seed']
        if options['kernel']:
            kernel = data.get('kernel')
            data['kernel'] = {**kernel, 'family': options['kernel']} if isinstance(kernel, dict) else options['kernel']
        return config_from_dict(data, base_dir=path.parent)
