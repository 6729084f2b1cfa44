from pathlib import Path

from django.conf import settings
from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from margins.cpf import ContinuationOptions, bisect_loadability, load_margin, trace_continuation, trace_to_csv
from margins.exceptions import NumericalError
from margins.pipeline import apply_inputs, evaluation_designs, growth_direction, load_config, load_scenario_case

from .assess import CONFIG_ERROR, NUMERICAL_ERROR


class Command(BaseCommand):
    help = 'Trace and export the PV curve for one row of the evaluation design'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Scenario JSON file')
        parser.add_argument('--sample', type=int, default=0, help='Row of the evaluation design')
        parser.add_argument('--out', help='Output directory (default: the scenario output_dir)')
        parser.add_argument('--past-nose', type=int, default=0, help='Extra steps to trace past the nose')
        parser.add_argument('--check', action='store_true',
                            help='Compare lambda_max with a power-flow feasibility bisection')

    def handle(self, *args, **options):
        try:
            config = load_config(options['config'])
            case = load_scenario_case(config)
            rows = evaluation_designs(config, case)['physical'].values
            if not 0 <= options['sample'] < len(rows):
                raise ValidationError(f'--sample must be in [0, {len(rows)}), got {options["sample"]}')

            injections = apply_inputs(case, rows[options['sample']], config)
            direction = growth_direction(case, injections, config)
            cpf_options = ContinuationOptions.from_settings(steps_past_nose=options['past_nose'])
            trace = trace_continuation(case, injections, direction, cpf_options)
            margin = load_margin(trace, direction, config.target_bus)
            bisected = bisect_loadability(case, injections, direction, cpf_options.power_flow) \
                if options['check'] else None
        except ValidationError as exc:
            raise CommandError(f'Invalid configuration: {"; ".join(exc.messages)}', returncode=CONFIG_ERROR)
        except NumericalError as exc:
            raise CommandError(f'Numerical failure: {exc}', returncode=NUMERICAL_ERROR)

        out_dir = Path(options['out']) if options['out'] else config.output_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f'pv_curve_{options["sample"]}.csv'
        trace_to_csv(trace, path, getattr(settings, 'OUTPUT_SIGNIFICANT_DIGITS', 17))

        self.stdout.write(f'lambda_max={margin.lambda_max:.6f} margin={margin.margin_mw:.3f} MW '
                          f'at bus {config.target_bus}: {margin.margin_at_bus_mw:.3f} MW '
                          f'({trace.terminated_reason.value}, {len(trace.points)} points)')
        if bisected is not None:
            self.stdout.write(f'bisection lambda_max={bisected:.6f} '
                              f'(difference {abs(bisected - margin.lambda_max):.2e})')
        self.stdout.write(self.style.SUCCESS(f'PV curve written to {path}'))
