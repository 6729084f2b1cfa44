from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from margins.pipeline import emulator_labels, load_config, load_scenario_case

from .assess import CONFIG_ERROR


class Command(BaseCommand):
    help = 'Validate a scenario file and the network case it points to'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Scenario JSON file')

    def handle(self, *args, **options):
        try:
            config = load_config(options['config'])
            case = load_scenario_case(config)
        except ValidationError as exc:
            raise CommandError(f'Invalid configuration: {"; ".join(exc.messages)}', returncode=CONFIG_ERROR)

        labels = emulator_labels(config, case)
        self.stdout.write(f'scenario: {config.name}')
        self.stdout.write(f'case: {config.case_path} ({case.n_bus} buses, {len(case.branches)} branches, '
                          f'{case.total_load_mw:.1f} MW load)')
        self.stdout.write(f'inputs: {", ".join(labels)}')
        self.stdout.write(f'vine: {config.vine.kind.value}-vine of dimension {config.vine.dim}')
        self.stdout.write(f'emulator: {config.basis.value} basis, {config.kernel_family.value} kernel, '
                          f'n_train={config.n_train}, n_mc={config.n_mc}')
        self.stdout.write(self.style.SUCCESS('Configuration is valid'))
