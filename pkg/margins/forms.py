from django import forms
from django.core.exceptions import ValidationError

from .exceptions import DomainError
from .gpe import Basis, KernelFamily
from .uncertainty import Marginal, VineSpec

LOAD_FACTOR = 'load-factor'

KERNEL_ALIASES = {
    'se': KernelFamily.SQUARED_EXPONENTIAL,
    'squared_exponential': KernelFamily.SQUARED_EXPONENTIAL,
    'exponential': KernelFamily.EXPONENTIAL,
    'e': KernelFamily.EXPONENTIAL,
    'rq': KernelFamily.RATIONAL_QUADRATIC,
    'rational_quadratic': KernelFamily.RATIONAL_QUADRATIC,
    'matern32': KernelFamily.MATERN32,
}


def parse_kernel_family(value) -> KernelFamily:
    try:
        return KERNEL_ALIASES[str(value).strip().lower()]
    except KeyError:
        raise ValidationError(f'Unknown kernel "{value}"; choose one of {sorted(KERNEL_ALIASES)}')


def parse_marginal(data) -> Marginal:
    if not isinstance(data, dict):
        raise ValidationError('marginal must be an object')
    family = str(data.get('family', '')).lower()
    try:
        if family == 'gaussian':
            return Marginal.gaussian(data['mean'], data['std'], data.get('units', 'MW'))
        if family == 'weibull':
            return Marginal.weibull(data['shape'], data['scale'], data.get('units', 'MW'))
    except KeyError as exc:
        raise ValidationError(f'{family} marginal is missing {exc}')
    except (TypeError, ValueError, DomainError) as exc:
        raise ValidationError(f'invalid {family} marginal: {exc}')
    raise ValidationError(f'Unknown marginal family "{data.get("family")}"')


class ScenarioConfigForm(forms.Form):
    """Validates one scenario document before it is turned into a ScenarioConfig."""

    name = forms.CharField(required=False, max_length=100)
    case_path = forms.CharField(max_length=1024)
    inputs = forms.JSONField()
    vine = forms.JSONField()
    growth = forms.JSONField(required=False)
    target_bus = forms.IntegerField(min_value=1)
    n_train = forms.IntegerField(min_value=2)
    n_mc = forms.IntegerField(min_value=100)
    basis = forms.CharField(max_length=32)
    # a family name or {"family": ..., "alpha": ...}
    kernel = forms.Field()
    seed = forms.IntegerField(min_value=0)
    output_dir = forms.CharField(required=False, max_length=1024)
    load_model = forms.ChoiceField(required=False, choices=[('factor', 'factor'), ('per-bus', 'per-bus')])
    load_std = forms.FloatField(required=False, min_value=0.0)
    workers = forms.IntegerField(required=False, min_value=1)

    def clean_inputs(self):
        """Each input is a load-factor multiplier or a wind injection at a bus"""
        inputs = self.cleaned_data.get('inputs')
        if not isinstance(inputs, list) or not inputs:
            raise ValidationError('inputs must be a non-empty list')

        cleaned = []
        names = set()
        for position, item in enumerate(inputs, start=1):
            if not isinstance(item, dict):
                raise ValidationError(f'input {position} must be an object')
            name = str(item.get('name', '')).strip()
            if not name:
                raise ValidationError(f'input {position} has no name')
            if name in names:
                raise ValidationError(f'duplicate input name "{name}"')
            names.add(name)

            bus = item.get('bus')
            if bus != LOAD_FACTOR:
                if isinstance(bus, bool) or not isinstance(bus, int) or bus < 1:
                    raise ValidationError(f'input "{name}": bus must be a bus id or "{LOAD_FACTOR}"')
            cap = item.get('wind_cap_mw')
            if cap is not None and (not isinstance(cap, (int, float)) or cap < 0):
                raise ValidationError(f'input "{name}": wind_cap_mw must be a non-negative number')
            cleaned.append({
                'name': name,
                'bus': None if bus == LOAD_FACTOR else bus,
                'marginal': parse_marginal(item.get('marginal')),
                'cap_mw': cap,
            })
        return cleaned

    def clean_vine(self):
        vine = self.cleaned_data.get('vine')
        if not isinstance(vine, dict):
            raise ValidationError('vine must be an object')
        try:
            return VineSpec.from_dict(vine)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f'vine is missing or has a malformed field: {exc}')
        except (ValueError, DomainError) as exc:
            raise ValidationError(f'invalid vine: {exc}')

    def clean_growth(self):
        growth = self.cleaned_data.get('growth') or {}
        if not isinstance(growth, dict):
            raise ValidationError('growth must be an object')
        mode = growth.get('mode', 'system')
        if mode not in ('system', 'bus'):
            raise ValidationError(f'growth.mode must be "system" or "bus", got "{mode}"')
        power_factor = growth.get('power_factor', 'constant')
        if power_factor not in ('constant', 'unity'):
            raise ValidationError(f'growth.power_factor must be "constant" or "unity", got "{power_factor}"')
        bus = growth.get('bus')
        if mode == 'bus' and (not isinstance(bus, int) or bus < 1):
            raise ValidationError('growth.bus is required when growth.mode is "bus"')
        return {'mode': mode, 'bus': bus, 'power_factor': power_factor}

    def clean_basis(self):
        value = self.cleaned_data.get('basis', '').strip().lower().replace('-', '_')
        try:
            return Basis(value)
        except ValueError:
            raise ValidationError(f'Unknown basis "{value}"; choose one of {[b.value for b in Basis]}')

    def clean_kernel(self):
        kernel = self.cleaned_data.get('kernel')
        if isinstance(kernel, str):
            return {'family': parse_kernel_family(kernel), 'alpha': 2.0}
        if not isinstance(kernel, dict):
            raise ValidationError('kernel must be a family name or an object with a "family" key')
        alpha = kernel.get('alpha', 2.0)
        if not isinstance(alpha, (int, float)) or alpha <= 0:
            raise ValidationError('kernel.alpha must be a positive number')
        return {'family': parse_kernel_family(kernel.get('family')), 'alpha': float(alpha)}

    def clean(self):
        cleaned = super().clean()
        inputs, vine, basis = cleaned.get('inputs'), cleaned.get('vine'), cleaned.get('basis')
        if inputs and vine and len(inputs) != vine.dim:
            raise ValidationError(f'{len(inputs)} inputs but the vine has dimension {vine.dim}')
        if inputs and basis and cleaned.get('n_train'):
            width = basis.width(len(inputs))
            if cleaned['n_train'] < width + 1:
                raise ValidationError(
                    f'n_train must be at least {width + 1} for a {basis.value} basis over {len(inputs)} inputs')
        if cleaned.get('load_model') == 'per-bus' and not cleaned.get('load_std'):
            raise ValidationError('load_std is required when load_model is "per-bus"')
        return cleaned
