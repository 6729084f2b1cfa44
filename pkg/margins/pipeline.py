"""
Assessment orchestration

Runs the three stages of a surrogate-based load-margin assessment (training
design and CPF evaluations, emulator fitting, evaluation of a large sample)
and the direct Monte Carlo benchmark that evaluates every sample with CPF.
"""

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError
from scipy.stats import gaussian_kde, ks_2samp

from .case_model import NetworkCase, load_case
from .cpf import ContinuationOptions, bus_load_growth, load_margin, trace_continuation, uniform_load_growth
from .exceptions import AssessmentAbortedError, CaseValidationError, DomainError, NumericalError
from .forms import ScenarioConfigForm
from .gpe import Basis, KernelFamily, TrainedEmulator, TrainingOptions, predict_mean, train
from .powerflow import Injections
from .sampling import (DesignMatrix, DesignStage, correlate, design_digest, lhs, mc_uniform, to_physical,
                       write_design_csv)
from .uncertainty import Marginal, VineSpec

logger = logging.getLogger(__name__)

MIN_KDE_SAMPLES = 30


class AssessmentMethod(Enum):
    GPE = 'gpe'
    DIRECT_MC = 'mc'


@dataclass(frozen=True)
class InputSpec:
    name: str
    bus: int = None
    marginal: Marginal = None
    cap_mw: float = None

    @property
    def is_load_factor(self) -> bool:
        return self.bus is None


@dataclass(frozen=True)
class GrowthSettings:
    mode: str = 'system'
    bus: int = None
    power_factor: str = 'constant'


@dataclass(frozen=True)
class ScenarioConfig:
    case_path: Path
    inputs: tuple
    vine: VineSpec
    target_bus: int
    n_train: int
    n_mc: int
    basis: Basis
    kernel_family: KernelFamily
    seed: int
    name: str = 'scenario'
    growth: GrowthSettings = GrowthSettings()
    kernel_alpha: float = 2.0
    output_dir: Path = Path('output')
    load_model: str = 'factor'
    load_std: float = 0.0
    workers: int = None
    digest: str = ''

    @property
    def marginals(self) -> tuple:
        return tuple(spec.marginal for spec in self.inputs)

    @property
    def input_labels(self) -> tuple:
        return tuple(spec.name for spec in self.inputs)


def config_from_dict(data: dict, base_dir=None) -> ScenarioConfig:
    """
    Validate a scenario document and build the ScenarioConfig

    Args:
        data: Parsed JSON document
        base_dir: Directory relative case paths resolve against

    Raises:
        ValidationError: If the document fails validation
    """
    form = ScenarioConfigForm(data=data)
    if not form.is_valid():
        problems = []
        for name, errors in form.errors.as_data().items():
            for error in errors:
                for message in error.messages:
                    problems.append(message if name == '__all__' else f'{name}: {message}')
        raise ValidationError(problems)

    cleaned = form.cleaned_data
    case_path = Path(cleaned['case_path'])
    if not case_path.is_absolute() and base_dir is not None:
        case_path = Path(base_dir) / case_path

    canonical = json.dumps(data, sort_keys=True, separators=(',', ':'))
    return ScenarioConfig(
        case_path=case_path,
        inputs=tuple(InputSpec(**item) for item in cleaned['inputs']),
        vine=cleaned['vine'],
        target_bus=cleaned['target_bus'],
        n_train=cleaned['n_train'],
        n_mc=cleaned['n_mc'],
        basis=cleaned['basis'],
        kernel_family=cleaned['kernel']['family'],
        kernel_alpha=cleaned['kernel']['alpha'],
        seed=cleaned['seed'],
        name=cleaned.get('name') or 'scenario',
        growth=GrowthSettings(**cleaned['growth']),
        output_dir=Path(cleaned.get('output_dir') or 'output'),
        load_model=cleaned.get('load_model') or 'factor',
        load_std=cleaned.get('load_std') or 0.0,
        workers=cleaned.get('workers'),
        digest=hashlib.sha256(canonical.encode()).hexdigest(),
    )


def read_scenario_document(path) -> dict:
    """Parse a scenario file into its JSON object without validating the fields."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f'config file not found: {path}')
    except json.JSONDecodeError as exc:
        raise ValidationError(f'{path}: invalid JSON at line {exc.lineno}: {exc.msg}')
    if not isinstance(data, dict):
        raise ValidationError(f'{path}: the config document must be a JSON object')
    return data


def load_config(path) -> ScenarioConfig:
    return config_from_dict(read_scenario_document(path), base_dir=Path(path).parent)


def load_scenario_case(config: ScenarioConfig) -> NetworkCase:
    """Load the network and check the config against it: bus references and training size."""
    case = load_case(config.case_path)
    referenced = [('target_bus', config.target_bus)]
    referenced += [(f'input "{spec.name}"', spec.bus) for spec in config.inputs if not spec.is_load_factor]
    if config.growth.mode == 'bus':
        referenced.append(('growth.bus', config.growth.bus))
    unknown = [f'{where} -> bus {bus}' for where, bus in referenced if bus not in case.index_of]
    if unknown:
        raise CaseValidationError(f'config refers to buses missing from {config.case_path.name}: '
                                  f'{", ".join(unknown)}')

    # per-bus loads widen the emulator input beyond the vine block
    width = len(emulator_labels(config, case))
    needed = config.basis.width(width) + 1
    if config.n_train < needed:
        raise ValidationError(f'n_train must be at least {needed} for a {config.basis.value} basis over '
                              f'{width} emulator inputs ({config.load_model} load model on '
                              f'{config.case_path.name})')
    return case


def loaded_buses(case: NetworkCase) -> tuple:
    return tuple(bus.id for bus in case.buses if bus.p_load != 0 or bus.q_load != 0)


def emulator_labels(config: ScenarioConfig, case: NetworkCase) -> tuple:
    labels = config.input_labels
    if config.load_model == 'per-bus':
        labels += tuple(f'load_{bus_id}' for bus_id in loaded_buses(case))
    return labels


def apply_inputs(case: NetworkCase, x, config: ScenarioConfig, base: Injections = None) -> Injections:
    """
    Turn one physical input row into per-bus injections

    Load-factor inputs multiply every bus load, wind inputs are added as MW
    injections at unity power factor. In per-bus mode the columns after the
    vine block are independent multipliers for each loaded bus.

    Raises:
        DomainError: If the row length does not match the config
        CaseValidationError: If an input names a bus missing from the case
    """
    x = np.asarray(x, dtype=float).ravel()
    n_vine = len(config.inputs)
    per_bus = loaded_buses(case) if config.load_model == 'per-bus' else ()
    if x.size != n_vine + len(per_bus):
        raise DomainError(f'input row has {x.size} values, expected {n_vine + len(per_bus)}')

    base = base or Injections.from_case(case)
    scale = np.ones(case.n_bus)
    p_extra = base.p_extra.copy()
    for spec, value in zip(config.inputs, x[:n_vine]):
        if spec.is_load_factor:
            scale *= value
            continue
        try:
            index = case.index_of[spec.bus]
        except KeyError:
            raise CaseValidationError(f'input "{spec.name}" refers to unknown bus {spec.bus}')
        p_extra[index] += value if spec.cap_mw is None else min(value, spec.cap_mw)
    for bus_id, value in zip(per_bus, x[n_vine:]):
        scale[case.index_of[bus_id]] *= value

    return replace(base, p_load=base.p_load * scale, q_load=base.q_load * scale, p_extra=p_extra)


def growth_direction(case: NetworkCase, injections: Injections, config: ScenarioConfig):
    if config.growth.mode == 'bus':
        return bus_load_growth(case, config.growth.bus, injections, power_factor=config.growth.power_factor)
    return uniform_load_growth(case, injections, power_factor=config.growth.power_factor)


@dataclass(frozen=True, eq=False)
class MarginTask:
    """One CPF evaluation; everything a worker needs, nothing it can mutate."""

    index: int
    case: NetworkCase
    injections: Injections
    direction: object
    target_bus: int
    options: ContinuationOptions


def evaluate_margin(task: MarginTask, options: ContinuationOptions = None) -> float:
    """Margin at the target bus for one operating point, via CPF."""
    trace = trace_continuation(task.case, task.injections, task.direction, options or task.options)
    margin = load_margin(trace, task.direction, task.target_bus)
    if not margin.reliable:
        raise AssessmentAbortedError(f'continuation stopped with {trace.terminated_reason.value}')
    return margin.margin_at_bus_mw


def _evaluate_task(task: MarginTask):
    # module-level so worker processes can unpickle it
    for attempt, options in enumerate((task.options, task.options.tightened())):
        try:
            return evaluate_margin(task, options)
        except NumericalError as exc:
            if attempt == 0:
                logger.info(f'Sample {task.index}: {exc}; retrying with tightened steps')
            else:
                logger.warning(f'Sample {task.index}: {exc}; dropped')
    return None


def evaluate_margins(case: NetworkCase, config: ScenarioConfig, rows, options: ContinuationOptions = None,
                     workers: int = None) -> list:
    """
    CPF margin for every row, in row order

    Rows that fail twice come back as None.
    """
    options = options or ContinuationOptions.from_settings()
    workers = workers or config.workers or getattr(settings, 'LOAD_MARGIN_WORKERS', 1)
    tasks = []
    for i, row in enumerate(np.asarray(rows)):
        injections = apply_inputs(case, row, config)
        direction = growth_direction(case, injections, config)
        tasks.append(MarginTask(i, case, injections, direction, config.target_bus, options))
    if workers <= 1 or len(tasks) <= 1:
        return [_evaluate_task(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(_evaluate_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def _physical_design(config: ScenarioConfig, case: NetworkCase, role: str, n: int) -> dict:
    """Uniform, correlated and physical designs for one role ('training' or 'evaluation')."""
    draw = lhs if role == 'training' else mc_uniform
    iid = draw(n, config.vine.dim, config.seed, role, config.input_labels)
    correlated = correlate(iid, config.vine)
    physical = to_physical(correlated, config.marginals)
    designs = {'uniform_iid': iid, 'uniform_correlated': correlated, 'physical': physical}
    if config.load_model != 'per-bus':
        return designs

    buses = loaded_buses(case)
    extra = draw(n, len(buses), config.seed, f'per-bus-{role}', tuple(f'load_{b}' for b in buses))
    extra_marginals = [Marginal.gaussian(1.0, config.load_std)] * len(buses)
    extra_physical = to_physical(extra, extra_marginals)
    designs['per_bus_uniform'] = extra
    designs['physical'] = DesignMatrix(
        np.hstack([physical.values, extra_physical.values]), DesignStage.PHYSICAL, config.seed,
        physical.column_labels + extra_physical.column_labels,
        hashlib.sha256((physical.marginals_digest + extra_physical.marginals_digest).encode()).hexdigest(),
    )
    return designs


def training_designs(config: ScenarioConfig, case: NetworkCase) -> dict:
    return _physical_design(config, case, 'training', config.n_train)


def evaluation_designs(config: ScenarioConfig, case: NetworkCase) -> dict:
    if config.n_mc < 1:
        raise DomainError(f'n_mc must be positive, got {config.n_mc}')
    return _physical_design(config, case, 'evaluation', config.n_mc)


def summary_stats(samples) -> dict:
    """
    Mean, unbiased std and the 5/50/95% quantiles

    Raises:
        DomainError: If samples is empty
    """
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise DomainError('summary statistics need at least one sample')
    q05, q50, q95 = np.quantile(samples, [0.05, 0.5, 0.95], method='linear')
    return {
        'mean': float(np.mean(samples)),
        'std': float(np.std(samples, ddof=1)) if samples.size > 1 else 0.0,
        'q05': float(q05),
        'q50': float(q50),
        'q95': float(q95),
    }


def kde(samples, bandwidth: float = None) -> np.ndarray:
    """
    Gaussian kernel density on a regular grid

    The grid spans [min - 3h, max + 3h]. Degenerate (zero variance) samples
    return a three-point triangle of unit area centred on the common value.

    Args:
        samples: At least 30 values
        bandwidth: Kernel std; defaults to 1.06 * std * n ** (-1/5)

    Returns:
        (m, 2) array of (value, density) rows
    """
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size < MIN_KDE_SAMPLES:
        raise DomainError(f'kde needs at least {MIN_KDE_SAMPLES} samples, got {samples.size}')
    center = float(np.mean(samples))
    sigma = float(np.std(samples, ddof=1))
    if sigma <= 1e-12 * max(1.0, abs(center)):
        half_width = max(1e-9 * abs(center), 1e-12)
        logger.info(f'Degenerate sample at {center}; returning a spike')
        return np.array([[center - half_width, 0.0], [center, 1.0 / half_width], [center + half_width, 0.0]])

    h = bandwidth if bandwidth is not None else 1.06 * sigma * samples.size ** (-0.2)
    if not h > 0:
        raise DomainError(f'bandwidth must be positive, got {h}')
    estimator = gaussian_kde(samples, bw_method=h / sigma)
    grid = np.linspace(samples.min() - 3 * h, samples.max() + 3 * h, getattr(settings, 'KDE_GRID_POINTS', 512))
    return np.column_stack([grid, np.clip(estimator(grid), 0.0, None)])


@dataclass(frozen=True, eq=False)
class AssessmentResult:
    method: AssessmentMethod
    margins: np.ndarray
    stats: dict
    pdf_points: np.ndarray
    timing: dict
    sample_digest: str
    designs: dict = field(default_factory=dict)
    emulator: TrainedEmulator = None
    training_margins: np.ndarray = None
    n_excluded: int = 0

    @property
    def exclusion_rate(self) -> float:
        total = self.margins.size + self.n_excluded
        return self.n_excluded / total if total else 0.0

    def summary(self) -> dict:
        summary = {
            'method': self.method.value,
            'n_samples': int(self.margins.size),
            'n_excluded': self.n_excluded,
            'exclusion_rate': self.exclusion_rate,
            'sample_digest': self.sample_digest,
            'timing': self.timing,
            **self.stats,
        }
        if self.emulator is not None:
            summary['kernel'] = self.emulator.kernel.family.value
            summary['basis'] = self.emulator.basis.value
            summary['log_likelihood'] = self.emulator.log_likelihood
        return summary


def _timing(**values) -> dict:
    timing = {'t_train_cpf': 0.0, 't_gpe_train': 0.0, 't_gpe_eval': 0.0, 't_mc_cpf': 0.0, 't_total': 0.0}
    timing.update(values)
    return timing


def run_assessment(config: ScenarioConfig, options: ContinuationOptions = None, workers: int = None,
                   case: NetworkCase = None) -> AssessmentResult:
    """
    Surrogate assessment: train an emulator on n_train CPF runs and
    evaluate it on n_mc correlated samples

    Raises:
        AssessmentAbortedError: If too few training points survive
    """
    started = time.perf_counter()
    case = case or load_scenario_case(config)
    options = options or ContinuationOptions.from_settings()

    training = training_designs(config, case)
    x_train = training['physical'].values
    tick = time.perf_counter()
    y_train = evaluate_margins(case, config, x_train, options, workers)
    t_train_cpf = time.perf_counter() - tick

    kept = np.array([y is not None for y in y_train])
    needed = config.basis.width(x_train.shape[1]) + 1
    if kept.sum() < needed:
        raise AssessmentAbortedError(f'only {kept.sum()} of {len(y_train)} training points converged; '
                                     f'the {config.basis.value} basis needs {needed}')
    if not kept.all():
        logger.warning(f'Dropped {len(y_train) - kept.sum()} training points after failed CPF runs')
    y_kept = np.array([y for y in y_train if y is not None], dtype=float)

    tick = time.perf_counter()
    emulator = train(x_train[kept], y_kept, config.basis, config.kernel_family,
                     TrainingOptions.from_settings(seed=config.seed, rq_alpha=config.kernel_alpha))
    t_gpe_train = time.perf_counter() - tick

    evaluation = evaluation_designs(config, case)
    tick = time.perf_counter()
    margins = np.atleast_1d(predict_mean(emulator, evaluation['physical'].values))
    t_gpe_eval = time.perf_counter() - tick

    timing = _timing(t_train_cpf=t_train_cpf, t_gpe_train=t_gpe_train, t_gpe_eval=t_gpe_eval,
                     t_total=time.perf_counter() - started)
    logger.info(f'GPE assessment of {config.name}: train CPF {t_train_cpf:.2f}s, fit {t_gpe_train:.2f}s, '
                f'evaluate {t_gpe_eval:.4f}s')
    designs = {f'training_{k}': v for k, v in training.items()}
    designs.update({f'evaluation_{k}': v for k, v in evaluation.items()})
    return AssessmentResult(
        method=AssessmentMethod.GPE,
        margins=margins,
        stats=summary_stats(margins),
        pdf_points=kde(margins),
        timing=timing,
        sample_digest=design_digest(evaluation['physical']),
        designs=designs,
        emulator=emulator,
        training_margins=y_kept,
        n_excluded=int(len(y_train) - kept.sum()),
    )


def run_mc_benchmark(config: ScenarioConfig, options: ContinuationOptions = None, workers: int = None,
                     case: NetworkCase = None) -> AssessmentResult:
    """Direct Monte Carlo: every evaluation row goes through CPF."""
    if config.n_mc < 1:
        raise DomainError(f'n_mc must be positive, got {config.n_mc}')
    started = time.perf_counter()
    case = case or load_scenario_case(config)
    evaluation = evaluation_designs(config, case)

    tick = time.perf_counter()
    results = evaluate_margins(case, config, evaluation['physical'].values, options, workers)
    t_mc_cpf = time.perf_counter() - tick

    margins = np.array([y for y in results if y is not None], dtype=float)
    n_excluded = len(results) - margins.size
    if n_excluded:
        logger.warning(f'Excluded {n_excluded} of {len(results)} Monte Carlo samples '
                       f'({100.0 * n_excluded / len(results):.2f}%)')
    if margins.size == 0:
        raise AssessmentAbortedError('every Monte Carlo sample failed')

    timing = _timing(t_mc_cpf=t_mc_cpf, t_total=time.perf_counter() - started)
    logger.info(f'Direct MC of {config.name}: {len(results)} CPF runs in {t_mc_cpf:.2f}s')
    return AssessmentResult(
        method=AssessmentMethod.DIRECT_MC,
        margins=margins,
        stats=summary_stats(margins),
        pdf_points=kde(margins) if margins.size >= MIN_KDE_SAMPLES else np.empty((0, 2)),
        timing=timing,
        sample_digest=design_digest(evaluation['physical']),
        designs={f'evaluation_{k}': v for k, v in evaluation.items()},
        n_excluded=n_excluded,
    )


def compare_results(gpe: AssessmentResult, mc: AssessmentResult) -> dict:
    """Relative differences, KS statistic and per-sample speedup of the surrogate."""
    if gpe.sample_digest != mc.sample_digest:
        logger.warning('Comparing results drawn from different evaluation samples')
    mean_mc, std_mc = mc.stats['mean'], mc.stats['std']
    per_sample_cpf = mc.timing['t_mc_cpf'] / max(mc.margins.size + mc.n_excluded, 1)
    per_sample_gpe = gpe.timing['t_gpe_eval'] / max(gpe.margins.size, 1)
    return {
        'rel_mean_diff': abs(gpe.stats['mean'] - mean_mc) / abs(mean_mc) if mean_mc else float('inf'),
        'rel_std_diff': abs(gpe.stats['std'] - std_mc) / std_mc if std_mc else float('inf'),
        'ks_statistic': float(ks_2samp(gpe.margins, mc.margins).statistic),
        'speedup': per_sample_cpf / per_sample_gpe if per_sample_gpe > 0 else float('inf'),
        'same_samples': gpe.sample_digest == mc.sample_digest,
        'mc_exclusion_rate': mc.exclusion_rate,
    }


def write_outputs(result: AssessmentResult, out_dir, digits: int = None) -> list:
    """
    Write margins, pdf, summary and design files for one method

    Returns:
        Paths of the files written
    """
    digits = digits or getattr(settings, 'OUTPUT_SIGNIFICANT_DIGITS', 17)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    method = result.method.value
    fmt = f'%.{digits}g'
    written = []

    path = out_dir / f'margins_{method}.csv'
    np.savetxt(path, result.margins.reshape(-1, 1), delimiter=',', header='margin_mw', comments='', fmt=fmt)
    written.append(path)

    path = out_dir / f'pdf_{method}.csv'
    np.savetxt(path, result.pdf_points.reshape(-1, 2), delimiter=',', header='margin_mw,density',
               comments='', fmt=fmt)
    written.append(path)

    path = out_dir / f'summary_{method}.json'
    path.write_text(json.dumps(result.summary(), indent=2, sort_keys=True))
    written.append(path)

    for name, design in result.designs.items():
        written.append(write_design_csv(design, out_dir / f'design_{name}.csv', digits))

    if result.emulator is not None:
        path = out_dir / f'emulator_{result.emulator.kernel.family.value}.json'
        path.write_text(json.dumps(result.emulator.to_dict(), indent=2, sort_keys=True))
        written.append(path)

    logger.info(f'Wrote {len(written)} {method} output files to {out_dir}')
    return written


def write_comparison(comparison: dict, out_dir) -> Path:
    path = Path(out_dir) / 'comparison.json'
    path.write_text(json.dumps(comparison, indent=2, sort_keys=True))
    return path
