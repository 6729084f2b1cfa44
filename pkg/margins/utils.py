from .models import AssessmentRun
import logging

logger = logging.getLogger(__name__)


def record_assessment(result, config, output_dir=''):
    """
    Store one finished assessment in the run ledger

    Args:
        result: AssessmentResult from run_assessment or run_mc_benchmark
        config: The ScenarioConfig the result was computed from
        output_dir: Where the result files were written, if anywhere

    Returns:
        The saved AssessmentRun
    """
    emulator = result.emulator
    run = AssessmentRun.objects.create(
        scenario=config.name,
        method=result.method.value,
        kernel=emulator.kernel.family.value if emulator is not None else '',
        basis=emulator.basis.value if emulator is not None else '',
        n_train=config.n_train if emulator is not None else 0,
        n_mc=config.n_mc,
        seed=config.seed,
        mean_mw=result.stats['mean'],
        std_mw=result.stats['std'],
        q05_mw=result.stats['q05'],
        q50_mw=result.stats['q50'],
        q95_mw=result.stats['q95'],
        timing=result.timing,
        exclusion_rate=result.exclusion_rate,
        sample_digest=result.sample_digest,
        config_digest=config.digest,
        output_dir=str(output_dir),
    )
    logger.info(f'Recorded run {run.pk}: {run}')
    return run
