"""
Continuation power flow

Traces the PV curve in the load-scaling parameter lambda with a tangent
predictor and a pseudo-arclength corrector, switching to a local voltage
parameter near the nose, and reads the load margin off the traced curve.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from django.conf import settings
from scipy.sparse import bmat, csr_matrix

from .exceptions import BaseCaseInfeasibleError, DomainError, SingularJacobianError
from .powerflow import (Injections, PowerFlowOptions, _jacobian, linear_solve, solve_nr)

logger = logging.getLogger(__name__)


class TerminationReason(Enum):
    NOSE_PASSED = 'nose_passed'
    STEP_FLOOR = 'step_floor'
    MAX_STEPS = 'max_steps'
    CORRECTOR_FAILURE = 'corrector_failure'


@dataclass(frozen=True, eq=False)
class GrowthDirection:
    """
    Load growth per unit lambda

    ``delta_p``/``delta_q`` are per bus in MW/MVAr. ``gen_participation`` holds one
    share per generator (same order as ``gen_bus_index``) of the added active
    load; the slack bus covers losses on top of that.
    """

    bus_ids: tuple
    delta_p: np.ndarray
    delta_q: np.ndarray
    gen_participation: np.ndarray
    gen_bus_index: tuple = ()

    def __post_init__(self):
        for name in ('delta_p', 'delta_q', 'gen_participation'):
            array = np.array(getattr(self, name), dtype=float)
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        n = len(self.bus_ids)
        if self.delta_p.shape != (n,) or self.delta_q.shape != (n,):
            raise DomainError(f'growth vectors must have length {n}')
        if len(self.gen_participation) != len(self.gen_bus_index):
            raise DomainError('one participation factor is required per generator bus')
        if len(self.gen_participation) and abs(self.gen_participation.sum() - 1.0) > 1e-12:
            raise DomainError(f'generator participation sums to {self.gen_participation.sum()}, expected 1')

    @property
    def is_zero(self) -> bool:
        return not np.any(self.delta_p) and not np.any(self.delta_q)

    @property
    def total_mw(self) -> float:
        return float(self.delta_p.sum())

    def gen_increase_mw(self) -> np.ndarray:
        increase = np.zeros(len(self.bus_ids))
        for share, index in zip(self.gen_participation, self.gen_bus_index):
            increase[index] += share * self.total_mw
        return increase

    def transfer_mw(self) -> np.ndarray:
        """Change of the net complex injection per unit lambda."""
        return self.gen_increase_mw() - self.delta_p - 1j * self.delta_q

    def at(self, injections: Injections, lam: float) -> Injections:
        return replace(
            injections,
            p_load=injections.p_load + lam * self.delta_p,
            q_load=injections.q_load + lam * self.delta_q,
            p_gen=injections.p_gen + lam * self.gen_increase_mw(),
        )

    def scaled(self, factor: float):
        return replace(self, delta_p=self.delta_p * factor, delta_q=self.delta_q * factor)


def _participation(case):
    gens = [g for g in case.active_generators if case.index_of[g.bus] != case.slack_index and g.p_gen > 0]
    if gens:
        total = sum(g.p_gen for g in gens)
        shares = np.array([g.p_gen / total for g in gens])
        # force an exact unit sum
        shares[-1] = 1.0 - shares[:-1].sum()
        return shares, tuple(case.index_of[g.bus] for g in gens)
    return np.array([1.0]), (case.slack_index,)


def uniform_load_growth(case, injections: Injections = None, power_factor: str = 'constant') -> GrowthDirection:
    """Scale every load in proportion to its own size."""
    injections = injections or Injections.from_case(case)
    delta_p = np.array(injections.p_load)
    if power_factor == 'constant':
        delta_q = np.where(delta_p != 0, injections.q_load, 0.0)
    elif power_factor == 'unity':
        delta_q = np.zeros(case.n_bus)
    else:
        raise DomainError(f'unknown power factor mode "{power_factor}"')
    shares, gen_index = _participation(case)
    return GrowthDirection(bus_ids=tuple(case.bus_ids.tolist()), delta_p=delta_p, delta_q=delta_q,
                           gen_participation=shares, gen_bus_index=gen_index)


def bus_load_growth(case, bus_id: int, injections: Injections = None, mw_per_unit: float = None,
                    power_factor: str = 'constant') -> GrowthDirection:
    """Grow load at a single bus; by default one unit of lambda adds its own base load."""
    if bus_id not in case.index_of:
        raise DomainError(f'unknown bus id {bus_id}')
    injections = injections or Injections.from_case(case)
    index = case.index_of[bus_id]
    p_base, q_base = injections.p_load[index], injections.q_load[index]
    step = p_base if mw_per_unit is None else mw_per_unit
    delta_p = np.zeros(case.n_bus)
    delta_q = np.zeros(case.n_bus)
    delta_p[index] = step
    if power_factor == 'constant' and p_base:
        delta_q[index] = step * q_base / p_base
    elif power_factor not in ('constant', 'unity'):
        raise DomainError(f'unknown power factor mode "{power_factor}"')
    shares, gen_index = _participation(case)
    return GrowthDirection(bus_ids=tuple(case.bus_ids.tolist()), delta_p=delta_p, delta_q=delta_q,
                           gen_participation=shares, gen_bus_index=gen_index)


@dataclass(frozen=True)
class ContinuationOptions:
    initial_step: float = 0.1
    max_step: float = 0.5
    step_floor: float = 1e-4
    max_steps: int = 500
    nose_tolerance: float = 1e-4
    corrector_tol: float = 1e-8
    corrector_max_iter: int = 15
    step_growth: float = 1.5
    step_shrink: float = 0.5
    steps_past_nose: int = 0
    local_parameterization: bool = True
    power_flow: PowerFlowOptions = field(default_factory=PowerFlowOptions)

    def __post_init__(self):
        if not 0 < self.step_floor <= self.initial_step <= self.max_step:
            raise DomainError('step sizes must satisfy 0 < step_floor <= initial_step <= max_step')

    @classmethod
    def from_settings(cls, **overrides):
        values = {
            'initial_step': getattr(settings, 'CPF_INITIAL_STEP', 0.1),
            'max_step': getattr(settings, 'CPF_MAX_STEP', 0.5),
            'step_floor': getattr(settings, 'CPF_STEP_FLOOR', 1e-4),
            'max_steps': getattr(settings, 'CPF_MAX_STEPS', 500),
            'nose_tolerance': getattr(settings, 'CPF_NOSE_TOLERANCE', 1e-4),
            'corrector_tol': getattr(settings, 'CPF_CORRECTOR_TOLERANCE', 1e-8),
            'corrector_max_iter': getattr(settings, 'CPF_CORRECTOR_MAX_ITERATIONS', 15),
            'power_flow': PowerFlowOptions.from_settings(),
        }
        values.update(overrides)
        return cls(**values)

    def tightened(self, factor: float = 0.25):
        """Smaller steps for retrying a failed trace."""
        floor = min(self.step_floor, self.initial_step * factor)
        return replace(self, initial_step=self.initial_step * factor,
                       max_step=self.max_step * factor, step_floor=floor)


@dataclass(frozen=True, eq=False)
class TracePoint:
    lam: float
    v_mag: np.ndarray
    v_ang: np.ndarray
    tangent: np.ndarray = None


@dataclass(eq=False)
class ContinuationTrace:
    points: list
    nose_index: int
    terminated_reason: TerminationReason
    lambda_max: float
    bus_ids: tuple = ()
    angle_index: np.ndarray = None
    magnitude_index: np.ndarray = None

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([point.lam for point in self.points])

    def state_vector(self, i: int) -> np.ndarray:
        point = self.points[i]
        return np.r_[point.v_ang[self.angle_index], point.v_mag[self.magnitude_index], point.lam]


@dataclass(frozen=True)
class LoadMargin:
    lambda_max: float
    margin_mw: float
    margin_at_bus_mw: float
    reliable: bool = True


class _ParameterizedFlow:
    """Power-flow equations with lambda appended to the unknowns."""

    def __init__(self, case, injections, direction, dense_limit):
        self.ybus = case.ybus
        self.pv = case.pv_indices
        self.pq = case.pq_indices
        self.pvpq = np.r_[self.pv, self.pq].astype(int)
        self.n_ang = len(self.pvpq)
        self.n_mag = len(self.pq)
        self.s_base = injections.scheduled(case.base_mva)
        self.s_transfer = direction.transfer_mw() / case.base_mva
        self.dense_limit = dense_limit
        self.dg_dlam = -np.r_[self.s_transfer[self.pvpq].real, self.s_transfer[self.pq].imag]

    def pack(self, v_mag, v_ang, lam) -> np.ndarray:
        return np.r_[v_ang[self.pvpq], v_mag[self.pq], lam]

    def unpack(self, x, v_mag_ref, v_ang_ref):
        v_ang = v_ang_ref.copy()
        v_mag = v_mag_ref.copy()
        v_ang[self.pvpq] = x[:self.n_ang]
        v_mag[self.pq] = x[self.n_ang:self.n_ang + self.n_mag]
        return v_mag, v_ang, x[-1]

    def residual(self, v_mag, v_ang, lam) -> np.ndarray:
        voltage = v_mag * np.exp(1j * v_ang)
        s_mis = voltage * np.conj(self.ybus @ voltage) - self.s_base - lam * self.s_transfer
        return np.r_[s_mis[self.pvpq].real, s_mis[self.pq].imag]

    def augmented(self, v_mag, v_ang, last_row):
        jac = _jacobian(self.ybus, v_mag * np.exp(1j * v_ang), self.pvpq, self.pq)
        column = csr_matrix(self.dg_dlam.reshape(-1, 1))
        last_row = np.asarray(last_row, dtype=float)
        return bmat([[jac, column],
                     [csr_matrix(last_row[:-1].reshape(1, -1)), csr_matrix([[last_row[-1]]])]],
                    format='csr')

    def tangent(self, v_mag, v_ang, previous) -> np.ndarray:
        rhs = np.zeros(len(previous))
        rhs[-1] = 1.0
        z = linear_solve(self.augmented(v_mag, v_ang, previous), rhs, self.dense_limit)
        return z / np.linalg.norm(z)


def _correct(flow, x_pred, x_prev, z, sigma, v_mag_ref, v_ang_ref, options, local_index):
    """Newton corrector on the flow equations plus one parameterizing equation."""
    x = x_pred.copy()
    if local_index is None:
        row = z
        constraint = lambda x: float(z @ (x - x_prev) - sigma)
    else:
        row = np.zeros(len(x))
        row[local_index] = 1.0
        target = x_pred[local_index]
        constraint = lambda x: float(x[local_index] - target)

    for _ in range(options.corrector_max_iter + 1):
        v_mag, v_ang, lam = flow.unpack(x, v_mag_ref, v_ang_ref)
        if not np.all(np.isfinite(x)) or np.any(v_mag <= 0):
            return None
        f = np.r_[flow.residual(v_mag, v_ang, lam), constraint(x)]
        if np.max(np.abs(f)) <= options.corrector_tol:
            return x
        try:
            dx = linear_solve(flow.augmented(v_mag, v_ang, row), f, flow.dense_limit)
        except SingularJacobianError:
            return None
        x = x - dx
    return None


def trace_continuation(case, injections: Injections = None, direction: GrowthDirection = None,
                       options: ContinuationOptions = None) -> ContinuationTrace:
    """
    Trace the PV curve from lambda = 0 past the nose point

    Args:
        case: Validated NetworkCase
        injections: Base operating point; wind enters here and stays fixed
        direction: Load growth per unit lambda, default uniform growth
        options: Step control and tolerances

    Returns:
        ContinuationTrace whose ``lambda_max`` is localized to ``options.nose_tolerance``

    Raises:
        DomainError: If the growth direction is zero
        BaseCaseInfeasibleError: If the base case does not solve
    """
    options = options or ContinuationOptions()
    injections = injections or Injections.from_case(case)
    direction = direction or uniform_load_growth(case, injections)
    if direction.is_zero:
        raise DomainError('growth direction is zero; nothing to continue along')

    try:
        base = solve_nr(case, injections, options.power_flow)
    except SingularJacobianError:
        raise BaseCaseInfeasibleError('base case power flow hit a singular Jacobian')
    if not base.converged:
        raise BaseCaseInfeasibleError(
            f'base case power flow did not converge (max mismatch {base.max_mismatch:.3e} pu)')

    flow = _ParameterizedFlow(case, injections, direction, options.power_flow.dense_bus_limit)
    v_mag_ref, v_ang_ref = base.v_mag.copy(), base.v_ang.copy()
    x = flow.pack(base.v_mag, base.v_ang, 0.0)
    e_lam = np.zeros(len(x))
    e_lam[-1] = 1.0
    try:
        z = flow.tangent(base.v_mag, base.v_ang, e_lam)
    except SingularJacobianError:
        raise BaseCaseInfeasibleError('base case sits on a singular point of the PV curve')

    points = [TracePoint(0.0, base.v_mag.copy(), base.v_ang.copy(), z)]
    sigma = options.initial_step
    successes = 0
    steps = 0
    nose_index = None
    lambda_max = None
    extra = 0
    reason = None

    while reason is None:
        if steps >= options.max_steps:
            reason = TerminationReason.MAX_STEPS
            break
        steps += 1

        x_pred = x + sigma * z
        local_index = None
        if options.local_parameterization and flow.n_mag:
            # near the nose some voltage moves faster than lambda; parameterize by it
            mags = np.abs(z[flow.n_ang:flow.n_ang + flow.n_mag])
            if mags.max() > abs(z[-1]):
                local_index = flow.n_ang + int(np.argmax(mags))

        x_new = _correct(flow, x_pred, x, z, sigma, v_mag_ref, v_ang_ref, options, local_index)
        z_new = None
        if x_new is not None:
            v_mag, v_ang, lam_new = flow.unpack(x_new, v_mag_ref, v_ang_ref)
            try:
                z_new = flow.tangent(v_mag, v_ang, z)
            except SingularJacobianError:
                z_new = None

        if x_new is None or z_new is None:
            successes = 0
            sigma *= options.step_shrink
            if sigma < options.step_floor:
                reason = TerminationReason.STEP_FLOOR
            continue

        lam_prev = x[-1]
        if nose_index is None and (lam_new < lam_prev or z_new[-1] < 0):
            a, b = z[-1], z_new[-1]
            top = max(lam_prev, lam_new)
            if a > 0 > b:
                arc = np.linalg.norm(x_new - x)
                s_star = arc * a / (a - b)
                estimate = lam_prev + 0.5 * a * s_star
            else:
                estimate = top
            if abs(estimate - top) > options.nose_tolerance:
                # bracket too wide: retry from the last point with a shorter step
                successes = 0
                sigma *= options.step_shrink
                if sigma < options.step_floor:
                    reason = TerminationReason.STEP_FLOOR
                continue
            lambda_max = max(estimate, top)
            nose_index = len(points) - 1 if lam_new < lam_prev else len(points)

        points.append(TracePoint(float(lam_new), v_mag, v_ang, z_new))
        x, z = x_new, z_new

        if nose_index is not None:
            if extra >= options.steps_past_nose:
                reason = TerminationReason.NOSE_PASSED
                break
            extra += 1

        successes += 1
        if successes >= 2:
            sigma = min(sigma * options.step_growth, options.max_step)
            successes = 0

    if nose_index is None:
        lams = [point.lam for point in points]
        nose_index = int(np.argmax(lams))
        lambda_max = float(lams[nose_index])

    logger.info(f'Continuation stopped ({reason.value}) after {steps} steps, '
                f'{len(points)} points, lambda_max={lambda_max:.6f}')
    return ContinuationTrace(points=points, nose_index=nose_index, terminated_reason=reason,
                             lambda_max=float(lambda_max), bus_ids=tuple(case.bus_ids.tolist()),
                             angle_index=flow.pvpq, magnitude_index=flow.pq)


def load_margin(trace: ContinuationTrace, direction: GrowthDirection, target_bus: int) -> LoadMargin:
    """Convert the traced nose into MW of extra load, system-wide and at one bus."""
    try:
        index = list(direction.bus_ids).index(target_bus)
    except ValueError:
        raise DomainError(f'unknown target bus {target_bus}')
    reliable = trace.terminated_reason in (TerminationReason.NOSE_PASSED, TerminationReason.STEP_FLOOR)
    if not reliable:
        logger.warning(f'Load margin from a trace that stopped with {trace.terminated_reason.value} '
                       f'is flagged unreliable')
    lam = max(trace.lambda_max, 0.0)
    return LoadMargin(
        lambda_max=lam,
        margin_mw=lam * direction.total_mw,
        margin_at_bus_mw=lam * float(direction.delta_p[index]),
        reliable=reliable,
    )


def bisect_loadability(case, injections: Injections = None, direction: GrowthDirection = None,
                       options: PowerFlowOptions = None, tol: float = 1e-4, lam_cap: float = 1e3) -> float:
    """
    Independent estimate of lambda_max

    Bisects on lambda using plain Newton power-flow convergence as the
    feasibility test, warm-starting each solve from the last feasible point.
    """
    options = options or PowerFlowOptions()
    injections = injections or Injections.from_case(case)
    direction = direction or uniform_load_growth(case, injections)
    if direction.is_zero:
        raise DomainError('growth direction is zero; nothing to continue along')

    try:
        base = solve_nr(case, injections, options)
    except SingularJacobianError:
        base = None
    if base is None or not base.converged:
        raise BaseCaseInfeasibleError('base case power flow did not converge')
    warm = (base.v_mag, base.v_ang)

    def feasible(lam):
        nonlocal warm
        try:
            solution = solve_nr(case, direction.at(injections, lam), options, *warm)
        except SingularJacobianError:
            return False
        if solution.converged and np.all(solution.v_mag > 0):
            warm = (solution.v_mag, solution.v_ang)
            return True
        return False

    lo, hi = 0.0, 1.0
    while feasible(hi):
        lo, hi = hi, hi * 2.0
        if hi > lam_cap:
            raise DomainError(f'no loadability limit found below lambda={lam_cap}')
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def trace_to_csv(trace: ContinuationTrace, path, digits: int = 17) -> None:
    """PV-curve table: lambda followed by one voltage magnitude column per bus."""
    table = np.array([np.r_[point.lam, point.v_mag] for point in trace.points])
    header = ','.join(['lambda'] + [f'v_mag_{bus_id}' for bus_id in trace.bus_ids])
    np.savetxt(path, table, delimiter=',', header=header, comments='', fmt=f'%.{digits}g')
