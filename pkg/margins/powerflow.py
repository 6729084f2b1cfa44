"""
Newton-Raphson AC power flow in polar coordinates
"""

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from django.conf import settings
from scipy.sparse import csr_matrix, diags, bmat, issparse
from scipy.sparse.linalg import spsolve

from .exceptions import DomainError, SingularJacobianError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PowerFlowOptions:
    tol: float = 1e-8
    max_iter: int = 30
    enforce_q_limits: bool = False
    dense_bus_limit: int = 300

    def __post_init__(self):
        if not self.tol > 0:
            raise DomainError(f'tol must be positive, got {self.tol}')
        if self.max_iter < 1:
            raise DomainError(f'max_iter must be at least 1, got {self.max_iter}')

    @classmethod
    def from_settings(cls, **overrides):
        values = {
            'tol': getattr(settings, 'POWERFLOW_TOLERANCE', 1e-8),
            'max_iter': getattr(settings, 'POWERFLOW_MAX_ITERATIONS', 30),
            'dense_bus_limit': getattr(settings, 'POWERFLOW_DENSE_BUS_LIMIT', 300),
        }
        values.update(overrides)
        return cls(**values)


def _frozen(values) -> np.ndarray:
    array = np.array(values, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Injections:
    """
    Per-bus power overrides in MW / MVAr

    ``p_extra`` carries injections that are not generators in the case file
    (wind farms), positive into the network.
    """

    p_load: np.ndarray
    q_load: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    p_extra: np.ndarray

    def __post_init__(self):
        sizes = set()
        for name in ('p_load', 'q_load', 'p_gen', 'q_gen', 'p_extra'):
            array = _frozen(getattr(self, name))
            object.__setattr__(self, name, array)
            sizes.add(array.shape)
        if len(sizes) != 1:
            raise DomainError(f'injection vectors differ in length: {sorted(sizes)}')

    @classmethod
    def from_case(cls, case):
        q_gen = np.zeros(case.n_bus)
        for gen in case.active_generators:
            q_gen[case.index_of[gen.bus]] += gen.q_gen
        return cls(p_load=case.p_load_mw, q_load=case.q_load_mvar, p_gen=case.p_gen_mw,
                   q_gen=q_gen, p_extra=np.zeros(case.n_bus))

    def scaled_loads(self, factor: float):
        return replace(self, p_load=self.p_load * factor, q_load=self.q_load * factor)

    def scheduled(self, base_mva: float) -> np.ndarray:
        """Net complex injection per bus in pu."""
        p = self.p_gen + self.p_extra - self.p_load
        q = self.q_gen - self.q_load
        return (p + 1j * q) / base_mva


@dataclass
class PowerFlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    p_slack: float
    q_slack: float
    history: list = field(default_factory=list)
    switched_to_pq: tuple = ()

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)

    def to_json(self) -> str:
        """Diagnostic dump including the per-iteration mismatch history."""
        return json.dumps({
            'converged': self.converged,
            'iterations': self.iterations,
            'max_mismatch': self.max_mismatch,
            'p_slack': self.p_slack,
            'q_slack': self.q_slack,
            'history': self.history,
            'switched_to_pq': list(self.switched_to_pq),
            'v_mag': self.v_mag.tolist(),
            'v_ang': self.v_ang.tolist(),
        }, indent=2)


def _check_state(case, v_mag, v_ang):
    if len(v_mag) != case.n_bus or len(v_ang) != case.n_bus:
        raise DomainError(f'state vectors must have length {case.n_bus}, '
                          f'got {len(v_mag)} and {len(v_ang)}')


def _residual(ybus, voltage, s_sched, pvpq, pq) -> np.ndarray:
    s_calc = voltage * np.conj(ybus @ voltage)
    s_mis = s_sched - s_calc
    return np.r_[s_mis[pvpq].real, s_mis[pq].imag]


def mismatch(case, v_mag, v_ang, injections: Injections = None) -> np.ndarray:
    """
    Power-balance residuals, scheduled minus calculated

    Returns:
        Stacked vector of ΔP at every non-slack bus followed by ΔQ at every PQ bus (pu)

    Raises:
        DomainError: If the state vectors do not match the bus count
    """
    v_mag = np.asarray(v_mag, dtype=float)
    v_ang = np.asarray(v_ang, dtype=float)
    _check_state(case, v_mag, v_ang)
    if injections is None:
        injections = Injections.from_case(case)
    pvpq = np.r_[case.pv_indices, case.pq_indices]
    return _residual(case.ybus, v_mag * np.exp(1j * v_ang), injections.scheduled(case.base_mva),
                     pvpq, case.pq_indices)


def power_derivatives(ybus, voltage):
    """Partial derivatives of the complex bus injections w.r.t. |V| and angle (sparse)."""
    current = ybus @ voltage
    v_norm = voltage / np.abs(voltage)
    diag_v = diags(voltage)
    diag_i = diags(current)
    diag_vn = diags(v_norm)
    ds_dvm = diag_v @ (ybus @ diag_vn).conj() + diag_i.conj() @ diag_vn
    ds_dva = 1j * diag_v @ (diag_i - ybus @ diag_v).conj()
    return csr_matrix(ds_dvm), csr_matrix(ds_dva)


def _jacobian(ybus, voltage, pvpq, pq) -> csr_matrix:
    ds_dvm, ds_dva = power_derivatives(ybus, voltage)
    j11 = ds_dva[pvpq][:, pvpq].real
    j12 = ds_dvm[pvpq][:, pq].real
    j21 = ds_dva[pq][:, pvpq].imag
    j22 = ds_dvm[pq][:, pq].imag
    return csr_matrix(bmat([[j11, j12], [j21, j22]], format='csr'))


def jacobian(case, v_mag, v_ang) -> csr_matrix:
    """Jacobian of the calculated injections, ordered like ``mismatch``."""
    v_mag = np.asarray(v_mag, dtype=float)
    v_ang = np.asarray(v_ang, dtype=float)
    _check_state(case, v_mag, v_ang)
    pvpq = np.r_[case.pv_indices, case.pq_indices]
    return _jacobian(case.ybus, v_mag * np.exp(1j * v_ang), pvpq, case.pq_indices)


def linear_solve(matrix, rhs, dense_limit: int = 300) -> np.ndarray:
    """Solve ``matrix @ x = rhs``, densely below ``dense_limit`` unknowns."""
    try:
        if matrix.shape[0] <= dense_limit:
            dense = matrix.toarray() if issparse(matrix) else matrix
            x = np.linalg.solve(dense, rhs)
        else:
            x = spsolve(csr_matrix(matrix).tocsc(), rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularJacobianError(f'singular Jacobian: {exc}')
    if not np.all(np.isfinite(x)):
        raise SingularJacobianError('singular Jacobian: non-finite update')
    return x


def _newton(ybus, v_mag, v_ang, s_sched, pv, pq, options):
    pvpq = np.r_[pv, pq]
    n_pvpq = len(pvpq)
    voltage = v_mag * np.exp(1j * v_ang)
    history = []

    f = _residual(ybus, voltage, s_sched, pvpq, pq)
    norm = float(np.max(np.abs(f))) if f.size else 0.0
    history.append(norm)
    iterations = 0
    converged = norm <= options.tol

    while not converged and iterations < options.max_iter:
        iterations += 1
        jac = _jacobian(ybus, voltage, pvpq, pq)
        dx = linear_solve(jac, f, options.dense_bus_limit)
        v_ang[pvpq] += dx[:n_pvpq]
        v_mag[pq] += dx[n_pvpq:]
        voltage = v_mag * np.exp(1j * v_ang)

        f = _residual(ybus, voltage, s_sched, pvpq, pq)
        if not np.all(np.isfinite(f)):
            history.append(float('inf'))
            norm = float('inf')
            break
        norm = float(np.max(np.abs(f))) if f.size else 0.0
        history.append(norm)
        converged = norm <= options.tol

    return v_mag, v_ang, converged, iterations, norm, history


def solve_nr(case, injections: Injections = None, options: PowerFlowOptions = None,
             v_mag=None, v_ang=None) -> PowerFlowSolution:
    """
    Solve the AC power flow by full Newton-Raphson

    Args:
        case: Validated NetworkCase
        injections: Per-bus overrides, defaults to the case's own loads and generation
        options: Tolerance, iteration cap and Q-limit switching
        v_mag, v_ang: Warm start; generator buses are reset to their setpoints

    Returns:
        PowerFlowSolution. Non-convergence is reported through ``converged``.

    Raises:
        SingularJacobianError: If a Newton step cannot be solved
    """
    options = options or PowerFlowOptions()
    injections = injections or Injections.from_case(case)
    v_mag = np.array(case.v_start if v_mag is None else v_mag, dtype=float)
    v_ang = np.array(case.a_start if v_ang is None else v_ang, dtype=float)
    _check_state(case, v_mag, v_ang)

    regulated = np.r_[case.pv_indices, case.slack_index].astype(int)
    v_mag[regulated] = case.v_start[regulated]

    pv = case.pv_indices.copy()
    pq = case.pq_indices.copy()
    q_fixed = np.array(injections.q_gen)
    switched = []
    total_iterations = 0
    history = []

    while True:
        current = replace(injections, q_gen=q_fixed)
        s_sched = current.scheduled(case.base_mva)
        v_mag, v_ang, converged, iterations, norm, hist = _newton(
            case.ybus, v_mag, v_ang, s_sched, pv, pq, options)
        total_iterations += iterations
        history += hist
        if not (converged and options.enforce_q_limits and len(pv)):
            break
        violators = _q_limit_violations(case, v_mag, v_ang, current, pv)
        if not violators:
            break
        for bus_index, limit in violators:
            logger.debug(f'Bus {case.bus_ids[bus_index]} hit its reactive limit at {limit:.2f} MVAr')
            q_fixed[bus_index] = limit
            switched.append(int(case.bus_ids[bus_index]))
        moved = [i for i, _ in violators]
        pv = np.array([i for i in pv if i not in moved], dtype=int)
        pq = np.sort(np.r_[pq, moved]).astype(int)

    voltage = v_mag * np.exp(1j * v_ang)
    s_calc = voltage * np.conj(case.ybus @ voltage) * case.base_mva
    slack = case.slack_index
    p_slack = float(s_calc[slack].real + injections.p_load[slack] - injections.p_extra[slack])
    q_slack = float(s_calc[slack].imag + injections.q_load[slack])

    if not converged:
        logger.warning(f'Power flow did not converge after {total_iterations} iterations '
                       f'(max mismatch {norm:.3e} pu)')

    return PowerFlowSolution(
        v_mag=v_mag, v_ang=v_ang, converged=bool(converged), iterations=total_iterations,
        max_mismatch=norm, p_slack=p_slack, q_slack=q_slack, history=history,
        switched_to_pq=tuple(switched),
    )


def _q_limit_violations(case, v_mag, v_ang, injections, pv):
    voltage = v_mag * np.exp(1j * v_ang)
    q_calc = (voltage * np.conj(case.ybus @ voltage)).imag * case.base_mva
    q_gen = q_calc + injections.q_load
    q_max = np.zeros(case.n_bus)
    q_min = np.zeros(case.n_bus)
    for gen in case.active_generators:
        q_max[case.index_of[gen.bus]] += gen.q_max
        q_min[case.index_of[gen.bus]] += gen.q_min
    violators = []
    for i in pv:
        if q_gen[i] > q_max[i]:
            violators.append((i, q_max[i]))
        elif q_gen[i] < q_min[i]:
            violators.append((i, q_min[i]))
    return violators
