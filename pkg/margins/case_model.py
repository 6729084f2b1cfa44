"""
Power-system case data
Parses MATPOWER-style case files, validates them, and derives the bus admittance matrix
"""

import json
import logging
import re
from dataclasses import dataclass, asdict
from enum import IntEnum
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import connected_components

from .exceptions import CaseFormatError, CaseValidationError

logger = logging.getLogger(__name__)

# minimum column counts of the MATPOWER tables; trailing columns are ignored
BUS_COLUMNS = 13
GEN_COLUMNS = 8
BRANCH_COLUMNS = 11

_ASSIGNMENT = re.compile(r'^\s*mpc\.(\w+)\s*=\s*(.*)$')


class BusKind(IntEnum):
    PQ = 1
    PV = 2
    SLACK = 3


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    p_load: float  # MW
    q_load: float  # MVAr
    g_shunt: float  # MW at 1 pu V
    b_shunt: float  # MVAr at 1 pu V
    v_mag: float  # pu
    v_ang: float  # rad
    base_kv: float


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float
    tap: float = 1.0
    shift: float = 0.0  # rad
    in_service: bool = True


@dataclass(frozen=True)
class Generator:
    bus: int
    p_gen: float  # MW
    q_gen: float  # MVAr
    q_max: float
    q_min: float
    v_set: float  # pu
    in_service: bool = True


@dataclass(frozen=True)
class NetworkCase:
    """Immutable network description. Derived arrays are cached on first use."""

    base_mva: float
    buses: tuple
    branches: tuple
    generators: tuple = ()

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @cached_property
    def bus_ids(self) -> np.ndarray:
        return np.array([bus.id for bus in self.buses], dtype=int)

    @cached_property
    def index_of(self) -> dict:
        return {bus.id: i for i, bus in enumerate(self.buses)}

    @cached_property
    def slack_index(self) -> int:
        return next(i for i, bus in enumerate(self.buses) if bus.kind == BusKind.SLACK)

    @cached_property
    def active_generators(self) -> tuple:
        return tuple(gen for gen in self.generators if gen.in_service)

    @cached_property
    def pv_indices(self) -> np.ndarray:
        # a PV bus without an in-service generator is solved as PQ
        regulated = {self.index_of[gen.bus] for gen in self.active_generators}
        return np.array([i for i, bus in enumerate(self.buses)
                         if bus.kind == BusKind.PV and i in regulated], dtype=int)

    @cached_property
    def pq_indices(self) -> np.ndarray:
        taken = set(self.pv_indices.tolist()) | {self.slack_index}
        return np.array([i for i in range(self.n_bus) if i not in taken], dtype=int)

    @cached_property
    def p_load_mw(self) -> np.ndarray:
        return np.array([bus.p_load for bus in self.buses], dtype=float)

    @cached_property
    def q_load_mvar(self) -> np.ndarray:
        return np.array([bus.q_load for bus in self.buses], dtype=float)

    @cached_property
    def p_gen_mw(self) -> np.ndarray:
        p_gen = np.zeros(self.n_bus)
        for gen in self.active_generators:
            p_gen[self.index_of[gen.bus]] += gen.p_gen
        return p_gen

    @property
    def load_pu(self) -> np.ndarray:
        return (self.p_load_mw + 1j * self.q_load_mvar) / self.base_mva

    @cached_property
    def v_start(self) -> np.ndarray:
        """Initial voltage magnitudes with generator setpoints applied."""
        v_mag = np.array([bus.v_mag for bus in self.buses], dtype=float)
        for gen in self.active_generators:
            v_mag[self.index_of[gen.bus]] = gen.v_set
        return v_mag

    @cached_property
    def a_start(self) -> np.ndarray:
        return np.array([bus.v_ang for bus in self.buses], dtype=float)

    @cached_property
    def ybus(self) -> csr_matrix:
        return admittance_matrix(self)

    @property
    def total_load_mw(self) -> float:
        return float(self.p_load_mw.sum())

    def bus(self, bus_id: int) -> Bus:
        try:
            return self.buses[self.index_of[bus_id]]
        except KeyError:
            raise CaseValidationError(f'Unknown bus id {bus_id}')


def parse_case(text: str) -> NetworkCase:
    """
    Parse a MATPOWER-style case file

    Args:
        text: Contents of a ``mpc.baseMVA`` / ``mpc.bus`` / ``mpc.gen`` /
            ``mpc.branch`` case file

    Returns:
        A validated NetworkCase

    Raises:
        CaseFormatError: On syntax errors (with line number)
        CaseValidationError: On semantic errors
    """
    tables, base_mva = _read_tables(text)

    if base_mva is None:
        raise CaseFormatError('mpc.baseMVA is missing')
    for name in ('bus', 'branch'):
        if name not in tables:
            raise CaseFormatError(f'mpc.{name} is missing')

    buses = tuple(_bus_from_row(row, lineno) for lineno, row in tables['bus'])
    generators = tuple(_gen_from_row(row, lineno) for lineno, row in tables.get('gen', []))
    branches = tuple(_branch_from_row(row, lineno) for lineno, row in tables['branch'])

    case = NetworkCase(base_mva=base_mva, buses=buses, branches=branches, generators=generators)
    validate_case(case)
    logger.info(f'Parsed case: {case.n_bus} buses, {len(branches)} branches, '
                f'{len(generators)} generators, {case.total_load_mw:.1f} MW load')
    return case


def load_case(path) -> NetworkCase:
    return parse_case(Path(path).read_text())


def _read_tables(text: str):
    tables = {}
    base_mva = None
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        lineno = i + 1
        line = _strip_comment(lines[i])
        i += 1
        match = _ASSIGNMENT.match(line)
        if not match:
            continue
        name, value = match.group(1), match.group(2).strip()

        if value.startswith('['):
            body = [(lineno, value[1:])]
            while ']' not in body[-1][1]:
                if i >= len(lines):
                    raise CaseFormatError(f'unterminated matrix mpc.{name}', lineno)
                body.append((i + 1, _strip_comment(lines[i])))
                i += 1
            last_lineno, last = body[-1]
            body[-1] = (last_lineno, last[:last.index(']')])
            if name in ('bus', 'gen', 'branch'):
                tables[name] = _matrix_rows(body)
        elif value.startswith('{'):
            depth_line = value
            while '}' not in depth_line:
                if i >= len(lines):
                    raise CaseFormatError(f'unterminated cell array mpc.{name}', lineno)
                depth_line = _strip_comment(lines[i])
                i += 1
        elif name == 'baseMVA':
            token = value.rstrip(';').strip()
            try:
                base_mva = float(token)
            except ValueError:
                raise CaseFormatError(f'invalid baseMVA value "{token}"', lineno)
    return tables, base_mva


def _strip_comment(line: str) -> str:
    return line.split('%', 1)[0]


def _matrix_rows(body):
    rows = []
    for lineno, text in body:
        for chunk in text.split(';'):
            tokens = chunk.replace(',', ' ').split()
            if not tokens:
                continue
            try:
                rows.append((lineno, [float(token) for token in tokens]))
            except ValueError:
                bad = next(t for t in tokens if not _is_number(t))
                raise CaseFormatError(f'non-numeric entry "{bad}"', lineno)
    return rows


def _is_number(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def _require(row, width, table, lineno):
    if len(row) < width:
        raise CaseFormatError(f'{table} row has {len(row)} columns, expected at least {width}', lineno)


def _bus_from_row(row, lineno) -> Bus:
    _require(row, BUS_COLUMNS, 'bus', lineno)
    try:
        kind = BusKind(int(row[1]))
    except ValueError:
        raise CaseFormatError(f'unsupported bus type {row[1]:g}', lineno)
    return Bus(
        id=int(row[0]), kind=kind, p_load=row[2], q_load=row[3], g_shunt=row[4],
        b_shunt=row[5], v_mag=row[7], v_ang=float(np.deg2rad(row[8])), base_kv=row[9],
    )


def _gen_from_row(row, lineno) -> Generator:
    _require(row, GEN_COLUMNS, 'gen', lineno)
    return Generator(
        bus=int(row[0]), p_gen=row[1], q_gen=row[2], q_max=row[3], q_min=row[4],
        v_set=row[5], in_service=row[7] > 0,
    )


def _branch_from_row(row, lineno) -> Branch:
    _require(row, BRANCH_COLUMNS, 'branch', lineno)
    # MATPOWER: ratio 0 means a line without transformer
    tap = row[8] if row[8] != 0 else 1.0
    return Branch(
        from_bus=int(row[0]), to_bus=int(row[1]), r=row[2], x=row[3], b_charging=row[4],
        tap=tap, shift=float(np.deg2rad(row[9])), in_service=row[10] > 0,
    )


def validate_case(case: NetworkCase) -> None:
    """Raise CaseValidationError unless the case satisfies every structural invariant."""
    if not case.base_mva > 0:
        raise CaseValidationError(f'baseMVA must be positive, got {case.base_mva}')
    if not case.buses:
        raise CaseValidationError('case has no buses')

    ids = [bus.id for bus in case.buses]
    seen = set()
    for bus in case.buses:
        if bus.id <= 0:
            raise CaseValidationError(f'bus id {bus.id} is not a positive integer')
        if bus.id in seen:
            raise CaseValidationError(f'duplicate bus id {bus.id}')
        seen.add(bus.id)
        if not bus.v_mag > 0:
            raise CaseValidationError(f'bus {bus.id} has non-positive voltage magnitude')

    slacks = [bus.id for bus in case.buses if bus.kind == BusKind.SLACK]
    if len(slacks) != 1:
        raise CaseValidationError(f'expected exactly one slack bus, found {len(slacks)}')

    for branch in case.branches:
        for end in (branch.from_bus, branch.to_bus):
            if end not in seen:
                raise CaseValidationError(
                    f'branch {branch.from_bus}-{branch.to_bus} references unknown bus {end}')
        if branch.tap <= 0:
            raise CaseValidationError(f'branch {branch.from_bus}-{branch.to_bus} has tap <= 0')
        if branch.in_service and branch.r ** 2 + branch.x ** 2 == 0:
            raise CaseValidationError(f'branch {branch.from_bus}-{branch.to_bus} has zero impedance')

    kinds = {bus.id: bus.kind for bus in case.buses}
    for gen in case.generators:
        if gen.bus not in seen:
            raise CaseValidationError(f'generator references unknown bus {gen.bus}')
        if gen.q_min > gen.q_max:
            raise CaseValidationError(f'generator at bus {gen.bus} has q_min > q_max')
        if gen.in_service and kinds[gen.bus] == BusKind.PQ:
            raise CaseValidationError(f'generator at bus {gen.bus} sits on a PQ bus')

    index = {bus_id: i for i, bus_id in enumerate(ids)}
    live = [b for b in case.branches if b.in_service]
    graph = coo_matrix(
        (np.ones(len(live)), ([index[b.from_bus] for b in live], [index[b.to_bus] for b in live])),
        shape=(len(ids), len(ids)),
    )
    n_islands, _ = connected_components(graph, directed=False)
    if n_islands > 1:
        raise CaseValidationError(f'network splits into {n_islands} islands')


def admittance_matrix(case: NetworkCase) -> csr_matrix:
    """
    Build the bus admittance matrix in per unit

    Uses the standard pi model with an ideal phase-shifting transformer on the
    from side. Out-of-service branches are skipped; shunts enter the diagonal.
    """
    n = case.n_bus
    index = case.index_of
    rows, cols, vals = [], [], []
    for branch in case.branches:
        if not branch.in_service:
            continue
        f, t = index[branch.from_bus], index[branch.to_bus]
        y_series = 1.0 / complex(branch.r, branch.x)
        ratio = branch.tap * np.exp(1j * branch.shift)
        y_tt = y_series + 0.5j * branch.b_charging
        y_ff = y_tt / (ratio * np.conj(ratio))
        y_ft = -y_series / np.conj(ratio)
        y_tf = -y_series / ratio
        rows += [f, f, t, t]
        cols += [f, t, f, t]
        vals += [y_ff, y_ft, y_tf, y_tt]

    shunt = np.array([complex(bus.g_shunt, bus.b_shunt) for bus in case.buses]) / case.base_mva
    rows += list(range(n))
    cols += list(range(n))
    vals += list(shunt)
    # duplicate entries are summed on conversion
    return coo_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n)).tocsr()


def case_to_dict(case: NetworkCase) -> dict:
    return {
        'base_mva': case.base_mva,
        'buses': [dict(asdict(bus), kind=bus.kind.name) for bus in case.buses],
        'branches': [asdict(branch) for branch in case.branches],
        'generators': [asdict(gen) for gen in case.generators],
    }


def case_to_json(case: NetworkCase) -> str:
    """Canonical JSON rendering, for debugging and diffing."""
    return json.dumps(case_to_dict(case), indent=2, sort_keys=True)


def serialize_case(case: NetworkCase, name: str = 'case') -> str:
    """Write a case back out in the MATPOWER table layout."""
    out = [f'function mpc = {name}', "mpc.version = '2';", f'mpc.baseMVA = {case.base_mva!r};', '',
           '%% bus data', 'mpc.bus = [']
    for bus in case.buses:
        out.append(_row([bus.id, int(bus.kind), bus.p_load, bus.q_load, bus.g_shunt, bus.b_shunt, 1,
                         bus.v_mag, float(np.rad2deg(bus.v_ang)), bus.base_kv, 1, 1.1, 0.9]))
    out += ['];', '', '%% generator data', 'mpc.gen = [']
    for gen in case.generators:
        out.append(_row([gen.bus, gen.p_gen, gen.q_gen, gen.q_max, gen.q_min, gen.v_set,
                         case.base_mva, int(gen.in_service)]))
    out += ['];', '', '%% branch data', 'mpc.branch = [']
    for branch in case.branches:
        out.append(_row([branch.from_bus, branch.to_bus, branch.r, branch.x, branch.b_charging, 0, 0, 0,
                         branch.tap, float(np.rad2deg(branch.shift)), int(branch.in_service)]))
    out += ['];', '']
    return '\n'.join(out)


def _row(values) -> str:
    return '\t' + '\t'.join(repr(v) if isinstance(v, float) else str(v) for v in values) + ';'
