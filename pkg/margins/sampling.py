"""
Experimental designs and the uniform -> correlated -> physical transform chain
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .exceptions import DomainError, StageError
from .uncertainty import vine_sample_inverse

logger = logging.getLogger(__name__)

# independent RNG streams per stage of the assessment
STREAMS = {
    'training': 1,
    'evaluation': 2,
    'per-bus-training': 3,
    'per-bus-evaluation': 4,
}


class DesignStage(Enum):
    UNIFORM_IID = 'uniform_iid'
    UNIFORM_CORRELATED = 'uniform_correlated'
    PHYSICAL = 'physical'


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    values: np.ndarray
    stage: DesignStage
    seed: int
    column_labels: tuple = ()
    marginals_digest: str = ''

    def __post_init__(self):
        values = np.array(self.values, dtype=float, order='C')
        if values.ndim != 2:
            raise DomainError(f'design values must be a 2-D array, got {values.ndim}-D')
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)
        labels = tuple(self.column_labels) or tuple(f'x{i + 1}' for i in range(values.shape[1]))
        if len(labels) != values.shape[1]:
            raise DomainError(f'{len(labels)} column labels for {values.shape[1]} columns')
        object.__setattr__(self, 'column_labels', labels)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def with_values(self, values, stage: DesignStage, **changes):
        fields = dict(values=values, stage=stage, seed=self.seed, column_labels=self.column_labels,
                      marginals_digest=self.marginals_digest)
        fields.update(changes)
        return DesignMatrix(**fields)


def rng_for(seed: int, stream: str) -> np.random.Generator:
    """PCG64 generator on a named stream of the given seed."""
    try:
        key = STREAMS[stream]
    except KeyError:
        raise DomainError(f'unknown RNG stream "{stream}"')
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))


def _open_uniform(rng, size):
    # draws from [tiny, 1) so no value is exactly zero
    return rng.uniform(np.finfo(float).tiny, 1.0, size)


def lhs(n: int, p: int, seed: int, stream: str = 'training', column_labels=()) -> DesignMatrix:
    """
    Latin hypercube design with random jitter inside each stratum

    Args:
        n: Number of rows, one per stratum
        p: Number of columns
        seed: Root seed
        stream: Named RNG stream

    Returns:
        DesignMatrix at stage UNIFORM_IID
    """
    if n < 1 or p < 1:
        raise DomainError(f'lhs needs n >= 1 and p >= 1, got n={n}, p={p}')
    rng = rng_for(seed, stream)
    values = np.empty((n, p))
    for j in range(p):
        values[:, j] = (rng.permutation(n) + _open_uniform(rng, n)) / n
    return DesignMatrix(values, DesignStage.UNIFORM_IID, seed, column_labels)


def mc_uniform(n: int, p: int, seed: int, stream: str = 'evaluation', column_labels=()) -> DesignMatrix:
    if n < 0 or p < 1:
        raise DomainError(f'mc_uniform needs n >= 0 and p >= 1, got n={n}, p={p}')
    rng = rng_for(seed, stream)
    return DesignMatrix(_open_uniform(rng, (n, p)), DesignStage.UNIFORM_IID, seed, column_labels)


def correlate(design: DesignMatrix, spec) -> DesignMatrix:
    """Push independent uniforms through the vine's inverse Rosenblatt transform."""
    if design.stage != DesignStage.UNIFORM_IID:
        raise StageError(f'correlate expects a {DesignStage.UNIFORM_IID.value} design, '
                         f'got {design.stage.value}')
    if design.p != spec.dim:
        raise DomainError(f'design has {design.p} columns but the vine has dimension {spec.dim}')
    values = vine_sample_inverse(spec, design.values) if design.n else design.values
    return design.with_values(values, DesignStage.UNIFORM_CORRELATED)


def to_physical(design: DesignMatrix, marginals) -> DesignMatrix:
    """Column-wise inverse cdf."""
    if design.stage == DesignStage.PHYSICAL:
        raise StageError('design is already in physical units')
    if len(marginals) != design.p:
        raise DomainError(f'{len(marginals)} marginals for {design.p} columns')
    values = np.empty_like(design.values)
    for j, marginal in enumerate(marginals):
        values[:, j] = marginal.distribution.ppf(design.values[:, j])
    return design.with_values(values, DesignStage.PHYSICAL, marginals_digest=marginals_digest(marginals))


def marginals_digest(marginals) -> str:
    payload = json.dumps([m.to_dict() for m in marginals], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def design_digest(design: DesignMatrix) -> str:
    """Hash of the values and labels; equal digests mean identical samples."""
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(design.values, dtype='<f8').tobytes())
    digest.update('\x1f'.join(design.column_labels).encode())
    return digest.hexdigest()


def write_design_csv(design: DesignMatrix, path, digits: int = 17) -> Path:
    """Write the design as CSV plus a JSON metadata sidecar; returns the CSV path."""
    path = Path(path)
    np.savetxt(path, design.values, delimiter=',', header=','.join(design.column_labels),
               comments='', fmt=f'%.{digits}g')
    sidecar = {
        'stage': design.stage.value,
        'seed': design.seed,
        'n': design.n,
        'p': design.p,
        'column_labels': list(design.column_labels),
        'marginals_digest': design.marginals_digest,
        'values_digest': design_digest(design),
    }
    path.with_suffix('.json').write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    logger.debug(f'Wrote {design.stage.value} design ({design.n}x{design.p}) to {path}')
    return path
