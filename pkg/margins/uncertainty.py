"""
Marginal distributions, bivariate pair copulas and C-/D-vine constructions

h-functions follow the convention h(u | v) = dC(u, v)/dv. Every family here is
exchangeable, so the conditional in the other direction is h(v | u).
"""

import logging
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np
from scipy import stats
from scipy.integrate import quad

from .exceptions import CopulaInversionError, DomainError

logger = logging.getLogger(__name__)

# uniforms are clipped to [EPS, 1 - EPS] before any copula evaluation
EPS = 1e-12
GUMBEL_INVERSION_TOL = 1e-10
GUMBEL_INVERSION_MAX_ITER = 200


class MarginalFamily(Enum):
    GAUSSIAN = 'gaussian'
    WEIBULL = 'weibull'


@dataclass(frozen=True)
class Marginal:
    """Gaussian(mean, std) or Weibull(shape, scale)."""

    family: MarginalFamily
    first: float
    second: float
    units: str = 'MW'

    def __post_init__(self):
        if self.family == MarginalFamily.GAUSSIAN:
            if not self.second > 0:
                raise DomainError(f'Gaussian std must be positive, got {self.second}')
        elif not (self.first > 0 and self.second > 0):
            raise DomainError(f'Weibull shape and scale must be positive, got {self.first}, {self.second}')

    @classmethod
    def gaussian(cls, mean: float, std: float, units: str = 'MW'):
        return cls(MarginalFamily.GAUSSIAN, float(mean), float(std), units)

    @classmethod
    def weibull(cls, shape: float, scale: float, units: str = 'MW'):
        return cls(MarginalFamily.WEIBULL, float(shape), float(scale), units)

    @cached_property
    def distribution(self):
        if self.family == MarginalFamily.GAUSSIAN:
            return stats.norm(loc=self.first, scale=self.second)
        return stats.weibull_min(c=self.first, scale=self.second)

    @property
    def mean(self) -> float:
        return float(self.distribution.mean())

    @property
    def std(self) -> float:
        return float(self.distribution.std())

    def to_dict(self) -> dict:
        if self.family == MarginalFamily.GAUSSIAN:
            return {'family': 'gaussian', 'mean': self.first, 'std': self.second, 'units': self.units}
        return {'family': 'weibull', 'shape': self.first, 'scale': self.second, 'units': self.units}


def marginal_cdf(m: Marginal, x):
    return m.distribution.cdf(x)


def marginal_pdf(m: Marginal, x):
    return m.distribution.pdf(x)


def marginal_inv_cdf(m: Marginal, u):
    """
    Quantile function

    Raises:
        DomainError: If any u lies outside the open unit interval
    """
    _check_open(u, 'u')
    return m.distribution.ppf(u)


def _check_open(values, name):
    values = np.asarray(values, dtype=float)
    if values.size and not (np.all(values > 0) and np.all(values < 1)):
        raise DomainError(f'{name} must lie in the open interval (0, 1)')


def _clip(values):
    return np.clip(np.asarray(values, dtype=float), EPS, 1.0 - EPS)


class CopulaFamily(Enum):
    INDEPENDENCE = 'independence'
    GAUSSIAN = 'gaussian'
    FRANK = 'frank'
    GUMBEL = 'gumbel'


@dataclass(frozen=True)
class PairCopula:
    family: CopulaFamily
    parameter: float = None

    def __post_init__(self):
        family, par = self.family, self.parameter
        if family == CopulaFamily.INDEPENDENCE:
            return
        if par is None or not np.isfinite(par):
            raise DomainError(f'{family.value} copula needs a finite parameter')
        if family == CopulaFamily.GAUSSIAN and not -1 < par < 1:
            raise DomainError(f'Gaussian copula rho must lie in (-1, 1), got {par}')
        if family == CopulaFamily.FRANK and par == 0:
            raise DomainError('Frank copula theta must be non-zero')
        if family == CopulaFamily.GUMBEL and par < 1:
            raise DomainError(f'Gumbel copula theta must be >= 1, got {par}')

    def cdf(self, u, v):
        if self.family == CopulaFamily.INDEPENDENCE:
            return np.asarray(u, dtype=float) * np.asarray(v, dtype=float)
        u, v = _clip(u), _clip(v)
        par = self.parameter
        if self.family == CopulaFamily.FRANK:
            return -np.log((np.expm1(-par) + np.expm1(-par * u) * np.expm1(-par * v)) / np.expm1(-par)) / par
        if self.family == CopulaFamily.GUMBEL:
            return np.exp(-self._gumbel_a(u, v))
        # Gaussian: integrate the h-function along v
        integrate = np.vectorize(
            lambda a, b: quad(lambda t: float(self.h(a, t)), 0.0, b, epsabs=1e-14, epsrel=1e-12)[0])
        return integrate(u, v)

    def density(self, u, v):
        return np.exp(self.log_density(u, v))

    def log_density(self, u, v):
        if self.family == CopulaFamily.INDEPENDENCE:
            return np.zeros(np.broadcast(np.asarray(u), np.asarray(v)).shape)
        u, v = _clip(u), _clip(v)
        par = self.parameter
        if self.family == CopulaFamily.GAUSSIAN:
            x, y = stats.norm.ppf(u), stats.norm.ppf(v)
            one_minus = 1.0 - par * par
            return -0.5 * np.log(one_minus) - (par * par * (x * x + y * y) - 2 * par * x * y) / (2 * one_minus)
        if self.family == CopulaFamily.FRANK:
            a = -np.expm1(-par * u)
            b = -np.expm1(-par * v)
            d = -np.expm1(-par)
            return np.log(par * d) - par * (u + v) - 2 * np.log(np.abs(d - a * b))
        x, y = -np.log(u), -np.log(v)
        a = self._gumbel_a(u, v)
        return (-a - np.log(u) - np.log(v) + (par - 1) * (np.log(x) + np.log(y))
                + (2 - 2 * par) * np.log(a) + np.log1p((par - 1) / a))

    def _gumbel_a(self, u, v):
        par = self.parameter
        return ((-np.log(u)) ** par + (-np.log(v)) ** par) ** (1.0 / par)

    def h(self, u, v):
        """Conditional cdf of u given v."""
        if self.family == CopulaFamily.INDEPENDENCE:
            return np.asarray(u, dtype=float)
        u, v = _clip(u), _clip(v)
        par = self.parameter
        if self.family == CopulaFamily.GAUSSIAN:
            x, y = stats.norm.ppf(u), stats.norm.ppf(v)
            result = stats.norm.cdf((x - par * y) / np.sqrt(1 - par * par))
        elif self.family == CopulaFamily.FRANK:
            result = (-np.exp(-par * v) * np.expm1(-par * u)
                      / (-np.expm1(-par) - np.expm1(-par * u) * np.expm1(-par * v)))
        else:
            a = self._gumbel_a(u, v)
            y = -np.log(v)
            result = np.exp(-a) * a ** (1 - par) * y ** (par - 1) / v
        return _clip(result)

    def h_inv(self, w, v):
        """u such that h(u | v) = w."""
        if self.family == CopulaFamily.INDEPENDENCE:
            return np.asarray(w, dtype=float)
        w, v = _clip(w), _clip(v)
        par = self.parameter
        if self.family == CopulaFamily.GAUSSIAN:
            x, y = stats.norm.ppf(w), stats.norm.ppf(v)
            return _clip(stats.norm.cdf(x * np.sqrt(1 - par * par) + par * y))
        if self.family == CopulaFamily.FRANK:
            d = -np.expm1(-par)
            b = -np.expm1(-par * v)
            a = w * d / (np.exp(-par * v) + w * b)
            return _clip(-np.log1p(-a) / par)
        return self._gumbel_h_inv(w, v)

    def _gumbel_h_inv(self, w, v):
        w, v = np.broadcast_arrays(w, v)
        lo = np.full(w.shape, EPS)
        hi = np.full(w.shape, 1.0 - EPS)
        for _ in range(GUMBEL_INVERSION_MAX_ITER):
            mid = 0.5 * (lo + hi)
            below = self.h(mid, v) < w
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo < 1e-6):
                break
        # Newton polish, kept inside the bracket
        u = 0.5 * (lo + hi)
        for _ in range(GUMBEL_INVERSION_MAX_ITER):
            error = self.h(u, v) - w
            done = np.abs(error) <= GUMBEL_INVERSION_TOL
            if np.all(done):
                break
            lo = np.where(error < 0, np.maximum(lo, u), lo)
            hi = np.where(error > 0, np.minimum(hi, u), hi)
            candidate = u - error / np.maximum(self.density(u, v), 1e-300)
            inside = (candidate > lo) & (candidate < hi)
            candidate = np.where(inside, candidate, 0.5 * (lo + hi))
            u = np.where(done, u, candidate)
        error = np.abs(self.h(u, v) - w)
        # a collapsed bracket means w sits at the clipping floor or ceiling
        failed = (error > GUMBEL_INVERSION_TOL) & (hi - lo > 1e-15)
        if np.any(failed):
            bad = np.flatnonzero(failed)[0]
            logger.warning(f'Gumbel h-inverse failed for {failed.sum()} inputs')
            raise CopulaInversionError(
                f'Gumbel h-inverse did not converge (theta={self.parameter})',
                w=float(w.flat[bad]), v=float(v.flat[bad]))
        return _clip(u)

    def tau(self) -> float:
        """Kendall's tau implied by the family and parameter."""
        par = self.parameter
        if self.family == CopulaFamily.INDEPENDENCE:
            return 0.0
        if self.family == CopulaFamily.GAUSSIAN:
            return 2.0 * np.arcsin(par) / np.pi
        if self.family == CopulaFamily.GUMBEL:
            return 1.0 - 1.0 / par
        return 1.0 - 4.0 / par * (1.0 - debye1(par))

    def to_dict(self) -> dict:
        return {'family': self.family.value, 'parameter': self.parameter}


def debye1(x: float) -> float:
    """First Debye function (1/x) * integral_0^x t / (e^t - 1) dt."""
    integrand = lambda t: 1.0 if t == 0 else t / np.expm1(t)
    value, _ = quad(integrand, 0.0, x, epsabs=1e-13, epsrel=1e-12)
    return value / x


def pair_cdf(c: PairCopula, u, v):
    return c.cdf(u, v)


def pair_density(c: PairCopula, u, v):
    _check_open(u, 'u')
    _check_open(v, 'v')
    return c.density(u, v)


def h_func(c: PairCopula, u, v):
    _check_open(u, 'u')
    _check_open(v, 'v')
    return c.h(u, v)


def h_inv(c: PairCopula, w, v):
    _check_open(w, 'w')
    _check_open(v, 'v')
    return c.h_inv(w, v)


def tau_of(c: PairCopula) -> float:
    return float(c.tau())


class VineKind(Enum):
    CVINE = 'C'
    DVINE = 'D'


@dataclass(frozen=True)
class VineEdge:
    tree: int
    index: int
    copula: PairCopula


@dataclass(frozen=True)
class VineSpec:
    """
    C- or D-vine over ``dim`` variables

    Tree t (1-based) holds edges 1..dim-t. In a D-vine edge j of tree t couples
    variables j and j+t; in a C-vine it couples t and t+j. ``variable_order``
    maps vine positions to input columns (1-based).
    """

    kind: VineKind
    dim: int
    edges: tuple
    variable_order: tuple = None

    def __post_init__(self):
        p = self.dim
        if p < 2:
            raise DomainError(f'vine dimension must be at least 2, got {p}')
        if len(self.edges) != p * (p - 1) // 2:
            raise DomainError(f'a {p}-dimensional vine needs {p * (p - 1) // 2} edges, got {len(self.edges)}')
        expected = {(t, j) for t in range(1, p) for j in range(1, p - t + 1)}
        given = {(edge.tree, edge.index) for edge in self.edges}
        if given != expected:
            raise DomainError('vine edges must cover every (tree, index) slot exactly once')
        order = self.variable_order or tuple(range(1, p + 1))
        if sorted(order) != list(range(1, p + 1)):
            raise DomainError(f'variable_order must be a permutation of 1..{p}')
        object.__setattr__(self, 'variable_order', tuple(order))

    @cached_property
    def _lookup(self) -> dict:
        return {(edge.tree, edge.index): edge.copula for edge in self.edges}

    def copula(self, tree: int, index: int) -> PairCopula:
        return self._lookup[(tree, index)]

    def first_tree_pairs(self):
        """Input-column pairs joined directly in tree 1, with their copulas."""
        order = self.variable_order
        pairs = []
        for j in range(1, self.dim):
            if self.kind == VineKind.DVINE:
                a, b = j, j + 1
            else:
                a, b = 1, 1 + j
            pairs.append((order[a - 1] - 1, order[b - 1] - 1, self.copula(1, j)))
        return pairs

    def to_dict(self) -> dict:
        return {
            'kind': self.kind.value,
            'variable_order': list(self.variable_order),
            'edges': [dict(tree=e.tree, index=e.index, **e.copula.to_dict()) for e in self.edges],
        }

    @classmethod
    def from_dict(cls, data: dict):
        edges = tuple(
            VineEdge(int(e['tree']), int(e['index']),
                     PairCopula(CopulaFamily(e['family']), e.get('parameter')))
            for e in data['edges']
        )
        order = data.get('variable_order')
        dim = len(order) if order else int(data['dim'])
        return cls(VineKind(data['kind']), dim, edges, tuple(order) if order else None)


def independence_vine(dim: int, kind: VineKind = VineKind.DVINE) -> VineSpec:
    edges = tuple(VineEdge(t, j, PairCopula(CopulaFamily.INDEPENDENCE))
                  for t in range(1, dim) for j in range(1, dim - t + 1))
    return VineSpec(kind, dim, edges)


def default_scenario_vine() -> VineSpec:
    """Five-dimensional D-vine over four wind farms and the load factor."""
    frank = PairCopula(CopulaFamily.FRANK, 5.736)
    gaussian = PairCopula(CopulaFamily.GAUSSIAN, 0.5)
    gumbel = PairCopula(CopulaFamily.GUMBEL, 1.5)
    families = {1: frank, 2: frank, 3: gaussian, 4: gumbel}
    edges = tuple(VineEdge(t, j, families[t]) for t in range(1, 5) for j in range(1, 6 - t))
    return VineSpec(VineKind.DVINE, 5, edges, (1, 2, 3, 4, 5))


def _as_rows(u, dim):
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    rows = np.atleast_2d(u)
    if rows.shape[1] != dim:
        raise DomainError(f'expected {dim} columns, got {rows.shape[1]}')
    return rows, single


def _to_vine_order(spec, rows):
    return rows[:, np.array(spec.variable_order) - 1]


def _from_vine_order(spec, rows):
    out = np.empty_like(rows)
    out[:, np.array(spec.variable_order) - 1] = rows
    return out


def vine_log_density(spec: VineSpec, u):
    """
    Log copula density of the vine (marginal densities excluded)

    Accepts one point of length ``dim`` or an (n, dim) array.
    """
    rows, single = _as_rows(u, spec.dim)
    _check_open(rows, 'u')
    x = _to_vine_order(spec, _clip(rows))
    p = spec.dim
    total = np.zeros(len(x))

    if spec.kind == VineKind.DVINE:
        # fwd[j] = F(u_j | u_{j+1..j+t-1}), bwd[j] = F(u_{j+t} | u_{j+1..j+t-1}) at tree t
        fwd = {j: x[:, j - 1] for j in range(1, p)}
        bwd = {j: x[:, j] for j in range(1, p)}
        for t in range(1, p):
            for j in range(1, p - t + 1):
                total += spec.copula(t, j).log_density(fwd[j], bwd[j])
            if t == p - 1:
                break
            fwd_next, bwd_next = {}, {}
            for j in range(1, p - t):
                fwd_next[j] = spec.copula(t, j).h(fwd[j], bwd[j])
                bwd_next[j] = spec.copula(t, j + 1).h(bwd[j + 1], fwd[j + 1])
            fwd, bwd = fwd_next, bwd_next
    else:
        # cond[i] = F(u_i | u_1..u_{t-1}) at tree t
        cond = {i: x[:, i - 1] for i in range(1, p + 1)}
        for t in range(1, p):
            root = cond[t]
            for i in range(t + 1, p + 1):
                total += spec.copula(t, i - t).log_density(root, cond[i])
            cond = {i: spec.copula(t, i - t).h(cond[i], root) for i in range(t + 1, p + 1)}

    return float(total[0]) if single else total


def _sequential(spec: VineSpec, values, inverse: bool):
    """Shared recursion of the Rosenblatt transform and its inverse."""
    p = spec.dim
    out = np.empty_like(values)
    out[:, 0] = values[:, 0]

    def step(c, x, given):
        return c.h_inv(x, given) if inverse else c.h(x, given)

    if spec.kind == VineKind.DVINE:
        # fwd[(t, j)] = F(u_j | u_{j+1..j+t-1}); bwd[(t, j)] = F(u_{j+t} | u_{j+1..j+t-1})
        fwd = {(1, 1): values[:, 0]}
        bwd = {}
        for k in range(2, p + 1):
            x = values[:, k - 1]
            if inverse:
                for t in range(k - 1, 0, -1):
                    x = step(spec.copula(t, k - t), x, fwd[(t, k - t)])
                    bwd[(t, k - t)] = x
                u_k = x
            else:
                u_k = x
                for t in range(1, k):
                    bwd[(t, k - t)] = x
                    x = step(spec.copula(t, k - t), x, fwd[(t, k - t)])
            out[:, k - 1] = x
            fwd[(1, k)] = u_k
            for t in range(1, k):
                j = k - t
                fwd[(t + 1, j)] = spec.copula(t, j).h(fwd[(t, j)], bwd[(t, j)])
    else:
        # the root of tree t is F(u_t | u_1..u_{t-1}), i.e. the t-th independent uniform
        roots = {1: values[:, 0]}
        for k in range(2, p + 1):
            x = values[:, k - 1]
            trees = range(k - 1, 0, -1) if inverse else range(1, k)
            for t in trees:
                x = step(spec.copula(t, k - t), x, roots[t])
            out[:, k - 1] = x
            roots[k] = values[:, k - 1] if inverse else x
    return out


def vine_sample_inverse(spec: VineSpec, w):
    """Map independent uniforms to dependent uniforms with the vine's copula."""
    rows, single = _as_rows(w, spec.dim)
    _check_open(rows, 'w')
    if all(e.copula.family == CopulaFamily.INDEPENDENCE for e in spec.edges):
        return rows[0].copy() if single else rows.copy()
    u = _from_vine_order(spec, _sequential(spec, _to_vine_order(spec, rows), inverse=True))
    return u[0] if single else u


def vine_rosenblatt_forward(spec: VineSpec, u):
    """Map dependent uniforms back to independent ones; inverse of vine_sample_inverse."""
    rows, single = _as_rows(u, spec.dim)
    _check_open(rows, 'u')
    if all(e.copula.family == CopulaFamily.INDEPENDENCE for e in spec.edges):
        return rows[0].copy() if single else rows.copy()
    w = _from_vine_order(spec, _sequential(spec, _to_vine_order(spec, rows), inverse=False))
    return w[0] if single else w
