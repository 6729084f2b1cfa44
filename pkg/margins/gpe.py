"""
Gaussian-process emulator

Trend bases, stationary covariance kernels, profiled maximum-likelihood
training and posterior prediction. All linear algebra against the training
covariance goes through its Cholesky factor.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from django.conf import settings
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

from .exceptions import DomainError, FactorizationError, RankDeficientBasisError

logger = logging.getLogger(__name__)

LOG_BOUNDS = {
    'tau': (np.log(1e-3), np.log(1e3)),
    'lengthscale': (np.log(1e-3), np.log(1e3)),
    'sigma2_upper': np.log(10.0),
}


class Basis(Enum):
    CONSTANT = 'constant'
    LINEAR = 'linear'
    PURE_QUADRATIC = 'pure_quadratic'

    def width(self, p: int) -> int:
        return {Basis.CONSTANT: 1, Basis.LINEAR: 1 + p, Basis.PURE_QUADRATIC: 1 + 2 * p}[self]


def basis_matrix(basis: Basis, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    ones = np.ones((x.shape[0], 1))
    if basis == Basis.CONSTANT:
        return ones
    if basis == Basis.LINEAR:
        return np.hstack([ones, x])
    return np.hstack([ones, x, x ** 2])


def basis_row(basis: Basis, x) -> np.ndarray:
    return basis_matrix(basis, np.asarray(x, dtype=float).reshape(1, -1))[0]


class KernelFamily(Enum):
    SQUARED_EXPONENTIAL = 'se'
    EXPONENTIAL = 'exponential'
    RATIONAL_QUADRATIC = 'rq'
    MATERN32 = 'matern32'


@dataclass(frozen=True, eq=False)
class KernelSpec:
    family: KernelFamily
    tau: float
    lengthscales: tuple
    alpha: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, 'lengthscales', tuple(float(v) for v in np.atleast_1d(self.lengthscales)))
        if not self.tau > 0 or not all(v > 0 for v in self.lengthscales):
            raise DomainError('kernel hyperparameters must be strictly positive')
        if self.family == KernelFamily.RATIONAL_QUADRATIC and not self.alpha > 0:
            raise DomainError(f'rational quadratic alpha must be positive, got {self.alpha}')

    @property
    def theta(self) -> tuple:
        return (self.tau,) + self.lengthscales

    def to_dict(self) -> dict:
        return {'family': self.family.value, 'tau': self.tau,
                'lengthscales': list(self.lengthscales), 'alpha': self.alpha}

    @classmethod
    def from_dict(cls, data):
        return cls(KernelFamily(data['family']), data['tau'], tuple(data['lengthscales']), data['alpha'])


def _uses_squared_distance(family) -> bool:
    return family in (KernelFamily.SQUARED_EXPONENTIAL, KernelFamily.RATIONAL_QUADRATIC)


def kernel_matrix(kernel: KernelSpec, xa, xb, with_gradient: bool = False):
    """
    Covariance between two sets of points

    Returns:
        The (na, nb) kernel matrix, and with ``with_gradient`` also its derivatives
        with respect to log tau followed by each log lengthscale, shape (1 + p, na, nb)
    """
    xa = np.atleast_2d(np.asarray(xa, dtype=float))
    xb = np.atleast_2d(np.asarray(xb, dtype=float))
    scales = np.asarray(kernel.lengthscales)
    za, zb = xa / scales, xb / scales
    tau2 = kernel.tau ** 2
    family = kernel.family

    if _uses_squared_distance(family):
        d = cdist(za, zb, 'sqeuclidean')
    else:
        d = cdist(za, zb, 'cityblock')

    if family == KernelFamily.SQUARED_EXPONENTIAL:
        k = tau2 * np.exp(-0.5 * d)
    elif family == KernelFamily.EXPONENTIAL:
        k = tau2 * np.exp(-d)
    elif family == KernelFamily.RATIONAL_QUADRATIC:
        base = 1.0 + d / (2.0 * kernel.alpha)
        k = tau2 * base ** -kernel.alpha
    else:
        a = np.sqrt(3.0) * d
        k = tau2 * (1.0 + a) * np.exp(-a)

    if not with_gradient:
        return k

    diff = za[:, None, :] - zb[None, :, :]
    grads = np.empty((1 + len(scales),) + k.shape)
    grads[0] = 2.0 * k
    for i in range(len(scales)):
        if family == KernelFamily.SQUARED_EXPONENTIAL:
            grads[1 + i] = k * diff[..., i] ** 2
        elif family == KernelFamily.EXPONENTIAL:
            grads[1 + i] = k * np.abs(diff[..., i])
        elif family == KernelFamily.RATIONAL_QUADRATIC:
            grads[1 + i] = tau2 * base ** (-kernel.alpha - 1.0) * diff[..., i] ** 2
        else:
            grads[1 + i] = tau2 * a * np.exp(-a) * np.sqrt(3.0) * np.abs(diff[..., i])
    return k, grads


def kernel_eval(kernel: KernelSpec, xi, xj) -> float:
    return float(kernel_matrix(kernel, np.atleast_1d(xi)[None, :], np.atleast_1d(xj)[None, :])[0, 0])


@dataclass(frozen=True, eq=False)
class Hyperparameters:
    sigma2: float
    beta: np.ndarray
    theta: tuple = ()


def _factorize(matrix):
    try:
        return cho_factor(matrix, lower=True, check_finite=True)
    except (LinAlgError, ValueError):
        finite = np.all(np.isfinite(matrix))
        raise FactorizationError('kernel matrix is not positive definite',
                                 condition_number=float(np.linalg.cond(matrix)) if finite else None)


def _covariance(x, kernel, sigma2):
    return kernel_matrix(kernel, x, x) + sigma2 * np.eye(len(x))


def beta_profile(X, Y, basis: Basis, kernel: KernelSpec, sigma2: float, chol=None) -> np.ndarray:
    """
    Generalized least-squares trend coefficients

    Raises:
        RankDeficientBasisError: If the basis matrix is rank deficient
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    H = basis_matrix(basis, X)
    if np.linalg.matrix_rank(H) < H.shape[1]:
        raise RankDeficientBasisError(
            f'{basis.value} basis needs {H.shape[1]} linearly independent rows; '
            f'supply more training points (have {len(X)})')
    chol = chol or _factorize(_covariance(X, kernel, sigma2))
    k_inv_h = cho_solve(chol, H)
    k_inv_y = cho_solve(chol, Y)
    gram = H.T @ k_inv_h
    return cho_solve(_factorize(gram), H.T @ k_inv_y)


def log_marginal_likelihood(X, Y, basis: Basis, kernel: KernelSpec, eta: Hyperparameters) -> float:
    """Gaussian log-likelihood of Y under the trend and kernel given by ``eta``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    chol = _factorize(_covariance(X, kernel, eta.sigma2))
    residual = Y - basis_matrix(basis, X) @ np.asarray(eta.beta)
    log_det = 2.0 * np.sum(np.log(np.diag(chol[0])))
    n = len(Y)
    return float(-0.5 * residual @ cho_solve(chol, residual) - 0.5 * n * np.log(2 * np.pi) - 0.5 * log_det)


@dataclass(frozen=True)
class TrainingOptions:
    n_starts: int = 8
    nugget_floor: float = 1e-8
    fix_nugget: float = None
    rq_alpha: float = 2.0
    seed: int = 0
    max_floor_raises: int = 6

    @classmethod
    def from_settings(cls, **overrides):
        values = {
            'n_starts': getattr(settings, 'GPE_RESTARTS', 8),
            'nugget_floor': getattr(settings, 'GPE_NUGGET_FLOOR', 1e-8),
            'rq_alpha': getattr(settings, 'GPE_RQ_ALPHA', 2.0),
        }
        values.update(overrides)
        return cls(**values)


@dataclass(frozen=True, eq=False)
class TrainedEmulator:
    x_train: np.ndarray
    y_train: np.ndarray
    basis: Basis
    kernel: KernelSpec
    eta_hat: Hyperparameters
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float
    log_likelihood: float
    improved: bool = True
    start_log_likelihoods: tuple = ()
    chol_k11: tuple = field(default=None, repr=False)
    alpha_vec: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.chol_k11 is None:
            chol = _factorize(_covariance(self.x_train, self.kernel, self.eta_hat.sigma2))
            object.__setattr__(self, 'chol_k11', chol)
        if self.alpha_vec is None:
            residual = self.y_train - basis_matrix(self.basis, self.x_train) @ self.eta_hat.beta
            object.__setattr__(self, 'alpha_vec', cho_solve(self.chol_k11, residual))

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]

    def standardize(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dim:
            raise DomainError(f'expected {self.dim} inputs, got {x.shape[1]}')
        return (x - self.x_mean) / self.x_scale

    def trend_coefficients(self) -> np.ndarray:
        """Trend coefficients expressed in raw input and output units."""
        beta = np.asarray(self.eta_hat.beta)
        m, s, p = self.x_mean, self.x_scale, self.dim
        raw = np.zeros_like(beta)
        raw[0] = self.y_mean + self.y_scale * beta[0]
        if self.basis == Basis.CONSTANT:
            return raw
        c = beta[1:1 + p]
        raw[1:1 + p] = self.y_scale * c / s
        raw[0] -= self.y_scale * np.sum(c * m / s)
        if self.basis == Basis.PURE_QUADRATIC:
            d = beta[1 + p:]
            raw[1 + p:] = self.y_scale * d / s ** 2
            raw[1:1 + p] -= self.y_scale * 2.0 * d * m / s ** 2
            raw[0] += self.y_scale * np.sum(d * m ** 2 / s ** 2)
        return raw

    def to_dict(self) -> dict:
        return {
            'x_train': self.x_train.tolist(),
            'y_train': self.y_train.tolist(),
            'basis': self.basis.value,
            'kernel': self.kernel.to_dict(),
            'sigma2': self.eta_hat.sigma2,
            'beta': np.asarray(self.eta_hat.beta).tolist(),
            'x_mean': self.x_mean.tolist(),
            'x_scale': self.x_scale.tolist(),
            'y_mean': self.y_mean,
            'y_scale': self.y_scale,
            'log_likelihood': self.log_likelihood,
            'improved': self.improved,
            'start_log_likelihoods': list(self.start_log_likelihoods),
        }

    @classmethod
    def from_dict(cls, data: dict):
        kernel = KernelSpec.from_dict(data['kernel'])
        return cls(
            x_train=np.array(data['x_train'], dtype=float),
            y_train=np.array(data['y_train'], dtype=float),
            basis=Basis(data['basis']),
            kernel=kernel,
            eta_hat=Hyperparameters(float(data['sigma2']), np.array(data['beta'], dtype=float), kernel.theta),
            x_mean=np.array(data['x_mean'], dtype=float),
            x_scale=np.array(data['x_scale'], dtype=float),
            y_mean=float(data['y_mean']),
            y_scale=float(data['y_scale']),
            log_likelihood=float(data['log_likelihood']),
            improved=bool(data.get('improved', True)),
            start_log_likelihoods=tuple(data.get('start_log_likelihoods', ())),
        )


def _standardization(values, axis=0):
    mean = np.mean(values, axis=axis)
    scale = np.std(values, axis=axis)
    # constant columns keep unit scale
    scale = np.where(scale > 0, scale, 1.0)
    return mean, scale


class _ProfiledObjective:
    """Negative profiled log-likelihood in log-hyperparameter space."""

    def __init__(self, x, y, basis, family, alpha, fixed_sigma2):
        self.x, self.y = x, y
        self.basis, self.family, self.alpha = basis, family, alpha
        self.fixed_sigma2 = fixed_sigma2
        self.H = basis_matrix(basis, x)
        self.p = x.shape[1]

    def unpack(self, phi):
        kernel = KernelSpec(self.family, float(np.exp(phi[0])), tuple(np.exp(phi[1:1 + self.p])), self.alpha)
        sigma2 = self.fixed_sigma2 if self.fixed_sigma2 is not None else float(np.exp(phi[1 + self.p]))
        return kernel, sigma2

    def value(self, phi) -> float:
        kernel, sigma2 = self.unpack(phi)
        beta = beta_profile(self.x, self.y, self.basis, kernel, sigma2)
        return log_marginal_likelihood(self.x, self.y, self.basis, kernel, Hyperparameters(sigma2, beta))

    def __call__(self, phi):
        kernel, sigma2 = self.unpack(phi)
        n = len(self.y)
        k, grads = kernel_matrix(kernel, self.x, self.x, with_gradient=True)
        try:
            chol = _factorize(k + sigma2 * np.eye(n))
            beta = beta_profile(self.x, self.y, self.basis, kernel, sigma2, chol=chol)
        except FactorizationError:
            return 1e25, np.zeros_like(phi)
        residual = self.y - self.H @ beta
        alpha = cho_solve(chol, residual)
        k_inv = cho_solve(chol, np.eye(n))
        log_det = 2.0 * np.sum(np.log(np.diag(chol[0])))
        ll = -0.5 * residual @ alpha - 0.5 * n * np.log(2 * np.pi) - 0.5 * log_det

        # beta is profiled out, so its own derivative term vanishes
        outer = np.outer(alpha, alpha) - k_inv
        grad = [0.5 * np.sum(outer * g) for g in grads]
        if self.fixed_sigma2 is None:
            grad.append(0.5 * sigma2 * np.trace(outer))
        return -ll, -np.asarray(grad)


def _initial_phi(x, y, floor, fix):
    ranges = np.ptp(x, axis=0)
    lengthscales = np.where(ranges > 0, ranges, 1.0)
    variance = max(float(np.var(y)), 1e-12)
    phi = [0.5 * np.log(variance)] + list(np.log(lengthscales))
    if fix is None:
        phi.append(np.log(max(1e-4 * variance, floor)))
    return np.array(phi)


def _bounds(p, floor, fix):
    bounds = [LOG_BOUNDS['tau']] + [LOG_BOUNDS['lengthscale']] * p
    if fix is None:
        bounds.append((np.log(floor), LOG_BOUNDS['sigma2_upper']))
    return bounds


def train(X, Y, basis: Basis, kernel_family: KernelFamily, options: TrainingOptions = None) -> TrainedEmulator:
    """
    Fit the emulator by profiled maximum likelihood

    Args:
        X: (n, p) training inputs in physical units
        Y: n training outputs
        basis: Trend basis
        kernel_family: Covariance family; RQ uses ``options.rq_alpha``
        options: Multi-start count, nugget floor and seed

    Returns:
        TrainedEmulator with the cached Cholesky factor of K11

    Raises:
        RankDeficientBasisError: If n is too small for the basis
        FactorizationError: If K11 stays indefinite after raising the nugget floor
    """
    options = options or TrainingOptions()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).ravel()
    n, p = X.shape
    if len(Y) != n:
        raise DomainError(f'{n} training inputs but {len(Y)} outputs')
    width = basis.width(p)
    if n < width + 1:
        raise RankDeficientBasisError(
            f'{basis.value} basis with {p} inputs needs at least {width + 1} training points, got {n}')

    x_mean, x_scale = _standardization(X)
    y_mean, y_scale = _standardization(Y)
    x = (X - x_mean) / x_scale
    y = (Y - float(y_mean)) / float(y_scale)
    fix = options.fix_nugget
    floor = options.nugget_floor

    for attempt in range(options.max_floor_raises + 1):
        objective = _ProfiledObjective(x, y, basis, kernel_family, options.rq_alpha, fix)
        bounds = _bounds(p, floor, fix)
        base = _initial_phi(x, y, floor, fix)
        rng = np.random.default_rng(options.seed)
        starts = [base]
        for _ in range(options.n_starts - 1):
            jitter = rng.choice([0.1, 1.0, 10.0], size=len(base))
            starts.append(base + np.log(jitter))
        starts = [np.clip(s, [b[0] for b in bounds], [b[1] for b in bounds]) for s in starts]

        best_phi, best_ll = None, -np.inf
        start_lls = []
        improved = False
        for i, start in enumerate(starts):
            start_ll = -objective(start)[0]
            start_lls.append(float(start_ll))
            if start_ll > best_ll:
                best_phi, best_ll = start, start_ll
            result = minimize(objective, start, jac=True, method='L-BFGS-B', bounds=bounds)
            ll = -float(result.fun)
            logger.debug(f'Start {i}: log-likelihood {start_ll:.4f} -> {ll:.4f} ({result.message})')
            if ll > start_ll + 1e-10:
                improved = True
            if ll > best_ll:
                best_phi, best_ll = result.x, ll

        kernel, sigma2 = objective.unpack(best_phi)
        try:
            chol = _factorize(_covariance(x, kernel, sigma2))
            break
        except FactorizationError as exc:
            if attempt == options.max_floor_raises:
                raise
            floor *= 10.0
            if fix is not None:
                fix = max(fix, floor)
            logger.warning(f'{exc}; raising nugget floor to {floor:.1e} and retrying')

    if not improved:
        logger.warning('No optimizer start improved on its initial likelihood; keeping the best start')

    beta = beta_profile(x, y, basis, kernel, sigma2, chol=chol)
    eta = Hyperparameters(sigma2=sigma2, beta=beta, theta=kernel.theta)
    final_ll = log_marginal_likelihood(x, y, basis, kernel, eta)
    logger.info(f'Trained {kernel_family.value} emulator on {n} points: log-likelihood {final_ll:.4f}, '
                f'tau={kernel.tau:.4g}, sigma2={sigma2:.3g}')
    return TrainedEmulator(
        x_train=x, y_train=y, basis=basis, kernel=kernel, eta_hat=eta,
        x_mean=np.asarray(x_mean), x_scale=np.asarray(x_scale),
        y_mean=float(y_mean), y_scale=float(y_scale), log_likelihood=final_ll,
        improved=improved, start_log_likelihoods=tuple(start_lls), chol_k11=chol,
    )


def predict_mean(e: TrainedEmulator, x):
    """Posterior mean in output units; one value per row of ``x``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    z = e.standardize(x)
    mean = basis_matrix(e.basis, z) @ e.eta_hat.beta + kernel_matrix(e.kernel, z, e.x_train) @ e.alpha_vec
    out = e.y_mean + e.y_scale * mean
    return float(out[0]) if single else out


def predict_cov(e: TrainedEmulator, xs, include_nugget: bool = True) -> np.ndarray:
    """Posterior covariance in squared output units."""
    z = e.standardize(xs)
    k22 = kernel_matrix(e.kernel, z, z)
    if include_nugget:
        k22 = k22 + e.eta_hat.sigma2 * np.eye(len(z))
    k12 = kernel_matrix(e.kernel, e.x_train, z)
    v = solve_triangular(e.chol_k11[0], k12, lower=True)
    cov = k22 - v.T @ v
    cov = 0.5 * (cov + cov.T)
    return e.y_scale ** 2 * cov


def with_nugget(e: TrainedEmulator, sigma2: float) -> TrainedEmulator:
    """Same emulator refactorized with a different nugget."""
    eta = replace(e.eta_hat, sigma2=sigma2)
    return replace(e, eta_hat=eta, chol_k11=None, alpha_vec=None)
