"""Concrete targets and reference oracles.

Three problem families:
  * a 2-D groundwater boundary-value posterior with closed-form forward map
    p(x) = u2 * x + (exp(-u1)/2) * (x - x^2), observed at x = 0.25, 0.75;
  * a probit regression posterior on a 768-row diabetes-style table,
    truncated to its first d predictors;
  * Gaussian toys (standard normal target, conjugate prior-likelihood pair).

Plus a tensor Gauss-Hermite posterior-mean oracle with a node-doubling
accuracy check.

All targets are Lebesgue densities: where a problem is naturally stated as
a density rho against a Gaussian prior mu0, the sampler target is
rho(u) * prior_pdf(u).  Self-normalised estimators are unchanged by this
folding because it multiplies numerator and denominator weights alike.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtr, roots_hermitenorm

from .core import ConfigError, NumericalError, TargetDensity

LOG_2PI = math.log(2.0 * math.pi)
HALF_LOG_2PI = 0.5 * LOG_2PI


# ---------------------------------------------------------------------------
# stable log Phi and the Mills ratio

def log_normal_cdf(z: np.ndarray) -> np.ndarray:
    """log Phi(z), stable for arbitrarily negative z.

    Uses log(ndtr) down to z = -8 and the asymptotic expansion

        log Phi(z) = -z^2/2 - log(-z) - log(2 pi)/2
                     + log1p(-1/z^2 + 3/z^4 - 15/z^6 + 105/z^8)

    below that.  Relative error is below 3e-8 over the crossover.
    """
    z = np.asarray(z, dtype=float)
    scalar = z.ndim == 0
    z = np.atleast_1d(z)
    out = np.empty_like(z)
    lo = z < -8.0
    hi = ~lo
    if np.any(hi):
        out[hi] = np.log(ndtr(z[hi]))
    if np.any(lo):
        zz = z[lo]
        inv2 = 1.0 / (zz * zz)
        series = inv2 * (-1.0 + inv2 * (3.0 + inv2 * (-15.0 + 105.0 * inv2)))
        out[lo] = -0.5 * zz * zz - np.log(-zz) - HALF_LOG_2PI + np.log1p(series)
    return out[0] if scalar else out


def normal_mills_ratio(z: np.ndarray) -> np.ndarray:
    """phi(z) / Phi(z), computed as exp(log phi - log Phi)."""
    z = np.asarray(z, dtype=float)
    return np.exp(-0.5 * z * z - HALF_LOG_2PI - log_normal_cdf(z))


# ---------------------------------------------------------------------------
# Gaussian toys

def standard_gaussian_target(dim: int) -> TargetDensity:
    """Normalised N(0, I_dim) target with exact gradient."""

    def log_rho(x):
        x = np.asarray(x, dtype=float)
        return -0.5 * np.sum(x * x, axis=-1) - 0.5 * dim * LOG_2PI

    def grad(x):
        return -np.asarray(x, dtype=float)

    return TargetDensity(dim, log_rho, grad, name="gaussian")


@dataclass(frozen=True)
class ConjugateGaussian:
    """Gaussian prior N(prior_mean, diag(prior_variances)) with Gaussian
    likelihood N(y_obs; u, likelihood_var * I).  Closed-form posterior used
    to validate the quadrature oracle to machine precision."""

    prior_mean: np.ndarray
    prior_variances: np.ndarray
    y_obs: np.ndarray
    likelihood_var: float

    @property
    def dim(self) -> int:
        return len(self.prior_mean)

    @property
    def prior_chol(self) -> np.ndarray:
        return np.diag(np.sqrt(self.prior_variances))

    def log_likelihood(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        r = self.y_obs - u
        return -0.5 * np.sum(r * r, axis=-1) / self.likelihood_var

    def posterior_mean(self) -> np.ndarray:
        prec = 1.0 / self.prior_variances + 1.0 / self.likelihood_var
        num = self.prior_mean / self.prior_variances + self.y_obs / self.likelihood_var
        return num / prec

    def posterior_variances(self) -> np.ndarray:
        return 1.0 / (1.0 / self.prior_variances + 1.0 / self.likelihood_var)

    def target_density(self) -> TargetDensity:
        pm = np.asarray(self.prior_mean, dtype=float)
        pv = np.asarray(self.prior_variances, dtype=float)

        def log_rho(u):
            u = np.asarray(u, dtype=float)
            lp = -0.5 * np.sum((u - pm) ** 2 / pv, axis=-1)
            return self.log_likelihood(u) + lp

        def grad(u):
            u = np.asarray(u, dtype=float)
            return (self.y_obs - u) / self.likelihood_var - (u - pm) / pv

        return TargetDensity(self.dim, log_rho, grad, name="conjugate_gaussian")


# ---------------------------------------------------------------------------
# groundwater boundary-value posterior

def bvp_forward(u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Forward map F(u) = (p(0.25), p(0.75)) and its Jacobian.

    p(x) = u2 * x + (exp(-u1)/2) * (x - x^2), so with
    a(u1) = 0.09375 * exp(-u1):

        F(u) = (0.25 u2 + a, 0.75 u2 + a)
        dF/du = [[-a, 0.25], [-a, 0.75]]

    Accepts (..., 2) batches; raises on u1 < -700 where exp overflows.
    """
    u = np.asarray(u, dtype=float)
    u1 = u[..., 0]
    u2 = u[..., 1]
    if np.any(u1 < -700.0):
        raise NumericalError("forward map overflow: exp(-u1) with u1 < -700")
    a = 0.09375 * np.exp(-u1)
    F = np.stack([0.25 * u2 + a, 0.75 * u2 + a], axis=-1)
    J = np.empty(u.shape[:-1] + (2, 2))
    J[..., 0, 0] = -a
    J[..., 1, 0] = -a
    J[..., 0, 1] = 0.25
    J[..., 1, 1] = 0.75
    return F, J


@dataclass(frozen=True)
class BvpPosterior:
    """Posterior for the two-parameter groundwater flow problem.

    Likelihood log rho(u) = -(noise_precision/2) * |y - F(u)|^2 with
    additive constants dropped; prior standard normal on R^2.  The sampler
    target returned by target_density() is likelihood plus prior as a
    Lebesgue log density.
    """

    y_obs: np.ndarray = field(default_factory=lambda: np.array([27.5, 79.7]))
    noise_precision: float = 100.0
    observation_points: Tuple[float, float] = (0.25, 0.75)

    dim = 2

    @property
    def prior_mean(self) -> np.ndarray:
        return np.zeros(2)

    @property
    def prior_chol(self) -> np.ndarray:
        return np.eye(2)

    def log_likelihood(self, u: np.ndarray) -> np.ndarray:
        F, _ = bvp_forward(u)
        r = self.y_obs - F
        return -0.5 * self.noise_precision * np.sum(r * r, axis=-1)

    def grad_log_likelihood(self, u: np.ndarray) -> np.ndarray:
        F, J = bvp_forward(u)
        r = self.y_obs - F
        return self.noise_precision * np.einsum("...ji,...j->...i", J, r)

    def log_posterior(self, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Log target (likelihood + prior, constants dropped) and gradient."""
        u = np.asarray(u, dtype=float)
        lp = self.log_likelihood(u) - 0.5 * np.sum(u * u, axis=-1)
        g = self.grad_log_likelihood(u) - u
        return lp, g

    def target_density(self) -> TargetDensity:
        return TargetDensity(
            2,
            lambda u: self.log_posterior(u)[0],
            lambda u: self.log_posterior(u)[1],
            name="bvp",
        )

    def _likelihood_fit_start(self) -> np.ndarray:
        # exact likelihood root: subtracting the two observation equations
        # isolates u2, then the first equation gives exp(-u1)
        y1, y2 = float(self.y_obs[0]), float(self.y_obs[1])
        u2 = (y2 - y1) / 0.5
        a = y1 - 0.25 * u2
        if a <= 0.0:
            return np.zeros(2)
        return np.array([-math.log(a / 0.09375), u2])

    def laplace(self) -> Tuple[np.ndarray, np.ndarray]:
        """Posterior mode and inverse-Hessian covariance (2x2)."""
        def neg(u):
            lp, g = self.log_posterior(u)
            return -lp, -g

        best = None
        for start in (self._likelihood_fit_start(), np.zeros(2)):
            res = minimize(neg, start, jac=True, method="BFGS",
                           options={"gtol": 1e-10, "maxiter": 500})
            if best is None or res.fun < best.fun:
                best = res
        mode = best.x
        # Hessian by central differences of the exact gradient
        H = np.empty((2, 2))
        for i in range(2):
            h = 1e-5 * max(1.0, abs(mode[i]))
            up = mode.copy()
            dn = mode.copy()
            up[i] += h
            dn[i] -= h
            H[:, i] = (self.log_posterior(up)[1] - self.log_posterior(dn)[1]) / (2 * h)
        H = 0.5 * (H + H.T)
        cov = np.linalg.inv(-H)
        return mode, cov

    def posterior_mean_oracle(self, f=None, nodes_per_dim: int = 200) -> np.ndarray:
        """Quadrature posterior mean, nodes centered on the Laplace fit.

        The observation vector puts the posterior far outside the prior's
        bulk, so prior-centered nodes would never see it; the Laplace map
        is the reference and the prior enters through the integrand.
        """
        mode, cov = self.laplace()
        ref = (mode, np.linalg.cholesky(cov))
        return gh_posterior_mean(self, f, nodes_per_dim=nodes_per_dim, reference=ref)


# ---------------------------------------------------------------------------
# probit posterior

PRIOR_VARIANCES_FULL = np.array([20.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0])


@dataclass(frozen=True)
class ProbitPosterior:
    """Probit regression posterior truncated to its first active_dim predictors.

    design: (N, 9) matrix whose first column is the intercept; labels in
    {-1, +1}.  Prior N(0, diag(prior_variances[:active_dim])); the trailing
    coefficients are pinned to zero by simply dropping their columns.
    """

    design: np.ndarray
    labels: np.ndarray
    active_dim: int
    prior_variances: np.ndarray = field(
        default_factory=lambda: PRIOR_VARIANCES_FULL.copy()
    )

    def __post_init__(self):
        d = self.active_dim
        if not 1 <= d <= self.design.shape[1]:
            raise ConfigError(f"active_dim must be in [1, {self.design.shape[1]}]")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ConfigError("labels must be -1 or +1")

    @property
    def dim(self) -> int:
        return self.active_dim

    @property
    def n_rows(self) -> int:
        return self.design.shape[0]

    def _zx(self) -> np.ndarray:
        # label-signed active design, shape (N, d)
        return self.labels[:, None] * self.design[:, : self.active_dim]

    def log_likelihood(self, beta: np.ndarray) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        z = np.einsum("nd,...d->...n", self._zx(), beta)
        return np.sum(log_normal_cdf(z), axis=-1)

    def grad_log_likelihood(self, beta: np.ndarray) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        zx = self._zx()
        z = np.einsum("nd,...d->...n", zx, beta)
        return np.einsum("...n,nd->...d", normal_mills_ratio(z), zx)

    def hessian_log_likelihood(self, beta: np.ndarray) -> np.ndarray:
        # d/dz of the Mills ratio m(z) is -m(z)(z + m(z))
        beta = np.asarray(beta, dtype=float)
        zx = self._zx()
        z = zx @ beta
        m = normal_mills_ratio(z)
        w = m * (z + m)
        return -(zx * w[:, None]).T @ zx

    def target_density(self) -> TargetDensity:
        lam = self.prior_variances[: self.active_dim]

        def log_rho(beta):
            beta = np.asarray(beta, dtype=float)
            lp = -0.5 * np.sum(beta * beta / lam, axis=-1)
            return self.log_likelihood(beta) + lp

        def grad(beta):
            beta = np.asarray(beta, dtype=float)
            return self.grad_log_likelihood(beta) - beta / lam

        return TargetDensity(self.active_dim, log_rho, grad, name=f"probit{self.active_dim}")

    def prior_covariance(self) -> np.ndarray:
        return np.diag(self.prior_variances[: self.active_dim])

    def map_point(self) -> np.ndarray:
        lam = self.prior_variances[: self.active_dim]

        def neg(b):
            return (
                -self.log_likelihood(b) + 0.5 * np.sum(b * b / lam),
                -self.grad_log_likelihood(b) + b / lam,
            )

        res = minimize(neg, np.zeros(self.active_dim), jac=True, method="BFGS",
                       options={"gtol": 1e-8, "maxiter": 500})
        return res.x

    def laplace(self) -> Tuple[np.ndarray, np.ndarray]:
        """Posterior mode and inverse negative-Hessian covariance there."""
        mode = self.map_point()
        lam = self.prior_variances[: self.active_dim]
        hess = self.hessian_log_likelihood(mode) - np.diag(1.0 / lam)
        return mode, np.linalg.inv(-hess)


def load_pima(path: Optional[str] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Load the 768-row diabetes table as (design, labels).

    Expects CSV rows of 8 numeric features followed by a binary outcome;
    a non-numeric header line is skipped.  The outcome o in {0, 1} maps to
    the label 2 o - 1, and a column of ones is prepended, so the design is
    (N, 9) with the intercept first and features in file order.  A row
    count other than 768 only warns; non-numeric cells raise with the row
    index.  With no path the documented synthetic table is used instead.
    """
    if path is None:
        table, _ = synthetic_pima_table()
        return _table_to_design(table)
    rows = []
    with open(path, newline="") as fh:
        for i, rec in enumerate(csv.reader(fh)):
            if not rec:
                continue
            try:
                rows.append([float(v) for v in rec])
            except ValueError:
                if i == 0:  # header
                    continue
                raise ConfigError(f"non-numeric cell in row {i}") from None
    table = np.asarray(rows, dtype=float)
    if table.ndim != 2 or table.shape[1] != 9:
        raise ConfigError(f"expected 9 columns (8 features + outcome), got {table.shape}")
    if table.shape[0] != 768:
        warnings.warn(f"expected 768 rows, got {table.shape[0]}", stacklevel=2)
    return _table_to_design(table)


def _table_to_design(table: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    features = table[:, :-1]
    outcome = table[:, -1]
    if not np.all(np.isin(outcome, (0.0, 1.0))):
        raise ConfigError("outcome column must be binary 0/1")
    labels = 2.0 * outcome - 1.0
    design = np.column_stack([np.ones(len(table)), features])
    return design, labels


SYNTHETIC_PIMA_SEED = 20260819
SYNTHETIC_PIMA_BETA = np.array([-0.8, 0.6, -0.4, 0.3, 0.0, 0.5, -0.3, 0.2, 0.1])


def synthetic_pima_table(seed: int = SYNTHETIC_PIMA_SEED) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic stand-in table with the real file's shape (768 x 9).

    Eight unit-variance features sharing a common factor (pairwise
    correlation 0.36), labels drawn from the probit model at the returned
    generating coefficients (intercept first).
    """
    rng = np.random.default_rng(seed)
    n = 768
    common = rng.standard_normal((n, 1))
    features = 0.8 * rng.standard_normal((n, 8)) + 0.6 * common
    design = np.column_stack([np.ones(n), features])
    p = ndtr(design @ SYNTHETIC_PIMA_BETA)
    outcome = (rng.random(n) < p).astype(float)
    table = np.column_stack([features, outcome])
    return table, SYNTHETIC_PIMA_BETA.copy()


# ---------------------------------------------------------------------------
# Gauss-Hermite posterior-mean oracle

def _gh_grid(dim: int, nodes_per_dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """Tensor grid of probabilists' Hermite nodes and normalised log weights."""
    z, w = roots_hermitenorm(nodes_per_dim)  # stable at high degree
    with np.errstate(divide="ignore"):  # far-tail weights underflow to 0
        logw = np.log(w) - HALF_LOG_2PI  # each 1-D set integrates N(0,1)
    if dim == 1:
        return z[:, None], logw
    nodes = np.stack(np.meshgrid(z, z, indexing="ij"), axis=-1).reshape(-1, 2)
    lw = (logw[:, None] + logw[None, :]).reshape(-1)
    return nodes, lw


def _log_gauss_pdf(u, mean, chol):
    diff = np.asarray(u, dtype=float) - mean
    sol = np.linalg.solve(chol, diff.T).T if chol.ndim == 2 else diff / chol
    logdet = np.sum(np.log(np.diag(chol)))
    d = len(mean)
    return -0.5 * np.sum(sol * sol, axis=-1) - logdet - 0.5 * d * LOG_2PI


def _gh_mean_once(problem, f, nodes_per_dim, reference) -> np.ndarray:
    dim = problem.dim
    z, logw = _gh_grid(dim, nodes_per_dim)
    ref_mean, ref_chol = reference
    u = ref_mean + z @ ref_chol.T
    log_int = logw + np.asarray(problem.log_likelihood(u), dtype=float)
    prior_mean = np.asarray(problem.prior_mean, dtype=float)
    prior_chol = np.asarray(problem.prior_chol, dtype=float)
    if not (
        np.array_equal(ref_mean, prior_mean) and np.array_equal(ref_chol, prior_chol)
    ):
        log_int += _log_gauss_pdf(u, prior_mean, prior_chol)
        log_int -= _log_gauss_pdf(u, ref_mean, ref_chol)
    vals = u if f is None else np.asarray(f(u), dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    m = np.max(log_int)
    if np.isneginf(m):
        raise NumericalError("quadrature mass is identically zero on the grid")
    g = np.exp(log_int - m)
    return (g @ vals) / g.sum()


def gh_posterior_mean(
    problem,
    f=None,
    nodes_per_dim: int = 200,
    reference: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    max_doublings: int = 3,
    rtol: float = 1e-4,
) -> np.ndarray:
    """Posterior mean E[f] by tensor Gauss-Hermite quadrature.

    The problem must expose dim (1 or 2), log_likelihood(u) batched, and a
    Gaussian prior via prior_mean / prior_chol.  Nodes are placed through
    the reference map (mean, chol), default the prior itself; a non-prior
    reference folds the prior density into the integrand.  The node count
    is doubled until the result moves by less than rtol relative (floored
    at 1e-8 absolute scale) and an error is raised if max_doublings
    doublings never settle.  Tensor sums use numpy's pairwise reduction,
    so the summation order is deterministic.
    """
    if problem.dim not in (1, 2):
        raise ConfigError("quadrature oracle supports dim 1 and 2 only")
    if reference is None:
        reference = (
            np.asarray(problem.prior_mean, dtype=float),
            np.asarray(problem.prior_chol, dtype=float),
        )
    prev = _gh_mean_once(problem, f, nodes_per_dim, reference)
    n = nodes_per_dim
    for _ in range(max_doublings):
        n *= 2
        cur = _gh_mean_once(problem, f, n, reference)
        scale = max(float(np.max(np.abs(cur))), 1e-8)
        if float(np.max(np.abs(cur - prev))) / scale < rtol:
            return cur
        prev = cur
    raise NumericalError(
        f"quadrature did not settle to {rtol} after {max_doublings} doublings"
    )


@dataclass(frozen=True)
class QuadratureOracle:
    """Bundled quadrature settings; call posterior_mean on a problem."""

    nodes_per_dim: int = 200
    rtol: float = 1e-4
    max_doublings: int = 3

    def posterior_mean(self, problem, f=None, reference=None) -> np.ndarray:
        return gh_posterior_mean(
            problem,
            f,
            nodes_per_dim=self.nodes_per_dim,
            reference=reference,
            max_doublings=self.max_doublings,
            rtol=self.rtol,
        )
