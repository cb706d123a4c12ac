"""Shared primitives: seeded streams, target densities, Gaussian proposal kernels.

Array conventions used throughout the package: a batch of states has shape
(..., d) and log densities evaluated on it have shape (...).  Scalars in,
scalars out is a special case of that.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import lapack, solve_triangular

LOG_2PI = math.log(2.0 * math.pi)


class ConfigError(ValueError):
    """Bad user-supplied configuration (shapes, ranges, malformed files)."""


class NumericalError(RuntimeError):
    """A computation failed in a way retrying will not fix (degenerate
    weights, quadrature disagreement, non-finite chain state)."""


class ChainRunError(NumericalError):
    """Non-finite state or NaN log density encountered while running a chain."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class RngStream:
    """Deterministic, non-overlapping random stream.

    The same (seed, stream_id) pair always yields the same draws.  Distinct
    stream ids under one seed give statistically independent streams, so
    parallel runs can be reassembled bit for bit.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.default_rng(ss)


def as_generator(rng) -> np.random.Generator:
    """Accept an RngStream, a Generator, or a plain int seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise ConfigError(f"cannot build a random generator from {type(rng).__name__}")


def log_sum_exp(values, axis=None) -> np.ndarray:
    """Numerically stable log(sum(exp(values))) along an axis.

    Empty input and all -inf input both return -inf.  NaN anywhere in the
    input raises, because a silent NaN poisons every self-normalised
    estimate downstream.
    """
    a = np.asarray(values, dtype=float)
    if a.size == 0 or (axis is not None and a.shape[axis] == 0):
        if axis is None:
            return np.float64(-np.inf)
        shape = list(a.shape)
        del shape[axis]
        return np.full(shape, -np.inf)
    if np.isnan(a).any():
        raise NumericalError("log_sum_exp received NaN input")
    m = np.max(a, axis=axis, keepdims=True)
    # exp(-inf - -inf) would be NaN; pin those terms to zero instead
    safe_m = np.where(np.isneginf(m), 0.0, m)
    s = np.sum(np.exp(a - safe_m), axis=axis)
    m = np.squeeze(safe_m, axis=axis) if axis is not None else safe_m.reshape(())
    with np.errstate(divide="ignore"):
        out = m + np.log(s)
    all_ninf = np.isneginf(np.max(a, axis=axis))
    return np.where(all_ninf, -np.inf, out)


def finite_difference_gradient(fn: Callable, x: np.ndarray) -> np.ndarray:
    """Central differences with per-coordinate step h_i = 1e-5 * max(1, |x_i|)."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.shape[-1]):
        h = 1e-5 * max(1.0, abs(float(x[..., i])))
        xp = x.copy()
        xm = x.copy()
        xp[..., i] += h
        xm[..., i] -= h
        g[..., i] = (fn(xp) - fn(xm)) / (2.0 * h)
    return g


@dataclass(frozen=True)
class TargetDensity:
    """Unnormalised target, reference measure Lebesgue on R^dim.

    log_rho maps (..., dim) -> (...) and may return -inf where the target
    vanishes; it must never return NaN on finite input.  grad_log_rho is
    optional; gradient() falls back to central finite differences when it
    is absent (single states only).
    """

    dim: int
    log_rho: Callable[[np.ndarray], np.ndarray]
    grad_log_rho: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "target"

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError("target dimension must be >= 1")

    def gradient(self, x: np.ndarray) -> np.ndarray:
        if self.grad_log_rho is not None:
            return self.grad_log_rho(x)
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise ConfigError("finite-difference gradient only supports single states")
        return finite_difference_gradient(self.log_rho, x)


def _spd_cholesky(C: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of C, with an error naming the failing pivot."""
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ConfigError(f"covariance must be square, got shape {C.shape}")
    if not np.allclose(C, C.T, rtol=1e-10, atol=1e-12):
        raise ConfigError("covariance must be symmetric")
    L, info = lapack.dpotrf(C, lower=1, clean=1)
    if info > 0:
        raise ConfigError(
            f"covariance is not positive definite: Cholesky failed at pivot {info}"
        )
    if info < 0:
        raise ConfigError(f"invalid covariance input to Cholesky (argument {-info})")
    return L


class ProposalKernel:
    """Markov proposal kernel with a density in the chain's state space.

    Subclasses provide sample(x, rng), log_density(x, y) and, for stepsize
    calibration, stepsize_score(x, y) = d/ds log p_s(x, y).  stepsize is
    the scalar s the calibration routine tunes.
    """

    kind = "abstract"
    symmetric = False

    def __init__(self, dim: int, stepsize: float):
        if dim < 1:
            raise ConfigError("proposal dimension must be >= 1")
        if not (stepsize > 0.0 and math.isfinite(stepsize)):
            raise ConfigError(f"stepsize must be finite and positive, got {stepsize}")
        self.dim = int(dim)
        self.stepsize = float(stepsize)

    def sample(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def log_density(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def stepsize_score(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def with_stepsize(self, stepsize: float) -> "ProposalKernel":
        raise NotImplementedError


class GaussianRandomWalk(ProposalKernel):
    """y = x + s * L eps with eps standard normal, C = L L^T.

    log p_s(x, y) = -d log s - (1/2) log det(2 pi C) - |y - x|_C^2 / (2 s^2)
    where |v|_C^2 = v^T C^{-1} v.  C defaults to the identity.
    """

    kind = "rw"
    symmetric = True

    def __init__(self, dim: int, stepsize: float, covariance: Optional[np.ndarray] = None):
        super().__init__(dim, stepsize)
        if covariance is None:
            self._L = None
            self._logdet_2pi_C = dim * LOG_2PI
            self.covariance = None
        else:
            C = np.asarray(covariance, dtype=float)
            if C.shape != (dim, dim):
                raise ConfigError(f"covariance shape {C.shape} does not match dim {dim}")
            self._L = _spd_cholesky(C)
            self._logdet_2pi_C = dim * LOG_2PI + 2.0 * float(
                np.sum(np.log(np.diag(self._L)))
            )
            self.covariance = C

    def _whiten(self, v: np.ndarray) -> np.ndarray:
        # maps v to L^{-1} v so that |v|_C^2 = |whitened|^2
        if self._L is None:
            return v
        flat = np.atleast_2d(v.reshape(-1, self.dim))
        z = solve_triangular(self._L, flat.T, lower=True).T
        return z.reshape(v.shape)

    def mahalanobis_sq(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        d = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        z = self._whiten(d)
        return np.sum(z * z, axis=-1)

    def sample(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        eps = rng.standard_normal(x.shape)
        if self._L is not None:
            eps = eps @ self._L.T
        return x + self.stepsize * eps

    def log_density(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        q = self.mahalanobis_sq(x, y)
        s = self.stepsize
        return -self.dim * math.log(s) - 0.5 * self._logdet_2pi_C - q / (2.0 * s * s)

    def stepsize_score(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        q = self.mahalanobis_sq(x, y)
        s = self.stepsize
        return -self.dim / s + q / s**3

    def with_stepsize(self, stepsize: float) -> "GaussianRandomWalk":
        return GaussianRandomWalk(self.dim, stepsize, self.covariance)


class MalaProposal(ProposalKernel):
    """Langevin proposal y ~ N(m_s(x), s^2 I), m_s(x) = x + (s^2/2) grad log rho(x)."""

    kind = "mala"
    symmetric = False

    def __init__(self, target: TargetDensity, stepsize: float):
        if target.grad_log_rho is None:
            raise ConfigError("MALA requires a target with an explicit gradient")
        super().__init__(target.dim, stepsize)
        self.target = target

    def drift(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x + 0.5 * self.stepsize**2 * self.target.grad_log_rho(x)

    def sample(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.drift(x) + self.stepsize * rng.standard_normal(x.shape)

    def log_density(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        r = np.asarray(y, dtype=float) - self.drift(x)
        q = np.sum(r * r, axis=-1)
        s = self.stepsize
        return -self.dim * math.log(s) - 0.5 * self.dim * LOG_2PI - q / (2.0 * s * s)

    def stepsize_score(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        # d/ds of log p_s includes the drift's own s dependence
        x = np.asarray(x, dtype=float)
        g = self.target.grad_log_rho(x)
        r = np.asarray(y, dtype=float) - self.drift(x)
        q = np.sum(r * r, axis=-1)
        s = self.stepsize
        return -self.dim / s + q / s**3 + np.sum(r * g, axis=-1) / s

    def with_stepsize(self, stepsize: float) -> "MalaProposal":
        return MalaProposal(self.target, stepsize)


def gaussian_rw_proposal(dim: int, stepsize: float, covariance=None) -> GaussianRandomWalk:
    return GaussianRandomWalk(dim, stepsize, covariance)


def mala_proposal(target: TargetDensity, stepsize: float) -> MalaProposal:
    return MalaProposal(target, stepsize)
