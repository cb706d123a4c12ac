"""Estimators over a recorded augmented chain.

Given records (X_k, Y_k, log alpha_k, accepted_k, log w_k) with
w_k = rho(Y_k) / p(X_k, Y_k):

    S_n(f)  = (1/n) sum f(X_k)                      classical path average
    A_n(f)  = sum w_k f(Y_k) / sum w_k              self-normalised, proposals only
    WR_n(f) = (1/n) sum [(1-a_k) f(X_k) + a_k f(Y_k)]
    B_n(f)  = sum wt_k f(Y_k) / sum wt_k,  wt_k = rho(Y_k) / sum_j p(X_j, Y_k)

All weight arithmetic is done in the log domain with max shifts; squared
weights shift by twice the max.  Self-normalisation makes every estimator
here invariant under rescaling of rho.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import ConfigError, NumericalError, ProposalKernel, log_sum_exp


@dataclass(frozen=True)
class Functional:
    """Vector-valued test function f: R^d -> R^m applied row-wise."""

    name: str
    eval: Callable[[np.ndarray], np.ndarray]

    def apply(self, states: np.ndarray) -> np.ndarray:
        """Evaluate on (n, d) states, always returning (n, m)."""
        states = np.asarray(states, dtype=float)
        out = np.asarray(self.eval(states), dtype=float)
        if out.ndim == states.ndim - 1:
            out = out[..., None]  # scalar functional convenience
        return out


def identity_functional(dim: int) -> Functional:
    return Functional("identity", lambda x: x)


def coordinate_functional(i: int) -> Functional:
    return Functional(f"coord{i}", lambda x: x[..., i])


@dataclass
class EstimateReport:
    estimator_name: str
    value: np.ndarray
    n_used: int
    sigma2_A: Optional[np.ndarray] = None
    log_normalizer: Optional[float] = None

    def to_json_dict(self) -> dict:
        out = {
            "estimator": self.estimator_name,
            "value": [float(v) for v in np.atleast_1d(self.value)],
            "n": int(self.n_used),
        }
        if self.sigma2_A is not None:
            out["sigma2_A"] = [float(v) for v in np.atleast_1d(self.sigma2_A)]
        if self.log_normalizer is not None:
            out["log_normalizer"] = float(self.log_normalizer)
        return out


def _require_records(history) -> int:
    n = len(history)
    if n == 0:
        raise ConfigError("estimator called on an empty record set")
    return n


def _weights_from_log(log_w: np.ndarray) -> np.ndarray:
    """Max-shifted weights; raises when every weight is zero."""
    if np.isnan(log_w).any():
        raise NumericalError("NaN log weight in records")
    m = np.max(log_w)
    if np.isneginf(m):
        raise NumericalError("degenerate weight set: all importance weights are zero")
    return np.exp(log_w - m)


def estimate_S(history, f: Functional) -> EstimateReport:
    n = _require_records(history)
    fx = f.apply(history.x)
    return EstimateReport("S", fx.mean(axis=0), n)


def estimate_A(history, f: Functional) -> EstimateReport:
    """Self-normalised importance-sampling average over proposed states."""
    n = _require_records(history)
    w = _weights_from_log(np.asarray(history.log_weight, dtype=float))
    fy = f.apply(history.y)
    value = (w @ fy) / w.sum()
    return EstimateReport(
        "A", value, n, log_normalizer=float(log_sum_exp(history.log_weight))
    )


def estimate_WR(history, f: Functional) -> EstimateReport:
    """Waste recycling: each step contributes both states, mixed by alpha.

    Normalised by 1/n so that alpha = 0 everywhere reduces it to S_n.
    """
    n = _require_records(history)
    alpha = np.exp(np.minimum(0.0, np.asarray(history.log_alpha, dtype=float)))
    fx = f.apply(history.x)
    fy = f.apply(history.y)
    value = (fx + alpha[:, None] * (fy - fx)).mean(axis=0)
    return EstimateReport("WR", value, n)


def subsample_indices(n: int, m: int) -> np.ndarray:
    """Indices for the size-m variant: the first m records.

    B over a subsample of size m is the full estimator applied to a chain of
    length m, and the first m records of the run ARE such a chain.  A
    decorrelating choice (an even stride across all n records) would be a
    different, stronger estimator: it wins back most of the full-length
    chain's mixing at subsample cost, which is not the comparison the
    equal-complexity variant is meant to make.
    """
    if not (1 <= m <= n):
        raise ConfigError(f"subsample size must be in [1, {n}], got {m}")
    return np.arange(m)


def estimate_B(
    history,
    f: Functional,
    proposal: ProposalKernel,
    subsample: Optional[int] = None,
    chunk: int = 256,
) -> EstimateReport:
    """Mixture-weighted estimator over proposed states.

    wt_k = rho(Y_k) / sum_j p(X_j, Y_k), both the k and j index sets being
    the same (sub)sample of records.  Full cost is Theta(n^2) pair density
    evaluations; subsample = floor(sqrt(n)) brings it to Theta(n), which is
    the B_sqrt variant.  Duplicate X_j rows (rejected stretches of the
    chain) are collapsed to unique rows with log-count offsets before the
    log_sum_exp over j.
    """
    n = _require_records(history)
    if subsample is None:
        idx = np.arange(n)
        name = "B"
    else:
        idx = subsample_indices(n, int(subsample))
        name = "B_sqrt"
    xs = np.asarray(history.x, dtype=float)[idx]
    ys = np.asarray(history.y, dtype=float)[idx]
    log_rho_y = np.asarray(history.log_rho_y, dtype=float)[idx]
    m = len(idx)

    ux, counts = np.unique(xs, axis=0, return_counts=True)
    log_counts = np.log(counts.astype(float))

    log_denom = np.empty(m)
    for lo in range(0, m, chunk):
        hi = min(lo + chunk, m)
        # (U, K) table of log p(X_u, Y_k) + log count_u
        lp = proposal.log_density(ux[:, None, :], ys[None, lo:hi, :])
        log_denom[lo:hi] = log_sum_exp(lp + log_counts[:, None], axis=0)

    with np.errstate(invalid="ignore"):
        log_wt = np.where(np.isneginf(log_rho_y), -np.inf, log_rho_y - log_denom)
    w = _weights_from_log(log_wt)
    fy = f.apply(ys)
    value = (w @ fy) / w.sum()
    return EstimateReport(name, value, m, log_normalizer=float(log_sum_exp(log_wt)))


def estimate_sigma2_A(history, f: Functional) -> np.ndarray:
    """Plug-in estimate of the asymptotic variance of A_n, per component:

        n * sum_k [f_i(Y_k) - S_n(f_i)]^2 w_k^2 / (sum_k w_k)^2.
    """
    n = _require_records(history)
    log_w = np.asarray(history.log_weight, dtype=float)
    if np.sum(~np.isneginf(log_w)) < 2:
        raise NumericalError("degenerate weight set: need >= 2 finite log weights")
    m = np.max(log_w)
    w = np.exp(log_w - m)
    fy = f.apply(history.y)
    center = f.apply(history.x).mean(axis=0)
    num = (w * w) @ (fy - center) ** 2
    return n * num / w.sum() ** 2


def estimate_sigma2_S_batchmeans(
    history, f: Functional, n_batches: Optional[int] = None
) -> np.ndarray:
    """Batch-means estimate of the asymptotic variance of S_n.

    Splits the first n_batches * b samples into n_batches batches of length
    b and returns b * sample variance of the batch means (any remainder at
    the end is dropped).  Default n_batches = floor(n^(1/3)).
    """
    n = _require_records(history)
    if n_batches is None:
        n_batches = int(math.floor(n ** (1.0 / 3.0)))
    if n_batches < 10:
        raise ConfigError(f"batch means needs n_batches >= 10, got {n_batches}")
    b = n // n_batches
    if b < 1:
        raise ConfigError("more batches than records")
    used = f.apply(history.x)[: n_batches * b]
    means = used.reshape(n_batches, b, -1).mean(axis=1)
    return b * means.var(axis=0, ddof=1)


def series_autocorr(series: np.ndarray, max_lag: int) -> np.ndarray:
    """Empirical autocorrelations at lags 1..max_lag of a (n,) or (n, m) series."""
    z = np.asarray(series, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
        squeeze = True
    else:
        squeeze = False
    n = z.shape[0]
    if max_lag < 1:
        raise ConfigError("max_lag must be >= 1")
    if n <= 10 * max_lag:
        raise ConfigError(f"need n > 10 * max_lag, got n={n}, max_lag={max_lag}")
    c = z - z.mean(axis=0)
    denom = np.sum(c * c, axis=0)
    if np.any(denom <= 0.0):
        raise NumericalError("degenerate series: zero variance")
    out = np.empty((max_lag, z.shape[1]))
    for lag in range(1, max_lag + 1):
        out[lag - 1] = np.sum(c[:-lag] * c[lag:], axis=0) / denom
    return out[:, 0] if squeeze else out


def weighted_series_autocorr(history, f: Functional, max_lag: int) -> np.ndarray:
    """Autocorrelations of the centered weighted series w_k (f(Y_k) - A_n(f)).

    Weights enter max-shifted; autocorrelation is invariant to that common
    positive rescaling.
    """
    _require_records(history)
    w = _weights_from_log(np.asarray(history.log_weight, dtype=float))
    fy = f.apply(history.y)
    a_val = (w @ fy) / w.sum()
    h = w[:, None] * (fy - a_val)
    return series_autocorr(h if h.shape[1] > 1 else h[:, 0], max_lag)
