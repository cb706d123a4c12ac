"""Metropolis-Hastings driver that records the augmented chain (X_k, Y_k).

One step from x: draw the proposal y, accept with probability
alpha = min(1, r) where

    r(x, y) = rho(y) p(y, x) / (rho(x) p(x, y))   if rho(x) p(x, y) > 0
    r(x, y) = 1                                    otherwise,

then record the pair (x, y) together with log alpha, the accept flag and
the importance log weight

    log w_k = log rho(Y_k) - log p(X_k, Y_k),   -inf exactly when rho(Y_k) = 0.

Per step the driver consumes proposal noise first, then one uniform for the
accept decision; this fixed order is what makes ensemble runs reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from .core import ChainRunError, ConfigError, ProposalKernel, TargetDensity, as_generator


def log_ratio_parts(log_rho_x, log_p_xy, log_rho_y, log_p_yx):
    """log r from the four log ingredients, with the zero-denominator branch.

    Where rho(x) p(x, y) = 0 the ratio is defined to be 1 (log r = 0), so a
    chain started in a null state can leave it.  The result is never NaN for
    non-NaN inputs.
    """
    num = np.asarray(log_rho_y) + np.asarray(log_p_yx)
    den = np.asarray(log_rho_x) + np.asarray(log_p_xy)
    with np.errstate(invalid="ignore"):
        raw = num - den
    return np.where(np.isneginf(den), 0.0, raw)


def log_acceptance_ratio(target: TargetDensity, proposal: ProposalKernel, x, y):
    """log r(x, y) for a single pair or a batch of pairs."""
    lrx = target.log_rho(np.asarray(x, dtype=float))
    lry = target.log_rho(np.asarray(y, dtype=float))
    lpxy = proposal.log_density(x, y)
    lpyx = lpxy if proposal.symmetric else proposal.log_density(y, x)
    return log_ratio_parts(lrx, lpxy, lry, lpyx)


class AugmentedChainRecord(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    log_alpha: float
    accepted: bool
    log_weight: float


class StepBatch(NamedTuple):
    """One ensemble step: arrays over chains, shapes (M, d) / (M,)."""

    x: np.ndarray
    y: np.ndarray
    log_alpha: np.ndarray
    accepted: np.ndarray
    log_weight: np.ndarray
    log_rho_y: np.ndarray


@dataclass
class ChainHistory:
    """Recorded augmented chain, struct-of-arrays.

    x, y have shape (n, d); log_alpha, accepted, log_weight, log_rho_y have
    shape (n,).  Indexing gives an AugmentedChainRecord view.
    """

    x: np.ndarray
    y: np.ndarray
    log_alpha: np.ndarray
    accepted: np.ndarray
    log_weight: np.ndarray
    log_rho_y: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def n_steps(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def __getitem__(self, k: int) -> AugmentedChainRecord:
        return AugmentedChainRecord(
            self.x[k],
            self.y[k],
            float(self.log_alpha[k]),
            bool(self.accepted[k]),
            float(self.log_weight[k]),
        )


@dataclass
class EnsembleHistory:
    """M chains run in lock step; arrays are (n, M, d) and (n, M)."""

    x: np.ndarray
    y: np.ndarray
    log_alpha: np.ndarray
    accepted: np.ndarray
    log_weight: np.ndarray
    log_rho_y: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.x.shape[0]

    @property
    def n_chains(self) -> int:
        return self.x.shape[1]

    @property
    def dim(self) -> int:
        return self.x.shape[2]

    def chain(self, i: int) -> ChainHistory:
        return ChainHistory(
            x=self.x[:, i],
            y=self.y[:, i],
            log_alpha=self.log_alpha[:, i],
            accepted=self.accepted[:, i],
            log_weight=self.log_weight[:, i],
            log_rho_y=self.log_rho_y[:, i],
        )


def _check_finite_proposals(y: np.ndarray, log_rho_y: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(y)):
        raise ChainRunError("proposal produced a non-finite state", step)
    bad = np.isnan(log_rho_y) | np.isposinf(log_rho_y)
    if np.any(bad):
        raise ChainRunError("target log density returned NaN or +inf", step)


def _step_batch(target, proposal, x, log_rho_x, rng, step):
    """Advance all chains one step.  Returns the recorded arrays plus the
    new (x, log_rho_x) carried state."""
    y = proposal.sample(x, rng)
    log_rho_y = np.asarray(target.log_rho(y), dtype=float)
    _check_finite_proposals(y, log_rho_y, step)

    log_p_xy = np.asarray(proposal.log_density(x, y), dtype=float)
    log_p_yx = log_p_xy if proposal.symmetric else np.asarray(
        proposal.log_density(y, x), dtype=float
    )
    log_r = log_ratio_parts(log_rho_x, log_p_xy, log_rho_y, log_p_yx)
    log_alpha = np.minimum(0.0, log_r)

    u = rng.random(x.shape[0])
    with np.errstate(divide="ignore"):
        accepted = np.log(u) < log_alpha  # strict: u < alpha accepts

    with np.errstate(invalid="ignore"):
        log_weight = np.where(np.isneginf(log_rho_y), -np.inf, log_rho_y - log_p_xy)
    if np.any(np.isnan(log_weight) | np.isposinf(log_weight)):
        raise ChainRunError("importance weight is NaN or +inf", step)

    x_next = np.where(accepted[:, None], y, x)
    log_rho_x_next = np.where(accepted, log_rho_y, log_rho_x)
    return y, log_rho_y, log_alpha, accepted, log_weight, x_next, log_rho_x_next


def run_ensemble(
    target: TargetDensity,
    proposal: ProposalKernel,
    initial_states: np.ndarray,
    n_steps: int,
    rng,
    burn_in: int = 0,
    observer: Optional[Callable[[int, StepBatch], None]] = None,
    record: bool = True,
) -> Optional[EnsembleHistory]:
    """Run M chains in lock step from initial_states of shape (M, d).

    burn_in steps are run first and discarded.  observer, if given, is
    called as observer(k, StepBatch) for each retained step; with
    record=False nothing is stored and the observer is the only consumer.
    """
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    if burn_in < 0:
        raise ConfigError("burn_in must be >= 0")
    gen = as_generator(rng)

    x = np.array(initial_states, dtype=float, copy=True)
    if x.ndim != 2 or x.shape[1] != target.dim:
        raise ConfigError(
            f"initial_states must have shape (M, {target.dim}), got {x.shape}"
        )
    if proposal.dim != target.dim:
        raise ConfigError("proposal and target dimensions differ")
    m = x.shape[0]
    log_rho_x = np.asarray(target.log_rho(x), dtype=float)
    if np.any(np.isnan(log_rho_x)):
        raise ChainRunError("target log density is NaN at an initial state", -1)

    hist = None
    if record:
        hist = EnsembleHistory(
            x=np.empty((n_steps, m, target.dim)),
            y=np.empty((n_steps, m, target.dim)),
            log_alpha=np.empty((n_steps, m)),
            accepted=np.empty((n_steps, m), dtype=bool),
            log_weight=np.empty((n_steps, m)),
            log_rho_y=np.empty((n_steps, m)),
        )

    for step in range(-burn_in, n_steps):
        y, lry, la, acc, lw, x_new, lrx_new = _step_batch(
            target, proposal, x, log_rho_x, gen, step
        )
        if step >= 0:
            if record:
                hist.x[step] = x
                hist.y[step] = y
                hist.log_alpha[step] = la
                hist.accepted[step] = acc
                hist.log_weight[step] = lw
                hist.log_rho_y[step] = lry
            if observer is not None:
                observer(step, StepBatch(x, y, la, acc, lw, lry))
        x, log_rho_x = x_new, lrx_new
    return hist


def run_chain(
    target: TargetDensity,
    proposal: ProposalKernel,
    initial_state: np.ndarray,
    n_steps: int,
    rng,
    burn_in: int = 0,
) -> ChainHistory:
    """Single-chain convenience wrapper around run_ensemble."""
    x0 = np.asarray(initial_state, dtype=float).reshape(1, -1)
    ens = run_ensemble(target, proposal, x0, n_steps, rng, burn_in=burn_in)
    return ens.chain(0)


def mh_step(
    target: TargetDensity,
    proposal: ProposalKernel,
    x: np.ndarray,
    rng,
    log_rho_x: Optional[float] = None,
) -> AugmentedChainRecord:
    """One Metropolis-Hastings step from a single state x."""
    gen = as_generator(rng)
    xb = np.asarray(x, dtype=float).reshape(1, -1)
    lrx = np.asarray(
        [target.log_rho(xb[0]) if log_rho_x is None else log_rho_x], dtype=float
    )
    y, _, la, acc, lw, _, _ = _step_batch(target, proposal, xb, lrx, gen, 0)
    return AugmentedChainRecord(xb[0], y[0], float(la[0]), bool(acc[0]), float(lw[0]))


def acceptance_rate(history) -> float:
    acc = np.asarray(history.accepted)
    if acc.size == 0:
        raise ConfigError("acceptance rate of an empty history is undefined")
    return float(np.mean(acc))


def write_chain_csv(history: ChainHistory, path) -> None:
    """Dump a recorded chain as CSV.

    Columns: step, x0..x{d-1}, y0..y{d-1}, log_alpha, accepted (0/1),
    log_weight.  Floats are written with repr so a reader recovers them bit
    for bit.
    """
    d = history.dim
    cols = (
        ["step"]
        + [f"x{i}" for i in range(d)]
        + [f"y{i}" for i in range(d)]
        + ["log_alpha", "accepted", "log_weight"]
    )
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for k in range(len(history)):
            row = [str(k)]
            row += [repr(float(v)) for v in history.x[k]]
            row += [repr(float(v)) for v in history.y[k]]
            row.append(repr(float(history.log_alpha[k])))
            row.append(str(int(history.accepted[k])))
            row.append(repr(float(history.log_weight[k])))
            fh.write(",".join(row) + "\n")
