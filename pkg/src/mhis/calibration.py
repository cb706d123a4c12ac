"""Stepsize calibration for the importance-sampling estimator.

The target relation is the first-order optimality condition s^2 = J_f(s),
where for a random-walk proposal with covariance C

    J_f(s) = sum_k r_k |Y_k - X_k|_C^2 / (d * sum_k r_k),
    r_k    = |f(Y_k) - (1/n) sum_j f(X_j)|^2 * w_k^2,

(|.|^2 the squared Euclidean norm over f's components) and for MALA

    J_f(s) = sum_k r_k |Y_k - m_s(X_k)|^2
             / sum_k r_k [d - (Y_k - m_s(X_k))^T grad log rho(X_k)].

J(s) is the same ratio with the residual factor dropped (r_k = w_k^2).
calibrate_stepsize finds a sign change of g(s) = s^2 - J_f(s) on a coarse
geometric grid and bisects, re-running a pilot chain per evaluation with
common random numbers so g is a deterministic function of s.

quadrature_V evaluates V(s) = int int |f(y)-Ef|^2 rho(y)/p_s(x,y) mu(dy)mu(dx)
on low-dimensional targets by tensor Gauss-Legendre quadrature; its argmin
is the oracle the calibration is validated against.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss

from .core import (
    ConfigError,
    NumericalError,
    ProposalKernel,
    RngStream,
    TargetDensity,
    log_sum_exp,
)
from .estimators import Functional
from .sampler import acceptance_rate, run_chain


# ---------------------------------------------------------------------------
# empirical functionals

def _squared_weights(history) -> np.ndarray:
    log_w = np.asarray(history.log_weight, dtype=float)
    m = np.max(log_w)
    if np.isneginf(m):
        raise NumericalError("degenerate weight set: all importance weights are zero")
    a = np.exp(log_w - m)
    return a * a  # common exp(2m) factor cancels in every ratio below


def _residual_sq(history, f: Functional) -> np.ndarray:
    fy = f.apply(history.y)
    center = f.apply(history.x).mean(axis=0)
    r = fy - center
    return np.sum(r * r, axis=-1)


def _j_ratio(history, proposal: ProposalKernel, weights: np.ndarray) -> float:
    if proposal.kind == "rw":
        q = proposal.mahalanobis_sq(history.x, history.y)
        den = proposal.dim * float(np.sum(weights))
        if den <= 0.0:
            raise NumericalError("calibration functional degenerate")
        return float(np.sum(weights * q)) / den
    if proposal.kind == "mala":
        disp = np.asarray(history.y) - proposal.drift(history.x)
        q = np.sum(disp * disp, axis=-1)
        grad = proposal.target.grad_log_rho(np.asarray(history.x))
        den_terms = proposal.dim - np.sum(disp * grad, axis=-1)
        den = float(np.sum(weights * den_terms))
        if den == 0.0:
            raise NumericalError("MALA calibration denominator vanished")
        return float(np.sum(weights * q)) / den
    raise ConfigError(f"no calibration rule for proposal kind {proposal.kind!r}")


def empirical_J_f(history, f: Functional, proposal: ProposalKernel) -> float:
    """Functional-weighted stepsize ratio J_f from recorded chain states."""
    r = _residual_sq(history, f)
    if not np.any(r > 0.0):
        raise NumericalError("calibration functional degenerate")
    return _j_ratio(history, proposal, r * _squared_weights(history))


def empirical_J(history, proposal: ProposalKernel) -> float:
    """Functional-free variant of J_f (squared weights only)."""
    return _j_ratio(history, proposal, _squared_weights(history))


# ---------------------------------------------------------------------------
# calibration loop

@dataclass(frozen=True)
class CalibrationConfig:
    s_lo: float
    s_hi: float
    grid_points: int = 8
    pilot_steps: int = 20000
    pilot_burn_in: int = 1000
    tol: float = 0.05
    max_iters: int = 40
    initial_state: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (0.0 < self.s_lo < self.s_hi):
            raise ConfigError("need 0 < s_lo < s_hi")
        if self.grid_points < 2:
            raise ConfigError("grid needs at least 2 points")
        if not (0.0 < self.tol < 1.0):
            raise ConfigError("tol must be in (0, 1)")


@dataclass(frozen=True)
class CalibrationIterate:
    iteration: int
    s: float
    J_f: float
    J: float
    acceptance_rate: float
    g: float


@dataclass
class CalibrationState:
    """Result of calibrate_stepsize: the chosen s, its functional values,
    every (s, J_f, J, acceptance, g) evaluation in order, and all sign
    change intervals found on the scan grid (the relation may have several
    roots; the first is the one bisected)."""

    s_current: float
    J_f_value: float
    J_value: float
    history: List[CalibrationIterate] = field(default_factory=list)
    brackets: List[Tuple[float, float]] = field(default_factory=list)
    converged: bool = False


def calibrate_stepsize(
    target: TargetDensity,
    proposal_factory: Callable[[float], ProposalKernel],
    f: Functional,
    config: CalibrationConfig,
    rng,
) -> CalibrationState:
    """Locate s with s^2 close to J_f(s) by grid scan plus bisection.

    Every J_f evaluation runs a fresh pilot chain with the same random
    stream (common random numbers), so g(s) = s^2 - J_f(s) is deterministic
    in s and bisection is well posed despite the Monte Carlo noise.  The
    returned s always lies inside [s_lo, s_hi].
    """
    if isinstance(rng, (int, np.integer)):
        rng = RngStream(int(rng))
    if not isinstance(rng, RngStream):
        raise ConfigError("calibration needs an RngStream (or int seed) for CRN reuse")
    x0 = (
        np.zeros(target.dim)
        if config.initial_state is None
        else np.asarray(config.initial_state, dtype=float)
    )

    evals: List[CalibrationIterate] = []

    def g_eval(s: float) -> CalibrationIterate:
        proposal = proposal_factory(s)
        hist = run_chain(
            target, proposal, x0, config.pilot_steps, rng, burn_in=config.pilot_burn_in
        )
        jf = empirical_J_f(hist, f, proposal)
        it = CalibrationIterate(
            iteration=len(evals),
            s=float(s),
            J_f=jf,
            J=empirical_J(hist, proposal),
            acceptance_rate=acceptance_rate(hist),
            g=float(s * s - jf),
        )
        evals.append(it)
        return it

    grid = np.geomspace(config.s_lo, config.s_hi, config.grid_points)
    scan = [g_eval(s) for s in grid]

    brackets = [
        (scan[i].s, scan[i + 1].s)
        for i in range(len(scan) - 1)
        if scan[i].g == 0.0 or (scan[i].g < 0.0) != (scan[i + 1].g < 0.0)
    ]
    if not brackets:
        gs = ", ".join(f"g({it.s:.4g})={it.g:.4g}" for it in scan)
        raise ConfigError(f"no sign change of s^2 - J_f(s) in the bracket: {gs}")

    def finish(it: CalibrationIterate, converged: bool) -> CalibrationState:
        return CalibrationState(
            s_current=it.s,
            J_f_value=it.J_f,
            J_value=it.J,
            history=evals,
            brackets=brackets,
            converged=converged,
        )

    best = min(evals, key=lambda it: abs(it.g) / it.s**2)
    if abs(best.g) / best.s**2 < config.tol:
        return finish(best, True)

    lo, hi = brackets[0]
    g_lo = next(it.g for it in scan if it.s == lo)
    while len(evals) < config.max_iters + len(scan):
        mid = math.sqrt(lo * hi)  # geometric midpoint, grid is geometric too
        it = g_eval(mid)
        if abs(it.g) / it.s**2 < config.tol:
            return finish(it, True)
        if (it.g < 0.0) == (g_lo < 0.0):
            lo, g_lo = mid, it.g
        else:
            hi = mid
    best = min(evals, key=lambda it: abs(it.g) / it.s**2)
    return finish(best, False)


def calibrate_acceptance_rate(
    target: TargetDensity,
    proposal_factory: Callable[[float], ProposalKernel],
    target_rate: float,
    config: CalibrationConfig,
    rng,
    atol: float = 0.01,
) -> float:
    """Bisect the stepsize so the pilot acceptance rate hits target_rate.

    The classical heuristic values are 0.44 in one dimension and 0.234 in
    higher dimensions.  Acceptance decreases in s for these kernels.
    """
    if isinstance(rng, (int, np.integer)):
        rng = RngStream(int(rng))
    x0 = (
        np.zeros(target.dim)
        if config.initial_state is None
        else np.asarray(config.initial_state, dtype=float)
    )

    def rate(s: float) -> float:
        hist = run_chain(
            target,
            proposal_factory(s),
            x0,
            config.pilot_steps,
            rng,
            burn_in=config.pilot_burn_in,
        )
        return acceptance_rate(hist)

    lo, hi = config.s_lo, config.s_hi
    r_lo, r_hi = rate(lo), rate(hi)
    if not (r_lo >= target_rate >= r_hi):
        raise ConfigError(
            f"acceptance()={r_lo:.3f}..{r_hi:.3f} does not bracket {target_rate}"
        )
    for _ in range(config.max_iters):
        mid = math.sqrt(lo * hi)
        r = rate(mid)
        if abs(r - target_rate) <= atol:
            return mid
        if r > target_rate:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


def write_calibration_csv(state: CalibrationState, path) -> None:
    """Audit log, one row per J_f evaluation in order."""
    with open(path, "w") as fh:
        fh.write("iter,s,J_f,J,acceptance_rate,g\n")
        for it in state.history:
            fh.write(
                f"{it.iteration},{float(it.s)!r},{float(it.J_f)!r},{float(it.J)!r},"
                f"{float(it.acceptance_rate)!r},{float(it.g)!r}\n"
            )


# ---------------------------------------------------------------------------
# quadrature oracles for V(s), sigma2_A and J_f

def _gl_grid(support: Sequence[float], nodes: int, dim: int):
    """Tensor Gauss-Legendre states (N, dim) and log weights (N,)."""
    lo, hi = float(support[0]), float(support[1])
    z, w = leggauss(nodes)
    pts = 0.5 * (hi - lo) * z + 0.5 * (hi + lo)
    logw = np.log(0.5 * (hi - lo) * w)
    if dim == 1:
        return pts[:, None], logw
    states = np.stack(np.meshgrid(pts, pts, indexing="ij"), axis=-1).reshape(-1, 2)
    lw = (logw[:, None] + logw[None, :]).reshape(-1)
    return states, lw


def _pair_logsums(
    target: TargetDensity,
    proposal: ProposalKernel,
    f: Optional[Functional],
    support: Sequence[float],
    nodes: int,
    with_displacement: bool,
    chunk: int = 64,
):
    """Log-domain tensor sums shared by the V / sigma2_A / J_f oracles.

    Returns (log_Z, log_A, log_C, log_B, log_D) where, with b(y) the
    per-component squared residual of f against the quadrature mean,

        Z = int rho(x) dx
        A_i = II b_i(y) rho(y)^2 rho(x) / p_s dy dx
        C   = II rho(y)^2 rho(x) / p_s dy dx
        B_i = II b_i(y) rho(y)^2 rho(x) q(x,y) / p_s dy dx
        D   = II rho(y)^2 rho(x) q(x,y) / p_s dy dx

    q being the proposal's squared displacement metric.  B, D are None
    unless with_displacement.
    """
    states, logw = _gl_grid(support, nodes, target.dim)
    log_rho = np.asarray(target.log_rho(states), dtype=float)
    if np.any(np.isnan(log_rho)):
        raise NumericalError("target log density is NaN on the quadrature grid")
    log_z = log_sum_exp(log_rho + logw)

    if f is None:
        n_comp = 0
        log_b = None
    else:
        vals = f.apply(states)
        m_shift = np.max(log_rho + logw)
        g = np.exp(log_rho + logw - m_shift)
        mean_f = (g @ vals) / g.sum()
        resid2 = (vals - mean_f) ** 2
        with np.errstate(divide="ignore"):
            log_b = np.log(resid2)  # -inf where the residual vanishes
        n_comp = vals.shape[1]

    n = states.shape[0]
    pieces_a = [] if f is not None else None
    pieces_b = [] if (f is not None and with_displacement) else None
    pieces_c = []
    pieces_d = [] if with_displacement else None
    for lo_i in range(0, n, chunk):
        hi_i = min(lo_i + chunk, n)
        xs = states[lo_i:hi_i]
        lp = np.asarray(
            proposal.log_density(xs[:, None, :], states[None, :, :]), dtype=float
        )
        base = (
            (log_rho[lo_i:hi_i] + logw[lo_i:hi_i])[:, None]
            + 2.0 * log_rho[None, :]
            + logw[None, :]
            - lp
        )  # (X chunk, Y) with x the outer integral
        pieces_c.append(log_sum_exp(base, axis=1))
        if with_displacement:
            if proposal.kind == "rw":
                q = proposal.mahalanobis_sq(xs[:, None, :], states[None, :, :])
            else:
                raise ConfigError("displacement quadrature implemented for rw only")
            with np.errstate(divide="ignore"):
                log_q = np.log(q)
            pieces_d.append(log_sum_exp(base + log_q, axis=1))
        if f is not None:
            for i in range(n_comp):
                pieces_a.append((i, log_sum_exp(base + log_b[None, :, i], axis=1)))
                if with_displacement:
                    pieces_b.append(
                        (i, log_sum_exp(base + log_b[None, :, i] + log_q, axis=1))
                    )

    def collect(tagged, count):
        out = np.empty(count)
        for i in range(count):
            rows = np.concatenate([r for tag, r in tagged if tag == i])
            out[i] = log_sum_exp(rows)
        return out

    log_c = log_sum_exp(np.concatenate(pieces_c))
    log_a = collect(pieces_a, n_comp) if f is not None else None
    log_d = log_sum_exp(np.concatenate(pieces_d)) if with_displacement else None
    log_bsum = (
        collect(pieces_b, n_comp) if (f is not None and with_displacement) else None
    )
    return log_z, log_a, log_c, log_bsum, log_d


def _grow_support(support: Sequence[float], factor: float) -> Tuple[float, float]:
    lo, hi = float(support[0]), float(support[1])
    mid, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
    return (mid - factor * half, mid + factor * half)


def _refined(
    compute: Callable[[int, float], np.ndarray], nodes: int, rtol: float, what: str
):
    """Recompute at doubled nodes AND enlarged support; demand agreement.

    Node doubling alone checks resolution only: a pair integral that is
    genuinely infinite still converges on any fixed box, silently returning
    the truncation value.  Growing the box is what detects divergence --
    for an integrable pair density the added shell carries ~exp(-R^2/2)
    mass, while a divergent integrand grows without bound in it.
    """
    with np.errstate(over="ignore"):  # overflow IS the diagnosis, raised below
        coarse = compute(nodes, 1.0)
        fine = compute(2 * nodes, 1.25)
    if not (np.all(np.isfinite(coarse)) and np.all(np.isfinite(fine))):
        raise NumericalError(f"quadrature overflow for {what}: pair integral diverges")
    scale = max(float(np.max(np.abs(fine))), 1e-300)
    if float(np.max(np.abs(fine - coarse))) / scale > rtol:
        raise NumericalError(
            f"quadrature disagreement for {what}: {coarse} vs {fine} "
            f"at {nodes}/{2 * nodes} nodes (support x1/x1.25)"
        )
    return fine


def quadrature_V(
    target: TargetDensity,
    proposal_factory: Callable[[float], ProposalKernel],
    f: Functional,
    s_grid: Sequence[float],
    support: Sequence[float] = (-12.0, 12.0),
    nodes: int = 200,
    rtol: float = 1e-4,
) -> List[Tuple[float, float]]:
    """V(s) over a stepsize grid by tensor quadrature (target dim <= 2).

    V(s) = II |f(y) - E_mu f|^2 rho(y)/p_s(x,y) mu(dy) mu(dx), the squared
    norm summing f's components.  Each value is recomputed at doubled node
    count on an enlarged box and must agree to rtol relative.  V is
    genuinely infinite when the proposal's tails are too short for the
    target (for the 1-D Gaussian with RW steps, s^2 <= 3/2); that surfaces
    here as a refinement disagreement or overflow, raised as
    NumericalError.
    """
    if target.dim > 2:
        raise ConfigError("quadrature_V supports target dim <= 2")
    out = []
    for s in s_grid:
        proposal = proposal_factory(float(s))

        def one(nn: int, grow: float) -> np.ndarray:
            log_z, log_a, _, _, _ = _pair_logsums(
                target, proposal, f, _grow_support(support, grow), nn,
                with_displacement=False,
            )
            return np.exp(log_sum_exp(log_a) - 2.0 * log_z)

        v = _refined(one, nodes, rtol, f"V(s={s})")
        out.append((float(s), float(v)))
    return out


def quadrature_sigma2_A(
    target: TargetDensity,
    proposal: ProposalKernel,
    f: Functional,
    support: Sequence[float] = (-12.0, 12.0),
    nodes: int = 200,
    rtol: float = 1e-4,
) -> np.ndarray:
    """Per-component asymptotic variance integral, invariant to scaling rho.

    Same integrand as V but normalised per component by Z^3, which makes it
    the variance integral for the probability density rho/Z.
    """
    if target.dim > 2:
        raise ConfigError("quadrature_sigma2_A supports target dim <= 2")

    def one(nn: int, grow: float) -> np.ndarray:
        log_z, log_a, _, _, _ = _pair_logsums(
            target, proposal, f, _grow_support(support, grow), nn,
            with_displacement=False,
        )
        return np.exp(log_a - 3.0 * log_z)

    return _refined(one, nodes, rtol, "sigma2_A")


def quadrature_J_f(
    target: TargetDensity,
    proposal: ProposalKernel,
    f: Functional,
    support: Sequence[float] = (-12.0, 12.0),
    nodes: int = 200,
    rtol: float = 1e-4,
) -> float:
    """Quadrature version of the RW calibration ratio J_f."""
    if target.dim > 2:
        raise ConfigError("quadrature_J_f supports target dim <= 2")

    def one(nn: int, grow: float) -> np.ndarray:
        _, log_a, _, log_b, _ = _pair_logsums(
            target, proposal, f, _grow_support(support, grow), nn,
            with_displacement=True,
        )
        return np.atleast_1d(
            np.exp(log_sum_exp(log_b) - log_sum_exp(log_a)) / proposal.dim
        )

    return float(_refined(one, nodes, rtol, "J_f")[0])


def quadrature_expectation(
    target: TargetDensity,
    f: Functional,
    support: Sequence[float] = (-12.0, 12.0),
    nodes: int = 200,
) -> np.ndarray:
    """E_mu[f] on a dim <= 2 target by tensor quadrature (no pair integral)."""
    if target.dim > 2:
        raise ConfigError("quadrature_expectation supports target dim <= 2")
    states, logw = _gl_grid(support, nodes, target.dim)
    log_rho = np.asarray(target.log_rho(states), dtype=float)
    vals = f.apply(states)
    m = np.max(log_rho + logw)
    g = np.exp(log_rho + logw - m)
    return (g @ vals) / g.sum()
