"""Finite-state structural verification of the augmented-chain operators.

On a finite state space of size g with counting reference measure, all the
kernels are explicit matrices:

    K        g   x g    MH kernel, reversible w.r.t. mu = rho / sum(rho)
    K_aug    g^2 x g^2  kernel of the pair chain (X_k, Y_k)
    H        g^2 x g^2  swap-or-stay kernel, self-adjoint in L2(nu)
    Phat     g   x g^2  conditional average over the proposal
    Pstar    g^2 x g    lifting (Pstar h)(x, y) = h(x)

with nu[(x, y)] = mu[x] P[x, y] stationary for K_aug.  The checks here
verify stationarity, reversibility and its known failure for K_aug,
the operator factorizations K = Phat H Pstar and K_aug = H Pstar Phat,
power identities, spectral facts on mean-zero subspaces, and geometric
ergodicity of the pair chain at the rate of K.

Acceptance ratios reuse the sampler's log_ratio_parts, so the matrix
construction and the Monte Carlo driver cannot drift apart.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import ConfigError, as_generator
from .sampler import log_ratio_parts

IDENTITY_TOL = 1e-12  # exact algebraic identities
EIGEN_TOL = 1e-8  # dense eigensolve assertions
NILPOTENT_TOL = 1e-12


@dataclass(frozen=True)
class FiniteChainModel:
    """Explicit matrices for one finite MH model.

    Pair states are flattened row-major: pair (x, y) sits at index x*g + y.
    """

    rho: np.ndarray
    P: np.ndarray
    alpha: np.ndarray
    K: np.ndarray
    K_aug: np.ndarray
    H: np.ndarray
    Phat: np.ndarray
    Pstar: np.ndarray
    mu: np.ndarray
    nu: np.ndarray

    @property
    def g(self) -> int:
        return len(self.rho)

    def pair_index(self, x: int, y: int) -> int:
        return x * self.g + y


def build_finite_model(rho, P) -> FiniteChainModel:
    """Assemble all kernels from an unnormalised mass vector and a proposal.

    Validates: P row-stochastic and non-negative, rho non-negative with
    positive total mass, and the positivity condition P[x, y] > 0 wherever
    rho[y] > 0 (so proposals can always reach mass).  Violations name the
    offending entry.
    """
    rho = np.asarray(rho, dtype=float)
    P = np.asarray(P, dtype=float)
    g = len(rho)
    if P.shape != (g, g):
        raise ConfigError(f"P must be {g}x{g}, got {P.shape}")
    if np.any(rho < 0.0):
        raise ConfigError(f"rho[{int(np.argmin(rho))}] is negative")
    if not np.any(rho > 0.0):
        raise ConfigError("rho has no mass")
    if np.any(P < 0.0):
        x, y = np.unravel_index(int(np.argmin(P)), P.shape)
        raise ConfigError(f"P[{x},{y}] is negative")
    bad_rows = np.abs(P.sum(axis=1) - 1.0) > IDENTITY_TOL
    if np.any(bad_rows):
        raise ConfigError(f"P row {int(np.argmax(bad_rows))} does not sum to 1")
    dead = (P == 0.0) & (rho[None, :] > 0.0)
    if np.any(dead):
        x, y = np.unravel_index(int(np.argmax(dead)), dead.shape)
        raise ConfigError(
            f"positivity violated: rho[{y}] > 0 but P[{x},{y}] = 0"
        )

    with np.errstate(divide="ignore"):
        log_rho = np.log(rho)
        log_P = np.log(P)
    log_r = log_ratio_parts(
        log_rho[:, None], log_P, log_rho[None, :], log_P.T
    )
    alpha = np.exp(np.minimum(0.0, log_r))

    accepted_mass = alpha * P
    K = accepted_mass.copy()
    K[np.diag_indices(g)] += 1.0 - accepted_mass.sum(axis=1)

    K_aug = np.zeros((g * g, g * g))
    H = np.zeros((g * g, g * g))
    Phat = np.zeros((g, g * g))
    Pstar = np.zeros((g * g, g))
    for x in range(g):
        Phat[x, x * g : (x + 1) * g] = P[x]
        for y in range(g):
            row = x * g + y
            a = alpha[x, y]
            K_aug[row, y * g : (y + 1) * g] += a * P[y]
            K_aug[row, x * g : (x + 1) * g] += (1.0 - a) * P[x]
            H[row, y * g + x] += a
            H[row, x * g + y] += 1.0 - a
            Pstar[row, x] = 1.0

    mu = rho / rho.sum()
    nu = (mu[:, None] * P).reshape(-1)
    return FiniteChainModel(rho, P, alpha, K, K_aug, H, Phat, Pstar, mu, nu)


def two_state_uniform_model() -> FiniteChainModel:
    """rho = (1/2, 1/2), P = 1/2 everywhere: every proposal is accepted and
    the pair chain is the classic example of a non-reversible K_aug."""
    return build_finite_model(np.array([0.5, 0.5]), np.full((2, 2), 0.5))


def random_finite_model(g: int, rng, laziness: float = 0.6) -> FiniteChainModel:
    """Random valid model with a lazy proposal P = laziness*I + (1-l)*Dirichlet.

    The diagonal mass keeps K diagonally dominant (K[x,x] >= laziness), so
    by Gershgorin the spectrum of K stays positive with a clean margin;
    this is the regime in which the non-negative-spectrum facts being
    verified hold with room for floating point.
    """
    gen = as_generator(rng)
    if not 0.0 < laziness < 1.0:
        raise ConfigError("laziness must be in (0, 1)")
    rho = gen.uniform(0.25, 1.0, size=g)
    base = gen.dirichlet(np.ones(g), size=g)
    P = laziness * np.eye(g) + (1.0 - laziness) * base
    P /= P.sum(axis=1, keepdims=True)
    return build_finite_model(rho, P)


# ---------------------------------------------------------------------------
# reports

@dataclass
class CheckReport:
    name: str
    passed: bool
    residuals: Dict[str, float] = field(default_factory=dict)
    note: str = ""

    def __str__(self) -> str:
        res = ", ".join(f"{k}={v:.3g}" for k, v in self.residuals.items())
        tail = f" ({self.note})" if self.note else ""
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {res}{tail}"


def check_stationarity_nu(model: FiniteChainModel) -> CheckReport:
    """nu must be invariant for the pair kernel: ||nu^T K_aug - nu^T||_inf."""
    resid = float(np.max(np.abs(model.nu @ model.K_aug - model.nu)))
    return CheckReport(
        "stationarity_nu", resid <= IDENTITY_TOL, {"residual": resid}
    )


def reversibility_asymmetry(matrix: np.ndarray, stationary: np.ndarray) -> float:
    """max |pi(x) T(x,y) - pi(y) T(y,x)|; zero iff (T, pi) is reversible."""
    matrix = np.asarray(matrix, dtype=float)
    stationary = np.asarray(stationary, dtype=float)
    if matrix.shape != (len(stationary), len(stationary)):
        raise ConfigError("stationary vector does not match matrix dimension")
    flow = stationary[:, None] * matrix
    return float(np.max(np.abs(flow - flow.T)))


def check_reversibility(model: FiniteChainModel) -> CheckReport:
    """K is reversible w.r.t. mu; the pair kernel generally is not w.r.t. nu.

    Passes when the K asymmetry is at identity tolerance.  The K_aug
    asymmetry is reported alongside as evidence, not a failure.
    """
    k_resid = reversibility_asymmetry(model.K, model.mu)
    aug_resid = reversibility_asymmetry(model.K_aug, model.nu)
    return CheckReport(
        "reversibility",
        k_resid <= IDENTITY_TOL,
        {"K_asymmetry": k_resid, "K_aug_asymmetry": aug_resid},
    )


def check_operator_identities(model: FiniteChainModel) -> CheckReport:
    """Factorisations and adjoint structure, all as dense matrix residuals:

    K = Phat H Pstar, K_aug = H Pstar Phat, K_aug^n = H Pstar K^(n-1) Phat
    for n = 2, 3; H self-adjoint in L2(nu); Phat Pstar = I; Pstar adjoint
    to Phat across the mu/nu inner products; Pi = Pstar Phat idempotent.
    """
    m = model
    res = {}
    res["K_factorisation"] = float(
        np.max(np.abs(m.Phat @ m.H @ m.Pstar - m.K))
    )
    res["K_aug_factorisation"] = float(
        np.max(np.abs(m.H @ m.Pstar @ m.Phat - m.K_aug))
    )
    k_aug_n = m.K_aug
    k_n = np.eye(m.g)
    for n in (2, 3):
        k_aug_n = k_aug_n @ m.K_aug
        k_n = k_n @ m.K
        res[f"K_aug_power_{n}"] = float(
            np.max(np.abs(m.H @ m.Pstar @ k_n @ m.Phat - k_aug_n))
        )
    w_nu = m.nu[:, None]
    res["H_self_adjoint"] = float(np.max(np.abs(w_nu * m.H - (w_nu * m.H).T)))
    res["Phat_Pstar_identity"] = float(
        np.max(np.abs(m.Phat @ m.Pstar - np.eye(m.g)))
    )
    res["adjointness"] = float(
        np.max(np.abs(w_nu * m.Pstar - (m.mu[:, None] * m.Phat).T))
    )
    pi = m.Pstar @ m.Phat
    res["projection_idempotent"] = float(np.max(np.abs(pi @ pi - pi)))

    power_tol = {"K_aug_power_2": 1e-10, "K_aug_power_3": 1e-10}
    passed = all(
        v <= power_tol.get(k, IDENTITY_TOL) for k, v in res.items()
    )
    return CheckReport("operator_identities", passed, res)


# ---------------------------------------------------------------------------
# weighted-norm machinery

def _restricted_matrix(T: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Matrix of T on the weighted mean-zero subspace of its support.

    Zero-mass coordinates are dropped (stationarity forbids flow into them
    from the support, so the restriction is exact); the rest is the
    similarity transform D^(1/2) T D^(-1/2) followed by a Householder
    rotation sending sqrt(weights) to the first axis, which is then cut.
    """
    keep = weights > 0.0
    Tk = T[np.ix_(keep, keep)]
    d = np.sqrt(weights[keep])
    Ts = (d[:, None] * Tk) / d[None, :]
    v = d / np.linalg.norm(d)
    size = len(v)
    if size == 1:
        return np.zeros((0, 0))
    u = v.copy()
    u[0] -= 1.0
    norm_u = np.linalg.norm(u)
    if norm_u < 1e-14:
        q = np.eye(size)
    else:
        q = np.eye(size) - 2.0 * np.outer(u, u) / (norm_u * norm_u)
    return (q.T @ Ts @ q)[1:, 1:]


def operator_norm_meanzero(T: np.ndarray, weights: np.ndarray) -> float:
    """Weighted L2 operator norm of T restricted to mean-zero functions."""
    r = _restricted_matrix(T, weights)
    if r.size == 0:
        return 0.0
    return float(np.linalg.svd(r, compute_uv=False)[0])


def spectrum_meanzero(T: np.ndarray, weights: np.ndarray) -> np.ndarray:
    r = _restricted_matrix(T, weights)
    if r.size == 0:
        return np.zeros(0, dtype=complex)
    return np.linalg.eigvals(r)


def _nilpotency_order(R: np.ndarray) -> Optional[int]:
    """Smallest j with ||R^j|| <= tol, or None.  A vanishing power proves
    the spectrum is exactly {0} even when the floating eigensolve scatters
    the defective zero eigenvalue at the eps^(1/j) scale."""
    if R.size == 0:
        return 0
    power = np.eye(R.shape[0])
    for j in range(1, R.shape[0] + 1):
        power = power @ R
        if float(np.max(np.abs(power))) <= NILPOTENT_TOL:
            return j
    return None


@dataclass
class SpectralReport:
    passed: bool
    k_norm0: float
    k_aug_spectrum: np.ndarray
    max_imag: float
    min_real: float
    spectral_radius: float
    nilpotent_order: Optional[int]
    power_norms: List[Tuple[float, float]]

    @property
    def residuals(self) -> Dict[str, float]:
        return {
            "max_imag": self.max_imag,
            "min_real": self.min_real,
            "radius_minus_norm": self.spectral_radius - self.k_norm0,
        }

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        nil = f", nilpotent^{self.nilpotent_order}" if self.nilpotent_order else ""
        return (
            f"[{status}] spectral_bounds: |Im|max={self.max_imag:.3g}, "
            f"Re min={self.min_real:.3g}, radius={self.spectral_radius:.3g} "
            f"<= ||K||0={self.k_norm0:.3g}{nil}"
        )


def check_spectral_bounds(model: FiniteChainModel) -> SpectralReport:
    """Spectrum of K_aug on mean-zero L2(nu): real, non-negative, and with
    spectral radius at most ||K||0; plus ||K^n||0 <= ||K_aug^(n-1)||0 for
    n = 2, 3.

    When the restricted K_aug is numerically nilpotent its spectrum is
    {0} exactly and the raw eigenvalues (pure rounding scatter) are
    overridden; this is the two-state model's situation.
    """
    if model.g > 50:
        raise ConfigError("dense spectral check limited to g <= 50")
    r_aug = _restricted_matrix(model.K_aug, model.nu)
    spec = np.linalg.eigvals(r_aug) if r_aug.size else np.zeros(0, dtype=complex)
    k_norm0 = operator_norm_meanzero(model.K, model.mu)
    nil = _nilpotency_order(r_aug)
    if nil is not None:
        max_imag = 0.0
        min_real = 0.0
        radius = 0.0
    else:
        max_imag = float(np.max(np.abs(spec.imag))) if spec.size else 0.0
        min_real = float(np.min(spec.real)) if spec.size else 0.0
        radius = float(np.max(np.abs(spec))) if spec.size else 0.0

    k_power = model.K
    aug_power = np.eye(model.g**2)
    power_norms = []
    for _ in (2, 3):
        k_power = k_power @ model.K
        aug_power = aug_power @ model.K_aug
        power_norms.append(
            (
                operator_norm_meanzero(k_power, model.mu),
                operator_norm_meanzero(aug_power, model.nu),
            )
        )

    passed = (
        max_imag <= EIGEN_TOL
        and min_real >= -EIGEN_TOL
        and radius <= k_norm0 + EIGEN_TOL
        and all(kn <= an + 1e-10 for kn, an in power_norms)
    )
    return SpectralReport(
        passed, k_norm0, spec, max_imag, min_real, radius, nil, power_norms
    )


def check_geometric_ergodicity(
    model: FiniteChainModel, rng, n_max: int = 30, n_densities: int = 10
) -> CheckReport:
    """d_TV(eta K_aug^n, nu) <= C_eta r^n with r = ||K||0, the restricted
    norm of the marginal kernel (the augmented chain contracts at the
    marginal rate because K_aug^n factors through K^(n-1)), and
    C_eta = (1/r) ||d eta/d nu - 1||_nu, checked for random bounded-density
    starts.  The bound is evaluated as ||d eta/d nu - 1|| r^(n-1), the same
    quantity without the removable 1/r singularity at r = 0.
    """
    gen = as_generator(rng)
    r = operator_norm_meanzero(model.K, model.mu)
    support = model.nu > 0.0
    worst = -np.inf
    for _ in range(n_densities):
        density = np.zeros_like(model.nu)
        density[support] = 1.0 + 0.9 * gen.uniform(-1.0, 1.0, int(support.sum()))
        eta = model.nu * density
        eta /= eta.sum()
        with np.errstate(invalid="ignore"):
            ratio = np.where(support, eta / np.where(support, model.nu, 1.0), 1.0)
        c_base = float(np.sqrt(np.sum(model.nu[support] * (ratio[support] - 1.0) ** 2)))
        dist = eta
        for n in range(1, n_max + 1):
            dist = dist @ model.K_aug
            d_tv = 0.5 * float(np.sum(np.abs(dist - model.nu)))
            bound = c_base * r ** (n - 1)
            worst = max(worst, d_tv - bound)
    return CheckReport(
        "geometric_ergodicity",
        worst <= 1e-12,
        {"max_excess": worst, "rate": r},
    )


def verify_model(model: FiniteChainModel, rng) -> List:
    """All checks on one model, in reporting order."""
    return [
        check_stationarity_nu(model),
        check_reversibility(model),
        check_operator_identities(model),
        check_spectral_bounds(model),
        check_geometric_ergodicity(model, rng),
    ]
