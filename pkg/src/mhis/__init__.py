"""Importance sampling on the proposals of a Metropolis-Hastings chain.

The augmented chain (X_k, Y_k) of states and proposals supports a
self-normalized estimator A_n built from the weights rho(Y_k)/p(X_k, Y_k),
alongside the classical ergodic average S_n, the acceptance-rate-weighted
recycler WR_n, and mixture estimators B_n / B_sqrt(n) that reuse the
proposal cloud.  The package adds stepsize calibration driven by an
empirical dispersion functional, asymptotic-variance estimation, exact
operator-level verification on finite state spaces, and a config-driven
experiment runner.
"""
from .core import (
    ChainRunError,
    ConfigError,
    GaussianRandomWalk,
    MalaProposal,
    NumericalError,
    ProposalKernel,
    RngStream,
    TargetDensity,
    as_generator,
    finite_difference_gradient,
    gaussian_rw_proposal,
    log_sum_exp,
    mala_proposal,
)
from .sampler import (
    AugmentedChainRecord,
    ChainHistory,
    EnsembleHistory,
    StepBatch,
    acceptance_rate,
    log_acceptance_ratio,
    log_ratio_parts,
    mh_step,
    run_chain,
    run_ensemble,
    write_chain_csv,
)
from .estimators import (
    EstimateReport,
    Functional,
    coordinate_functional,
    estimate_A,
    estimate_B,
    estimate_S,
    estimate_WR,
    estimate_sigma2_A,
    estimate_sigma2_S_batchmeans,
    identity_functional,
    series_autocorr,
    subsample_indices,
    weighted_series_autocorr,
)
from .calibration import (
    CalibrationConfig,
    CalibrationIterate,
    CalibrationState,
    calibrate_acceptance_rate,
    calibrate_stepsize,
    empirical_J,
    empirical_J_f,
    quadrature_J_f,
    quadrature_V,
    quadrature_expectation,
    quadrature_sigma2_A,
    write_calibration_csv,
)
from .finite_verify import (
    CheckReport,
    FiniteChainModel,
    SpectralReport,
    build_finite_model,
    check_geometric_ergodicity,
    check_operator_identities,
    check_reversibility,
    check_spectral_bounds,
    check_stationarity_nu,
    operator_norm_meanzero,
    random_finite_model,
    reversibility_asymmetry,
    spectrum_meanzero,
    two_state_uniform_model,
    verify_model,
)
from .problems import (
    BvpPosterior,
    ConjugateGaussian,
    ProbitPosterior,
    QuadratureOracle,
    bvp_forward,
    gh_posterior_mean,
    load_pima,
    log_normal_cdf,
    normal_mills_ratio,
    standard_gaussian_target,
    synthetic_pima_table,
)
from .experiments import (
    CellResult,
    ExperimentConfig,
    ExperimentResult,
    aggregate_replicates,
    run_experiment,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
