"""Stepsize calibration and its quadrature oracles.

For the 1-D standard Gaussian target with RW(s) proposals, the pair
integrals have closed forms.  Writing u = s^2 and taking f the identity:

    V(s)   = u (u - 1) / (2u - 3)^{3/2}          (finite iff u > 3/2)
    J_f(s) = u (5u - 3) / ((2u - 3)(u - 1))

Both follow from 2-D Gaussian moment identities for the quadratic form in
(y, x) appearing in rho(y)^2 rho(x) / p_s(x, y).  Setting J_f(s) = s^2
gives u^2 - 5u + 3 = 0, the same equation as V'(u) = 0, so the fixed
point IS the variance optimum:

    s_star = sqrt((5 + sqrt(13)) / 2) = 2.0743132931133202...

These exact values anchor every oracle test below.
"""
import math

import numpy as np
import pytest

from mhis import (
    CalibrationConfig,
    ConfigError,
    NumericalError,
    RngStream,
    calibrate_acceptance_rate,
    calibrate_stepsize,
    empirical_J,
    empirical_J_f,
    gaussian_rw_proposal,
    identity_functional,
    mala_proposal,
    quadrature_J_f,
    quadrature_V,
    quadrature_expectation,
    quadrature_sigma2_A,
    run_chain,
    standard_gaussian_target,
    write_calibration_csv,
)
from mhis.estimators import Functional

S_STAR = math.sqrt((5.0 + math.sqrt(13.0)) / 2.0)


def v_exact(s: float) -> float:
    u = s * s
    return u * (u - 1.0) / (2.0 * u - 3.0) ** 1.5


def jf_exact(s: float) -> float:
    u = s * s
    return u * (5.0 * u - 3.0) / ((2.0 * u - 3.0) * (u - 1.0))


@pytest.fixture(scope="module")
def target1d():
    return standard_gaussian_target(1)


@pytest.fixture(scope="module")
def f1d():
    return identity_functional(1)


# ---------------------------------------------------------------------------
# quadrature oracles against the closed forms


class TestQuadratureOracles:
    def test_v_matches_closed_form(self, target1d, f1d):
        grid = [1.5, 2.0, S_STAR, 3.0, 5.0]
        out = quadrature_V(target1d, lambda s: gaussian_rw_proposal(1, s), f1d, grid)
        assert [s for s, _ in out] == [float(s) for s in grid]
        for s, v in out:
            assert v == pytest.approx(v_exact(s), rel=1e-10)

    def test_v_argmin_at_fixed_point(self):
        # V'(u) = 0 <=> u^2 - 5u + 3 = 0: the variance optimum equals the
        # calibration fixed point
        us = np.linspace(1.6, 12.0, 20001)
        vs = us * (us - 1) / (2 * us - 3) ** 1.5
        assert us[np.argmin(vs)] == pytest.approx(S_STAR**2, rel=1e-3)

    def test_v_infinite_below_boundary(self, target1d, f1d):
        # u <= 3/2 makes the pair integral diverge; the support-growth
        # refinement must refuse rather than return a truncation value
        for s in (0.3, 1.0, 1.2):
            with pytest.raises(NumericalError):
                quadrature_V(
                    target1d, lambda s_: gaussian_rw_proposal(1, s_), f1d, [s],
                    nodes=100,
                )

    def test_v_near_boundary_needs_wide_support(self, target1d, f1d):
        # just above the boundary the integrand decays slowly: the default
        # box is rejected (truncation visible), a wide box nails the value
        s = math.sqrt(1.6)
        with pytest.raises(NumericalError):
            quadrature_V(target1d, lambda s_: gaussian_rw_proposal(1, s_), f1d, [s])
        v = quadrature_V(
            target1d, lambda s_: gaussian_rw_proposal(1, s_), f1d, [s],
            support=(-30, 30), nodes=300,
        )[0][1]
        assert v == pytest.approx(v_exact(s), rel=1e-10)

    def test_sigma2_A_matches_v_for_normalized_target(self, target1d, f1d):
        # for a normalised 1-D target and identity f the variance integral
        # coincides with V; at s=2 it is 12/5^{3/2}
        got = quadrature_sigma2_A(target1d, gaussian_rw_proposal(1, 2.0), f1d)
        assert got.shape == (1,)
        assert got[0] == pytest.approx(12.0 / 5.0**1.5, rel=1e-10)
        assert got[0] == pytest.approx(1.0733126292, rel=1e-9)

    def test_j_f_matches_closed_form(self, target1d, f1d):
        for s in (2.0, 2.5, 4.0):
            got = quadrature_J_f(target1d, gaussian_rw_proposal(1, s), f1d)
            assert got == pytest.approx(jf_exact(s), rel=1e-9)
        assert quadrature_J_f(
            target1d, gaussian_rw_proposal(1, 2.0), f1d
        ) == pytest.approx(68.0 / 15.0, rel=1e-9)

    def test_j_f_fixed_point(self, target1d, f1d):
        got = quadrature_J_f(target1d, gaussian_rw_proposal(1, S_STAR), f1d)
        assert got == pytest.approx(S_STAR**2, rel=1e-9)

    def test_j_f_mala_not_supported(self, target1d, f1d):
        prop = mala_proposal(target1d, 0.5)
        with pytest.raises(ConfigError):
            quadrature_J_f(target1d, prop, f1d)

    def test_expectation(self, target1d):
        got = quadrature_expectation(target1d, identity_functional(1))
        assert abs(got[0]) < 1e-12
        sq = Functional("sq", lambda x: np.asarray(x) ** 2)
        got2 = quadrature_expectation(target1d, sq)
        assert got2[0] == pytest.approx(1.0, rel=1e-12)

    def test_dim_guard(self, f1d):
        t3 = standard_gaussian_target(3)
        with pytest.raises(ConfigError):
            quadrature_V(t3, lambda s: gaussian_rw_proposal(3, s), f1d, [2.0])
        with pytest.raises(ConfigError):
            quadrature_sigma2_A(t3, gaussian_rw_proposal(3, 2.0), f1d)
        with pytest.raises(ConfigError):
            quadrature_J_f(t3, gaussian_rw_proposal(3, 2.0), f1d)
        with pytest.raises(ConfigError):
            quadrature_expectation(t3, f1d)


# ---------------------------------------------------------------------------
# empirical functionals


class TestEmpiricalJ:
    def test_empirical_matches_quadrature(self, target1d, f1d):
        prop = gaussian_rw_proposal(1, 2.0)
        hist = run_chain(
            target1d, prop, np.zeros(1), 40000, RngStream(31), burn_in=1000
        )
        emp = empirical_J_f(hist, f1d, prop)
        assert emp == pytest.approx(jf_exact(2.0), rel=0.05)

    def test_empirical_J_weights_only(self, target1d, f1d):
        # J drops the residual factor; for this target both are O(s^2) and
        # positive, and J must differ from J_f (the residual reweights)
        prop = gaussian_rw_proposal(1, 2.0)
        hist = run_chain(
            target1d, prop, np.zeros(1), 20000, RngStream(32), burn_in=500
        )
        j = empirical_J(hist, prop)
        jf = empirical_J_f(hist, f1d, prop)
        assert j > 0.0 and jf > 0.0
        assert j != pytest.approx(jf, rel=1e-6)

    def test_mala_branch_runs(self, target1d, f1d):
        # small s keeps the MALA denominator terms d - disp.grad away from
        # zero; mid-range s makes this ratio estimator genuinely unstable
        prop = mala_proposal(target1d, 0.2)
        hist = run_chain(
            target1d, prop, np.zeros(1), 5000, RngStream(33), burn_in=200
        )
        val = empirical_J_f(hist, f1d, prop)
        assert np.isfinite(val) and val > 0.0

    def test_constant_functional_degenerate(self, target1d):
        prop = gaussian_rw_proposal(1, 2.0)
        hist = run_chain(target1d, prop, np.zeros(1), 500, RngStream(34))
        const = Functional("const", lambda x: np.ones(np.asarray(x).shape))
        with pytest.raises(NumericalError):
            empirical_J_f(hist, const, prop)


# ---------------------------------------------------------------------------
# the calibration loop


class TestCalibrateStepsize:
    def make_config(self, **kw):
        base = dict(
            s_lo=0.5,
            s_hi=6.0,
            grid_points=6,
            pilot_steps=6000,
            pilot_burn_in=500,
            tol=0.05,
        )
        base.update(kw)
        return CalibrationConfig(**base)

    def test_lands_near_fixed_point(self, target1d, f1d):
        state = calibrate_stepsize(
            target1d,
            lambda s: gaussian_rw_proposal(1, s),
            f1d,
            self.make_config(),
            RngStream(41),
        )
        assert state.converged
        assert 0.5 <= state.s_current <= 6.0
        assert abs(state.s_current - S_STAR) / S_STAR < 0.15
        # the reported functional value is the fixed-point relation
        assert state.s_current**2 == pytest.approx(state.J_f_value, rel=0.05)
        assert state.brackets, "at least one sign-change bracket recorded"

    def test_crn_determinism(self, target1d, f1d):
        runs = [
            calibrate_stepsize(
                target1d,
                lambda s: gaussian_rw_proposal(1, s),
                f1d,
                self.make_config(),
                RngStream(42),
            )
            for _ in range(2)
        ]
        assert runs[0].s_current == runs[1].s_current
        assert len(runs[0].history) == len(runs[1].history)
        for a, b in zip(runs[0].history, runs[1].history):
            assert (a.s, a.J_f, a.J, a.g) == (b.s, b.J_f, b.J, b.g)

    def test_history_is_ordered_and_complete(self, target1d, f1d):
        state = calibrate_stepsize(
            target1d,
            lambda s: gaussian_rw_proposal(1, s),
            f1d,
            self.make_config(),
            RngStream(43),
        )
        assert [it.iteration for it in state.history] == list(
            range(len(state.history))
        )
        assert len(state.history) >= 6  # at least the scan grid
        for it in state.history:
            assert it.g == pytest.approx(it.s**2 - it.J_f)
            assert 0.0 <= it.acceptance_rate <= 1.0

    def test_no_sign_change_raises(self, target1d, f1d):
        # far below the fixed point g = s^2 - J_f stays one-signed
        with pytest.raises(ConfigError):
            calibrate_stepsize(
                target1d,
                lambda s: gaussian_rw_proposal(1, s),
                f1d,
                self.make_config(s_lo=0.02, s_hi=0.1, grid_points=3,
                                 pilot_steps=2000, pilot_burn_in=100),
                RngStream(44),
            )

    def test_rng_contract(self, target1d, f1d):
        with pytest.raises(ConfigError):
            calibrate_stepsize(
                target1d,
                lambda s: gaussian_rw_proposal(1, s),
                f1d,
                self.make_config(),
                np.random.default_rng(1),
            )

    def test_int_seed_accepted(self, target1d, f1d):
        state = calibrate_stepsize(
            target1d,
            lambda s: gaussian_rw_proposal(1, s),
            f1d,
            self.make_config(grid_points=4, pilot_steps=2000, pilot_burn_in=100,
                             tol=0.2),
            45,
        )
        assert state.s_current > 0

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            CalibrationConfig(s_lo=2.0, s_hi=1.0)
        with pytest.raises(ConfigError):
            CalibrationConfig(s_lo=-1.0, s_hi=1.0)
        with pytest.raises(ConfigError):
            CalibrationConfig(s_lo=0.5, s_hi=6.0, grid_points=1)
        with pytest.raises(ConfigError):
            CalibrationConfig(s_lo=0.5, s_hi=6.0, tol=1.5)

    def test_csv_audit_log(self, target1d, f1d, tmp_path):
        state = calibrate_stepsize(
            target1d,
            lambda s: gaussian_rw_proposal(1, s),
            f1d,
            self.make_config(grid_points=4, pilot_steps=2000, pilot_burn_in=100,
                             tol=0.2),
            RngStream(46),
        )
        path = tmp_path / "cal.csv"
        write_calibration_csv(state, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "iter,s,J_f,J,acceptance_rate,g"
        assert len(lines) == 1 + len(state.history)
        first = lines[1].split(",")
        assert int(first[0]) == 0
        # repr round-trip: exact float recovery
        assert float(first[1]) == state.history[0].s
        assert float(first[5]) == state.history[0].g


class TestCalibrateAcceptanceRate:
    def test_hits_target_rate(self, target1d):
        config = CalibrationConfig(
            s_lo=0.5, s_hi=8.0, pilot_steps=4000, pilot_burn_in=200
        )
        s = calibrate_acceptance_rate(
            target1d,
            lambda s_: gaussian_rw_proposal(1, s_),
            0.44,
            config,
            RngStream(51),
            atol=0.02,
        )
        assert 0.5 <= s <= 8.0
        hist = run_chain(
            target1d, gaussian_rw_proposal(1, s), np.zeros(1), 20000, RngStream(52),
            burn_in=500,
        )
        got = float(np.mean(hist.accepted))
        assert abs(got - 0.44) < 0.05

    def test_unbracketed_rate_raises(self, target1d):
        config = CalibrationConfig(
            s_lo=2.0, s_hi=8.0, pilot_steps=2000, pilot_burn_in=100
        )
        with pytest.raises(ConfigError):
            calibrate_acceptance_rate(
                target1d,
                lambda s_: gaussian_rw_proposal(1, s_),
                0.99,
                config,
                RngStream(53),
            )
