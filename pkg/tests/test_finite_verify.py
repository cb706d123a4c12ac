"""Exact operator-level checks on finite state spaces.

The two-state uniform model is fully hand-computable: every proposal is
accepted, K equals the proposal matrix, nu is uniform on the four pairs,
and the pair-kernel flow nu(x,y) K_aug[(x,y),(y,z)] = 1/8 has no reverse
counterpart when z != x, giving asymmetry exactly 1/8.  The restricted
pair kernel on the 3-dimensional mean-zero space is nilpotent.

An antithetic proposal (off-diagonal mass 0.9) is the negative control
for the spectral claims: K and K_aug both acquire the eigenvalue -0.8,
so the non-negative-spectrum property genuinely needs the lazy/positive
regime that random_finite_model constructs.
"""
import dataclasses

import numpy as np
import pytest

from mhis import (
    ConfigError,
    RngStream,
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

from conftest import make_rng


class TestTwoStateModel:
    def test_all_proposals_accepted(self):
        m = two_state_uniform_model()
        np.testing.assert_array_equal(m.alpha, np.ones((2, 2)))
        np.testing.assert_array_equal(m.K, np.full((2, 2), 0.5))
        np.testing.assert_allclose(m.nu, np.full(4, 0.25))

    def test_pair_kernel_asymmetry_is_exactly_one_eighth(self):
        m = two_state_uniform_model()
        assert reversibility_asymmetry(m.K_aug, m.nu) == pytest.approx(0.125, abs=1e-15)
        # while the marginal kernel is exactly reversible
        assert reversibility_asymmetry(m.K, m.mu) == 0.0

    def test_restricted_pair_kernel_is_nilpotent(self):
        m = two_state_uniform_model()
        rep = check_spectral_bounds(m)
        assert rep.passed
        assert rep.nilpotent_order is not None
        assert rep.nilpotent_order <= 3
        assert rep.spectral_radius == 0.0
        # marginal kernel maps everything to the uniform mean: norm zero
        assert rep.k_norm0 == pytest.approx(0.0, abs=1e-14)

    def test_all_checks_pass(self):
        m = two_state_uniform_model()
        reports = verify_model(m, make_rng(1))
        assert [r.passed for r in reports] == [True] * 5


class TestAntitheticCounterexample:
    def test_negative_eigenvalue_propagates_to_pair_kernel(self):
        m = build_finite_model(
            np.array([1.0, 1.0]), np.array([[0.1, 0.9], [0.9, 0.1]])
        )
        np.testing.assert_allclose(m.K, [[0.1, 0.9], [0.9, 0.1]])
        spec_k = spectrum_meanzero(m.K, m.mu)
        assert spec_k.real.min() == pytest.approx(-0.8, abs=1e-12)
        spec_aug = spectrum_meanzero(m.K_aug, m.nu)
        assert spec_aug.real.min() == pytest.approx(-0.8, abs=1e-10)
        rep = check_spectral_bounds(m)
        assert not rep.passed
        assert rep.min_real == pytest.approx(-0.8, abs=1e-10)
        # the algebraic identities do not care about laziness
        assert check_operator_identities(m).passed
        assert check_stationarity_nu(m).passed


class TestRandomModels:
    def test_twenty_random_lazy_models_pass_everything(self):
        rng = make_rng(7)
        for i in range(20):
            g = int(rng.integers(2, 9))
            m = random_finite_model(g, rng)
            for report in verify_model(m, rng):
                assert report.passed, f"model {i} (g={g}): {report}"

    def test_spectral_details_on_one_model(self):
        m = random_finite_model(6, make_rng(8))
        rep = check_spectral_bounds(m)
        assert rep.passed
        spec = rep.k_aug_spectrum
        assert float(np.max(np.abs(spec.imag))) <= 1e-8
        assert float(np.min(spec.real)) >= -1e-8
        assert rep.spectral_radius <= rep.k_norm0 + 1e-8
        # laziness floor shows up as diagonal dominance of K
        assert np.all(np.diag(m.K) >= 0.6 - 1e-12)

    def test_laziness_validation(self):
        with pytest.raises(ConfigError):
            random_finite_model(3, make_rng(9), laziness=1.2)
        with pytest.raises(ConfigError):
            random_finite_model(3, make_rng(9), laziness=0.0)


class TestMutantControls:
    """A verification suite that cannot detect corruption is itself broken."""

    def test_corrupt_K_detected(self):
        base = random_finite_model(4, make_rng(10))
        k_bad = base.K.copy()
        k_bad[0, 0] += 1e-3
        mutant = dataclasses.replace(base, K=k_bad)
        assert not check_operator_identities(mutant).passed

    def test_corrupt_K_aug_detected_by_stationarity(self):
        base = random_finite_model(4, make_rng(11))
        aug_bad = base.K_aug.copy()
        aug_bad[0, 0] += 1e-3
        mutant = dataclasses.replace(base, K_aug=aug_bad)
        assert not check_stationarity_nu(mutant).passed

    def test_corrupt_H_detected(self):
        base = random_finite_model(3, make_rng(12))
        h_bad = base.H.copy()
        h_bad[0, 1] += 1e-3
        mutant = dataclasses.replace(base, H=h_bad)
        assert not check_operator_identities(mutant).passed

    def test_corrupt_mu_detected_by_reversibility(self):
        base = random_finite_model(4, make_rng(13))
        mu_bad = base.mu.copy()
        mu_bad[0] += 1e-3
        mu_bad /= mu_bad.sum()
        mutant = dataclasses.replace(base, mu=mu_bad)
        assert not check_reversibility(mutant).passed


class TestGeometricErgodicity:
    def test_holds_on_random_model(self):
        m = random_finite_model(5, make_rng(14))
        rep = check_geometric_ergodicity(m, make_rng(15))
        assert rep.passed
        assert rep.residuals["rate"] < 1.0

    def test_independence_proposal_rate_zero(self):
        # proposal rows equal to mu: every proposal accepted, K maps any
        # function to its mean, so the restricted norm r is exactly 0 and
        # the bound must handle r**(n-1) at n=1 (0^0 = 1)
        mu = np.array([0.3, 0.5, 0.2])
        m = build_finite_model(2.0 * mu, np.tile(mu, (3, 1)))
        np.testing.assert_allclose(m.alpha, np.ones((3, 3)), atol=1e-15)
        r = operator_norm_meanzero(m.K, m.mu)
        assert r == pytest.approx(0.0, abs=1e-14)
        rep = check_geometric_ergodicity(m, make_rng(16))
        assert rep.passed

    def test_violated_bound_detected(self):
        # slowing the pair chain while keeping the claimed rate of K makes
        # the bound fail: freeze K_aug at the identity
        base = random_finite_model(3, make_rng(17))
        mutant = dataclasses.replace(base, K_aug=np.eye(9))
        rep = check_geometric_ergodicity(mutant, make_rng(18))
        assert not rep.passed


class TestModelWithDeadStates:
    def test_zero_mass_state_is_handled(self):
        # rho vanishes at state 1; proposals there are always rejected and
        # the mean-zero restrictions drop the dead coordinates exactly
        rho = np.array([1.0, 0.0, 1.0])
        P = np.full((3, 3), 1.0 / 3.0)
        m = build_finite_model(rho, P)
        assert m.alpha[0, 1] == 0.0
        assert m.mu[1] == 0.0
        for report in verify_model(m, make_rng(19)):
            assert report.passed, str(report)

    def test_single_support_state(self):
        rho = np.array([1.0, 0.0])
        P = np.full((2, 2), 0.5)
        m = build_finite_model(rho, P)
        assert operator_norm_meanzero(m.K, m.mu) == 0.0


class TestBuildValidation:
    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            build_finite_model(np.ones(3), np.full((2, 2), 0.5))

    def test_negative_mass(self):
        with pytest.raises(ConfigError, match="negative"):
            build_finite_model(np.array([1.0, -0.1]), np.full((2, 2), 0.5))

    def test_no_mass(self):
        with pytest.raises(ConfigError, match="mass"):
            build_finite_model(np.zeros(2), np.full((2, 2), 0.5))

    def test_negative_proposal_entry(self):
        P = np.array([[1.1, -0.1], [0.5, 0.5]])
        with pytest.raises(ConfigError, match=r"P\[0,1\]"):
            build_finite_model(np.ones(2), P)

    def test_non_stochastic_row(self):
        P = np.array([[0.5, 0.4], [0.5, 0.5]])
        with pytest.raises(ConfigError, match="row 0"):
            build_finite_model(np.ones(2), P)

    def test_positivity_violation(self):
        P = np.array([[1.0, 0.0], [0.5, 0.5]])
        with pytest.raises(ConfigError, match="positivity"):
            build_finite_model(np.ones(2), P)

    def test_asymmetry_shape_guard(self):
        with pytest.raises(ConfigError):
            reversibility_asymmetry(np.eye(3), np.ones(2) / 2)

    def test_spectral_size_guard(self):
        m = random_finite_model(3, make_rng(20))
        big = dataclasses.replace(m, rho=np.ones(51))  # g is derived from rho
        with pytest.raises(ConfigError):
            check_spectral_bounds(big)

    def test_pair_index(self):
        m = two_state_uniform_model()
        assert m.g == 2
        assert m.pair_index(1, 0) == 2
        assert m.pair_index(0, 1) == 1
