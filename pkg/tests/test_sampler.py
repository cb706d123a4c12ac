"""Chain driver: acceptance ratio branches, trajectory law, reproducibility."""
import numpy as np
import pytest
from scipy.stats import kstest, norm

from mhis import (
    ChainHistory,
    ChainRunError,
    ConfigError,
    GaussianRandomWalk,
    MalaProposal,
    RngStream,
    TargetDensity,
    acceptance_rate,
    log_acceptance_ratio,
    log_ratio_parts,
    mh_step,
    run_chain,
    run_ensemble,
    write_chain_csv,
)
from mhis.problems import standard_gaussian_target
from conftest import make_rng, quadratic_target


class TestLogRatio:
    def test_plain_ratio(self):
        out = log_ratio_parts(-1.0, -2.0, -0.5, -2.5)
        np.testing.assert_allclose(out, (-0.5 - 2.5) - (-1.0 - 2.0))

    def test_zero_denominator_branch_is_one(self):
        # rho(x) p(x,y) = 0  ->  r = 1 so the chain can leave a null state
        assert log_ratio_parts(-np.inf, -2.0, -0.5, -2.5) == 0.0
        assert log_ratio_parts(-1.0, -np.inf, -0.5, -2.5) == 0.0
        # both numerator and denominator vanish: still the r = 1 branch
        assert log_ratio_parts(-np.inf, -2.0, -np.inf, -2.5) == 0.0

    def test_zero_numerator_only(self):
        assert log_ratio_parts(-1.0, -2.0, -np.inf, -2.5) == -np.inf

    def test_batch_never_nan(self):
        den_inf = np.array([-np.inf, -1.0, -np.inf])
        out = log_ratio_parts(den_inf, -1.0, np.array([-np.inf, 0.0, 1.0]), 0.0)
        assert not np.any(np.isnan(out))

    def test_symmetric_proposal_reduces_to_density_ratio(self, rng):
        t = quadratic_target(2)
        p = GaussianRandomWalk(2, 0.8)
        x, y = rng.standard_normal(2), rng.standard_normal(2)
        np.testing.assert_allclose(
            log_acceptance_ratio(t, p, x, y), t.log_rho(y) - t.log_rho(x), rtol=1e-12
        )

    def test_mala_ratio_uses_both_directions(self, rng):
        t = quadratic_target(2)
        p = MalaProposal(t, 0.5)
        x, y = rng.standard_normal(2), rng.standard_normal(2)
        expect = (t.log_rho(y) + p.log_density(y, x)) - (
            t.log_rho(x) + p.log_density(x, y)
        )
        np.testing.assert_allclose(log_acceptance_ratio(t, p, x, y), expect, rtol=1e-12)


class TestChainLaw:
    def test_trajectory_consistency(self):
        t = standard_gaussian_target(2)
        p = GaussianRandomWalk(2, 1.0)
        h = run_chain(t, p, np.zeros(2), 300, make_rng(5))
        for k in range(299):
            expect = h.y[k] if h.accepted[k] else h.x[k]
            np.testing.assert_array_equal(h.x[k + 1], expect)

    def test_log_weight_identity(self):
        t = quadratic_target(2)
        p = MalaProposal(t, 0.6)
        h = run_chain(t, p, np.zeros(2), 200, make_rng(8))
        recompute = t.log_rho(h.y) - p.log_density(h.x, h.y)
        np.testing.assert_allclose(h.log_weight, recompute, rtol=1e-12)

    def test_log_alpha_identity(self):
        t = quadratic_target(2)
        p = GaussianRandomWalk(2, 0.9)
        h = run_chain(t, p, np.zeros(2), 200, make_rng(9))
        log_r = log_acceptance_ratio(t, p, h.x, h.y)
        np.testing.assert_allclose(h.log_alpha, np.minimum(0.0, log_r), rtol=1e-12)

    def test_always_accept_when_ratio_one(self):
        # independence proposal whose density equals the (normalised) target:
        # r = 1 identically, so every proposal must be accepted
        t = standard_gaussian_target(1)

        class IndependenceStdNormal(GaussianRandomWalk):
            def sample(self, x, rng):
                return rng.standard_normal(x.shape)

            def log_density(self, x, y):
                y = np.asarray(y, dtype=float)
                return -0.5 * np.sum(y * y, axis=-1) - 0.5 * np.log(2 * np.pi)

        p = IndependenceStdNormal(1, 1.0)
        p.symmetric = False
        h = run_chain(t, p, np.zeros(1), 500, make_rng(11))
        assert np.all(h.accepted)
        np.testing.assert_allclose(h.log_alpha, 0.0, atol=1e-12)

    def test_burn_in_discarded_and_lengths(self):
        t = standard_gaussian_target(1)
        p = GaussianRandomWalk(1, 2.0)
        h = run_chain(t, p, np.zeros(1), 50, make_rng(1), burn_in=20)
        assert len(h) == h.n_steps == 50
        assert h.dim == 1
        # same seed, no burn-in: the first recorded step must differ,
        # because the burn-in consumed RNG draws first
        h0 = run_chain(t, p, np.zeros(1), 50, make_rng(1), burn_in=0)
        assert not np.allclose(h.x[0], h0.x[0]) or not np.allclose(h.y[0], h0.y[0])

    def test_stationary_marginal_ks(self):
        # chain started at stationarity stays there: KS test on X_n across
        # an ensemble against the exact normal CDF
        t = standard_gaussian_target(1)
        p = GaussianRandomWalk(1, 2.0)
        rng = make_rng(21)
        x0 = rng.standard_normal((400, 1))
        hist = run_ensemble(t, p, x0, 60, rng)
        final = hist.x[-1, :, 0]
        assert kstest(final, norm.cdf).pvalue > 0.01

    def test_chain_run_error_on_nan_target(self):
        def bad_log_rho(x):
            x = np.asarray(x)
            out = -0.5 * np.sum(x * x, axis=-1)
            return np.where(np.sum(x, axis=-1) > 1.5, np.nan, out)

        t = TargetDensity(1, bad_log_rho)
        p = GaussianRandomWalk(1, 3.0)
        with pytest.raises(ChainRunError):
            run_chain(t, p, np.zeros(1), 500, make_rng(3))

    def test_chain_run_error_on_posinf_target(self):
        def bad_log_rho(x):
            x = np.asarray(x)
            out = -0.5 * np.sum(x * x, axis=-1)
            return np.where(np.sum(x, axis=-1) > 1.5, np.inf, out)

        t = TargetDensity(1, bad_log_rho)
        p = GaussianRandomWalk(1, 3.0)
        with pytest.raises(ChainRunError):
            run_chain(t, p, np.zeros(1), 500, make_rng(3))

    def test_neginf_target_region_is_allowed(self):
        # a hard support boundary is legitimate: proposals into it are
        # rejected via log weight -inf, never an error
        def truncated(x):
            x = np.asarray(x)
            out = -0.5 * np.sum(x * x, axis=-1)
            return np.where(x[..., 0] > 1.0, -np.inf, out)

        t = TargetDensity(1, truncated)
        p = GaussianRandomWalk(1, 1.0)
        h = run_chain(t, p, np.zeros(1), 400, make_rng(4))
        out_of_support = h.log_rho_y == -np.inf
        assert out_of_support.any()
        assert np.all(h.log_weight[out_of_support] == -np.inf)
        assert np.all(~h.accepted[out_of_support])
        assert np.all(h.x[:, 0] <= 1.0)


class TestEnsemble:
    def test_single_chain_is_ensemble_of_one(self):
        t = quadratic_target(2)
        p = GaussianRandomWalk(2, 0.8)
        h1 = run_chain(t, p, np.ones(2), 40, RngStream(6))
        h2 = run_ensemble(t, p, np.ones((1, 2)), 40, RngStream(6)).chain(0)
        np.testing.assert_array_equal(h1.x, h2.x)
        np.testing.assert_array_equal(h1.y, h2.y)
        np.testing.assert_array_equal(h1.accepted, h2.accepted)

    def test_lockstep_row_replay(self):
        """Ensemble row i must equal a single chain fed that row's draws.

        The ensemble consumes an (M, d) normal block then an (M,) uniform
        block per step; replaying row i of each block through the
        single-chain path must reproduce chain i exactly.
        """
        t = quadratic_target(2)
        p = GaussianRandomWalk(2, 0.7)
        M, n = 5, 30
        rng = make_rng(13)
        x0 = rng.standard_normal((M, 2))

        normals, uniforms = [], []

        class TapRng(np.random.Generator):
            def standard_normal(self, shape):
                z = super().standard_normal(shape)
                normals.append(z)
                return z

            def random(self, size):
                u = super().random(size)
                uniforms.append(u)
                return u

        hist = run_ensemble(t, p, x0, n, TapRng(np.random.PCG64(14)))

        class ReplayRow(np.random.Generator):
            def __init__(self, i):
                super().__init__(np.random.PCG64(0))
                self.i = i
                self.kn = 0
                self.ku = 0

            def standard_normal(self, shape):
                z = normals[self.kn][self.i]
                self.kn += 1
                return z.reshape(shape)

            def random(self, size):
                u = uniforms[self.ku][self.i]
                self.ku += 1
                return np.array([u]).reshape(size)

        for i in range(M):
            hi = run_ensemble(t, p, x0[i : i + 1], n, ReplayRow(i)).chain(0)
            np.testing.assert_array_equal(hi.x, hist.x[:, i])
            np.testing.assert_array_equal(hi.y, hist.y[:, i])
            np.testing.assert_array_equal(hi.accepted, hist.accepted[:, i])
            np.testing.assert_array_equal(hi.log_weight, hist.log_weight[:, i])

    def test_observer_matches_record(self):
        t = standard_gaussian_target(1)
        p = GaussianRandomWalk(1, 1.5)
        seen = []
        hist = run_ensemble(
            t,
            p,
            np.zeros((3, 1)),
            25,
            RngStream(2),
            burn_in=5,
            observer=lambda k, b: seen.append((k, b.x.copy(), b.log_weight.copy())),
        )
        assert [k for k, *_ in seen] == list(range(25))
        for k, x, lw in seen:
            np.testing.assert_array_equal(x, hist.x[k])
            np.testing.assert_array_equal(lw, hist.log_weight[k])

    def test_record_false_returns_none(self):
        t = standard_gaussian_target(1)
        p = GaussianRandomWalk(1, 1.5)
        count = [0]
        out = run_ensemble(
            t,
            p,
            np.zeros((2, 1)),
            10,
            RngStream(2),
            record=False,
            observer=lambda k, b: count.__setitem__(0, count[0] + 1),
        )
        assert out is None and count[0] == 10

    def test_shape_validation(self):
        t = standard_gaussian_target(2)
        p = GaussianRandomWalk(2, 1.0)
        with pytest.raises(ConfigError):
            run_ensemble(t, p, np.zeros((4, 3)), 10, RngStream(0))
        with pytest.raises(ConfigError):
            run_ensemble(t, GaussianRandomWalk(3, 1.0), np.zeros((4, 2)), 10, RngStream(0))
        with pytest.raises(ConfigError):
            run_ensemble(t, p, np.zeros((4, 2)), 0, RngStream(0))
        with pytest.raises(ConfigError):
            run_ensemble(t, p, np.zeros((4, 2)), 10, RngStream(0), burn_in=-1)


class TestMisc:
    def test_mh_step_record(self):
        t = quadratic_target(2)
        p = GaussianRandomWalk(2, 0.8)
        rec = mh_step(t, p, np.zeros(2), RngStream(3))
        np.testing.assert_array_equal(rec.x, np.zeros(2))
        assert isinstance(rec.accepted, bool)
        assert rec.log_alpha <= 0.0

    def test_acceptance_rate(self):
        h = ChainHistory(
            x=np.zeros((4, 1)),
            y=np.zeros((4, 1)),
            log_alpha=np.zeros(4),
            accepted=np.array([True, False, True, True]),
            log_weight=np.zeros(4),
            log_rho_y=np.zeros(4),
        )
        assert acceptance_rate(h) == 0.75
        with pytest.raises(ConfigError):
            acceptance_rate(
                ChainHistory(*[np.zeros((0, 1))] * 2, *[np.zeros(0)] * 4)
            )

    def test_write_chain_csv_roundtrip(self, tmp_path):
        t = quadratic_target(2)
        p = GaussianRandomWalk(2, 0.8)
        h = run_chain(t, p, np.zeros(2), 20, RngStream(10))
        path = tmp_path / "chain.csv"
        write_chain_csv(h, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "step,x0,x1,y0,y1,log_alpha,accepted,log_weight"
        assert len(lines) == 21
        for k, line in enumerate(lines[1:]):
            parts = line.split(",")
            assert int(parts[0]) == k
            np.testing.assert_array_equal(
                np.array([float(parts[1]), float(parts[2])]), h.x[k]
            )
            assert float(parts[5]) == h.log_alpha[k]  # repr round-trips exactly
            assert int(parts[6]) == int(h.accepted[k])
            assert float(parts[7]) == h.log_weight[k]
