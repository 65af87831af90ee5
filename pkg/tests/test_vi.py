import warnings

import numpy as np
import pytest

from oracles import bcp_sweep, loop_expected_residual, mc_elbo, mc_masked_residual, mc_quadratic, random_state
from rrfbtc.datagen import gen_random_cp
from rrfbtc.grid import from_dense
from rrfbtc.kernels import KernelSpec
from rrfbtc.metrics import rrse
from rrfbtc.vi import (
    HyperPriors,
    ModelConfig,
    NumericalError,
    _check_finite,
    compute_elbo,
    expected_masked_residual,
    expected_quadratic,
    fit,
    init_state,
    masked_residual,
    prune_ranks,
    sweep,
    update_factor,
    update_gamma,
    update_tau,
)

IDENTITY = KernelSpec("identity")


def rank1(dims, seed=0):
    rng = np.random.default_rng(seed)
    f = [rng.standard_normal((d, 1)) for d in dims]
    return f, np.einsum(",".join("xyz"[: len(dims)][i] + "r" for i in range(len(dims))) + "->" + "xyz"[: len(dims)], *f)


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.hyper == HyperPriors(1e-3, 1e-3, 1e-3, 1e-3)
        assert cfg.prune_ratio == 1e-4 and cfg.max_iters == 200 and cfg.conv_tol == 1e-5

    @pytest.mark.parametrize("kw", [
        {"prune_ratio": 0.0}, {"prune_ratio": 1.0}, {"max_iters": 0}, {"conv_tol": 0.0},
        {"init": "zeros"}, {"rank_init": 0},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_hyperpriors_positive(self):
        with pytest.raises(ValueError):
            HyperPriors(a_gamma=0.0)

    def test_single_kernel_is_shared(self):
        cfg = ModelConfig(kernels=KernelSpec("rbf", 2.0))
        assert cfg.kernel_for(2).family == "rbf"


class TestInit:
    def test_auto_rank(self):
        y = np.random.default_rng(0).standard_normal((30, 30, 30))
        state = init_state(from_dense(y), ModelConfig(kernels=IDENTITY))
        assert state.rank == 30

    def test_random_init_reproducible(self):
        y = np.random.default_rng(0).standard_normal((4, 5, 6))
        cfg = ModelConfig(kernels=IDENTITY, init="random", seed=11, rank_init=3)
        a, b = init_state(from_dense(y), cfg), init_state(from_dense(y), cfg)
        for ma, mb in zip(a.means, b.means):
            assert np.array_equal(ma, mb)

    def test_prior_moments(self):
        y = np.random.default_rng(0).standard_normal((4, 5, 6))
        state = init_state(from_dense(y), ModelConfig(kernels=IDENTITY, rank_init=3))
        np.testing.assert_array_equal(state.gamma_mean, np.ones(3))
        for k, c in enumerate(state.covs):
            np.testing.assert_array_equal(c[1], 1e-2 * np.eye(y.shape[k]))

    def test_svd_padding(self):
        y = np.outer(np.arange(1.0, 4.0), np.arange(1.0, 5.0))
        state = init_state(from_dense(y), ModelConfig(kernels=IDENTITY, rank_init=3))
        assert np.all(state.means[0][:, 1:] == 0)

    def test_constant_observations_tau_fallback(self):
        state = init_state(from_dense(np.full((3, 3), 2.5)), ModelConfig(kernels=IDENTITY))
        assert state.tau_mean == 1.0

    def test_rank_above_dims_warns(self):
        with pytest.warns(UserWarning):
            init_state(from_dense(np.ones((2, 3))), ModelConfig(kernels=IDENTITY, rank_init=5))

    def test_empty_observations(self):
        with pytest.raises(ValueError):
            init_state(from_dense(np.ones((2, 2)), np.zeros((2, 2))), ModelConfig())


class TestFactorUpdate:
    def test_ridge_normal_equations(self):
        rng = np.random.default_rng(1)
        y = rng.standard_normal((3, 3))
        state = init_state(from_dense(y), ModelConfig(kernels=IDENTITY, rank_init=1))
        state.means = [rng.standard_normal((3, 1)) for _ in range(2)]
        psi_v = rng.uniform(0.01, 0.2, 3)
        state.covs[1][0] = np.diag(psi_v)
        state.a_gamma, state.b_gamma = np.array([3.0]), np.array([2.0])
        state.a_tau, state.b_tau = 6.0, 2.0
        tau, gamma = 3.0, 1.5

        v = state.means[1][:, 0]
        gram_v = np.sum(v ** 2 + psi_v)
        A = tau * gram_v * np.eye(3) + gamma * np.eye(3)
        expected = np.linalg.solve(A, tau * y @ v)
        mean, cov = update_factor(state, 0, 0)
        np.testing.assert_allclose(mean, expected, rtol=1e-12)
        np.testing.assert_allclose(cov, np.linalg.inv(A), rtol=1e-12, atol=1e-15)

    def test_unobserved_row_reverts_to_prior(self):
        rng = np.random.default_rng(2)
        O = np.ones((3, 3, 3), np.int8)
        O[1] = 0
        state = init_state(from_dense(rng.standard_normal((3, 3, 3)), O), ModelConfig(kernels=IDENTITY, rank_init=2))
        mean, cov = update_factor(state, 0, 0)
        assert cov[1, 1] == pytest.approx(1.0, abs=1e-14)
        assert mean[1] == 0.0

    def test_covariance_symmetric_nonnegative(self):
        state = random_state(3)
        for k in range(3):
            _, cov = update_factor(state, k, 1)
            assert np.max(np.abs(cov - cov.T)) < 1e-10
            assert np.all(np.diag(cov) >= 0)

    def test_incremental_matches_direct(self):
        a, b = random_state(4), random_state(4)
        residual = masked_residual(a)
        for k in range(3):
            for r in range(a.rank):
                update_factor(a, k, r, residual)
                update_factor(b, k, r)
                assert np.max(np.abs(residual - masked_residual(a))) < 1e-10
        for ma, mb in zip(a.means, b.means):
            np.testing.assert_allclose(ma, mb, rtol=1e-10, atol=1e-12)

    def test_fixed_point_from_exact_init(self):
        f, x = rank1((4, 4, 4), seed=5)
        state = init_state(from_dense(x), ModelConfig(kernels=IDENTITY, rank_init=1))
        state.means = [m.copy() for m in f]
        state.covs = [np.zeros((1, 4, 4)) for _ in range(3)]
        state.a_tau, state.b_tau = 1.0, 1e-12
        sweep(state)
        for m, ref in zip(state.means, f):
            assert np.linalg.norm(m - ref) / np.linalg.norm(ref) < 1e-6


class TestHyperUpdates:
    def test_gamma_shape(self):
        y = np.random.default_rng(0).standard_normal((30, 30, 30))
        state = init_state(from_dense(y), ModelConfig(kernels=IDENTITY, rank_init=2))
        a, _ = update_gamma(state)
        np.testing.assert_allclose(a, 45.001, rtol=0, atol=1e-12)

    def test_gamma_rate_for_zero_factors(self):
        state = init_state(from_dense(np.ones((3, 4))), ModelConfig(kernels=IDENTITY, rank_init=2))
        state.means = [np.zeros_like(m) for m in state.means]
        state.covs = [np.zeros_like(c) for c in state.covs]
        _, b = update_gamma(state)
        np.testing.assert_array_equal(b, [1e-3, 1e-3])

    def test_tau_shape(self):
        rng = np.random.default_rng(0)
        O = np.zeros((10, 20), np.int8)
        O.flat[rng.choice(200, 100, replace=False)] = 1
        cfg = ModelConfig(kernels=IDENTITY, hyper=HyperPriors(a_tau=1e-6), rank_init=2)
        state = init_state(from_dense(rng.standard_normal((10, 20)), O), cfg)
        a, _ = update_tau(state)
        assert a == pytest.approx(50.000001, abs=1e-12)

    def test_tau_rate_for_exact_fit(self):
        f, x = rank1((3, 4), seed=1)
        state = init_state(from_dense(x), ModelConfig(kernels=IDENTITY, rank_init=1))
        state.means = [m.copy() for m in f]
        state.covs = [np.zeros_like(c) for c in state.covs]
        _, b = update_tau(state)
        assert b == pytest.approx(1e-3, abs=1e-15)

    def test_shapes_constant_over_fit(self):
        _, x = rank1((5, 5, 5), seed=2)
        shapes = []
        state = fit(from_dense(x), ModelConfig(kernels=IDENTITY, rank_init=3, max_iters=12),
                    callback=lambda s: shapes.append((s.a_gamma[0], s.a_tau)))
        later = shapes[ModelConfig().warmup_sweeps:]
        assert len(set(later)) == 1
        assert later[0] == (1e-3 + 7.5, 1e-3 + 62.5)


class TestExpectedResidual:
    def test_zero_factors(self):
        rng = np.random.default_rng(0)
        state = random_state(0)
        state.means = [np.zeros_like(m) for m in state.means]
        state.covs = [np.zeros_like(c) for c in state.covs]
        d = state.data
        assert expected_masked_residual(state) == pytest.approx(np.sum((d.Y * d.O) ** 2), rel=1e-14)

    def test_single_cell_hand_expansion(self):
        state = init_state(from_dense(np.array([[1.7]])), ModelConfig(kernels=IDENTITY, rank_init=1))
        m1, m2, p1, p2 = 0.8, -1.3, 0.25, 0.4
        state.means = [np.array([[m1]]), np.array([[m2]])]
        state.covs = [np.array([[[p1]]]), np.array([[[p2]]])]
        expected = (1.7 - m1 * m2) ** 2 + m1 ** 2 * p2 + m2 ** 2 * p1 + p1 * p2
        assert expected_masked_residual(state) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_against_loop_oracle(self, seed):
        state = random_state(seed, dims=(3, 4, 2), rank=3)
        psi = [np.diagonal(c, axis1=1, axis2=2).T for c in state.covs]
        ref = loop_expected_residual(state.data.Y, state.data.O, state.means, psi)
        assert expected_masked_residual(state) == pytest.approx(ref, rel=1e-12)

    def test_monte_carlo(self):
        state = random_state(7)
        mean, se = mc_masked_residual(state, draws=200000)
        value = expected_masked_residual(state)
        assert value >= 0
        assert abs(value - mean) < 3 * se
        assert abs(value - mean) / value < 1e-2


class TestQuadratic:
    def test_identity_is_second_moment(self):
        state = random_state(1, family="identity")
        m, c = state.means[0][:, 0], state.covs[0][0]
        assert expected_quadratic(state.grams[0], m, c) == pytest.approx(m @ m + np.trace(c), rel=1e-12)

    def test_monte_carlo(self):
        state = random_state(2)
        g, m, c = state.grams[1], state.means[1][:, 0], state.covs[1][0]
        mean, se = mc_quadratic(g, m, c, draws=200000)
        assert abs(expected_quadratic(g, m, c) - mean) < 3 * se


class TestPrune:
    def _state(self, powers):
        state = random_state(0, rank=len(powers))
        for k in range(3):
            state.means[k][:] = 1.0
        state.a_gamma = np.full(len(powers), 10.0)
        state.b_gamma = 10.0 * np.asarray(powers, dtype=float)
        return state

    def test_clear_separation(self):
        state = self._state([1.0, 1.0, 1e-9])
        kept_means = [m[:, :2].copy() for m in state.means]
        kept_covs = [c[:2].copy() for c in state.covs]
        prune_ranks(state)
        assert state.rank == 2
        for k in range(3):
            assert np.array_equal(state.means[k], kept_means[k])
            assert np.array_equal(state.covs[k], kept_covs[k])

    def test_equal_powers(self):
        state = self._state([0.5, 0.5, 0.5])
        prune_ranks(state)
        assert state.rank == 3

    def test_never_empties(self):
        state = self._state([1e-30, 1e-20, 1e-25])
        prune_ranks(state)
        assert state.rank == 1
        assert state.b_gamma[0] == pytest.approx(1e-19)

    def test_collapsed_energy(self):
        state = self._state([1.0, 1.0])
        for k in range(3):
            state.means[k][:, 1] = 0.0
        prune_ranks(state)
        assert state.rank == 1


class TestElbo:
    def test_finite(self):
        assert np.isfinite(compute_elbo(random_state(0)))

    def test_rank_permutation_invariance(self):
        state = random_state(1, rank=3)
        before = compute_elbo(state)
        perm = [2, 0, 1]
        state.means = [m[:, perm] for m in state.means]
        state.covs = [c[perm] for c in state.covs]
        state.a_gamma, state.b_gamma = state.a_gamma[perm], state.b_gamma[perm]
        assert compute_elbo(state) == pytest.approx(before, rel=1e-12)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_monte_carlo_oracle(self, seed):
        state = random_state(seed, dims=(2, 3), rank=1, hyper=HyperPriors(1.0, 1.0, 2.0, 1.0))
        mean, se = mc_elbo(state, draws=200000, seed=seed)
        assert abs(compute_elbo(state) - mean) < 4 * se

    def test_monotone_on_small_fit(self):
        y = np.random.default_rng(3).standard_normal((6, 5, 4))
        O = (np.random.default_rng(4).uniform(size=y.shape) < 0.6).astype(np.int8)
        state = fit(from_dense(y, O), ModelConfig(kernels=KernelSpec("matern52", 2.0), rank_init=4, max_iters=40))
        e, r = np.array(state.elbo_trace), np.array(state.rank_trace)
        for t in range(1, len(e)):
            if r[t] == r[t - 1]:
                assert e[t] >= e[t - 1] - 1e-6 * abs(e[t - 1])


class TestFbcpEquivalence:
    @pytest.mark.parametrize("seed", range(3))
    def test_one_sweep(self, seed):
        state = random_state(seed, family="identity", rank=2)
        psi = [np.diagonal(c, axis1=1, axis2=2).T.copy() for c in state.covs]
        ref = bcp_sweep(state.data.Y, state.data.O, state.means, psi, state.gamma_mean.copy(),
                        state.tau_mean, state.config.hyper)
        sweep(state)
        assert state.rank == 2
        for k in range(3):
            np.testing.assert_allclose(state.means[k], ref[0][k], rtol=1e-8, atol=1e-12)
            np.testing.assert_allclose(np.diagonal(state.covs[k], axis1=1, axis2=2).T, ref[1][k], rtol=1e-8)
        np.testing.assert_allclose(state.b_gamma, ref[2][1], rtol=1e-8)
        assert state.b_tau == pytest.approx(ref[3][1], rel=1e-8)


class TestFit:
    def test_noiseless_rank1_recovery(self):
        _, x = rank1((5, 5, 5), seed=8)
        state = fit(from_dense(x), ModelConfig(kernels=IDENTITY, max_iters=50))
        assert state.rank == 1
        assert rrse(x, state.reconstruct()) < 1e-3

    def test_scale_invariance(self):
        truth, _ = gen_random_cp((8, 8, 8), 2, [0, 0])
        noisy = truth + 0.05 * np.random.default_rng(1).standard_normal(truth.shape)
        O = (np.random.default_rng(2).uniform(size=truth.shape) < 0.5).astype(np.int8)
        cfg = ModelConfig(kernels=IDENTITY, rank_init=5)
        base = fit(from_dense(noisy, O), cfg).reconstruct()
        scaled = fit(from_dense(10.0 * noisy, O), cfg).reconstruct()
        assert np.linalg.norm(scaled - 10.0 * base) / np.linalg.norm(10.0 * base) < 1e-3

    def test_trace_lengths(self):
        _, x = rank1((4, 4), seed=1)
        state = fit(from_dense(x), ModelConfig(kernels=IDENTITY, max_iters=7, conv_tol=1e-300))
        assert state.iteration == 7 == len(state.elbo_trace) == len(state.rank_trace)
        assert not state.converged

    def test_nonfinite_detected(self):
        state = random_state(0)
        state.means[1][0, 0] = np.nan
        with pytest.raises(NumericalError):
            _check_finite(state)
