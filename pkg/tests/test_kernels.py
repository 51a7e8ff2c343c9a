import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import _oracles as orc
from conftest import random_psd
from eoskit import kernels as kn


class TestIndexSpace:
    def test_point_major_layout(self):
        space = kn.IndexSpace(n_points=3, pixels=4)
        assert space.size == 12
        assert space.flat(2, 1) == 9
        assert space.unflat(9) == (2, 1)

    def test_single_pixel_is_identity(self):
        space = kn.IndexSpace(5)
        assert [space.flat(mu) for mu in range(5)] == list(range(5))

    def test_pixel_indices(self):
        space = kn.IndexSpace(3, 2)
        assert space.pixel_indices(1).tolist() == [1, 3, 5]

    def test_rejects_bad_indices(self):
        space = kn.IndexSpace(3, 2)
        with pytest.raises(IndexError):
            space.flat(3, 0)
        with pytest.raises(IndexError):
            space.unflat(6)
        with pytest.raises(ValueError):
            kn.IndexSpace(0, 1)


class TestInputKernel:
    def test_fcn_is_x_sigma_xt(self, rng):
        X = rng.standard_normal((6, 3))
        sigma = random_psd(3, seed=0)
        K = kn.input_kernel(X, sigma)
        assert K.space.pixels == 1
        np.testing.assert_allclose(K.array, X @ sigma @ X.T, atol=1e-12)

    def test_conv_matches_loop_oracle(self, rng):
        X = rng.standard_normal((4, 12))
        sigma = random_psd(4, seed=1)
        K = kn.input_kernel(X, sigma, window=4)
        expected = orc.loop_input_kernel(X, sigma, window=4)
        np.testing.assert_allclose(K.array, expected, atol=1e-12)
        assert K.space.pixels == 3

    def test_identity_covariance_gives_patch_grams(self, rng):
        X = rng.standard_normal((3, 8))
        K = kn.input_kernel(X, np.eye(2), window=2)
        patches = X.reshape(3, 4, 2)
        assert K.block(1, 1) == pytest.approx(patches[:, 1, :] @ patches[:, 1, :].T)

    def test_window_must_divide_dimension(self, rng):
        with pytest.raises(ValueError):
            kn.input_kernel(rng.standard_normal((3, 10)), np.eye(3), window=3)

    def test_covariance_shape_checked(self, rng):
        with pytest.raises(ValueError):
            kn.input_kernel(rng.standard_normal((3, 10)), np.eye(3))


class TestPostKernels:
    def test_erf_rank_one_value(self):
        # all pre-activations perfectly correlated with unit norm:
        # every entry is (2/pi) asin(2/3)
        Q = kn.erf_post_kernel(np.ones((2, 2)))
        np.testing.assert_allclose(Q, 0.46455905439753997, rtol=1e-14)

    def test_erf_zero_kernel(self):
        np.testing.assert_array_equal(kn.erf_post_kernel(np.zeros((3, 3))), 0.0)

    def test_erf_saturation(self):
        # strongly correlated, large-norm inputs saturate the erf: Q -> out_var
        Q = kn.erf_post_kernel(1e8 * np.ones((2, 2)), out_var=1.7)
        np.testing.assert_allclose(Q, 1.7, rtol=1e-3)

    def test_erf_small_kernel_linearises(self):
        K = 1e-8 * np.array([[2.0, 1.0], [1.0, 3.0]])
        np.testing.assert_allclose(kn.erf_post_kernel(K), (4 / math.pi) * K, rtol=1e-6)

    def test_relu_identity_kernel(self):
        Q = kn.relu_post_kernel(np.eye(2))
        np.testing.assert_allclose(np.diag(Q), 0.5, rtol=1e-14)
        assert Q[0, 1] == pytest.approx(1 / (2 * math.pi), rel=1e-14)

    def test_relu_aligned_inputs(self):
        # theta = 0: Q = out_var * sqrt(Kaa Kbb) / 2
        K = np.array([[4.0, 2.0], [2.0, 1.0]])
        Q = kn.relu_post_kernel(K, out_var=3.0)
        assert Q[0, 1] == pytest.approx(3.0 * 2.0 / 2.0, rel=1e-12)

    def test_relu_zero_norm_row(self):
        K = np.diag([1.0, 0.0])
        Q = kn.relu_post_kernel(K)
        assert Q[0, 1] == 0.0 and Q[1, 1] == 0.0

    @pytest.mark.parametrize("kind", ["erf", "relu", "linear"])
    def test_matches_scalar_formula(self, kind, rng):
        K = random_psd(5, seed=3, scale=1.4)
        np.testing.assert_allclose(
            kn.post_kernel(kind, K, 1.3), orc.analytic_post_kernel(K, kind, 1.3),
            atol=1e-12,
        )

    @pytest.mark.parametrize("kind", ["erf", "relu"])
    def test_monte_carlo_agreement(self, kind):
        # acceptance runs the full 1e7-sample version; this is a faster spot check
        K = random_psd(4, seed=11, scale=0.9)
        Q = kn.post_kernel(kind, K, out_var=1.0)
        est, se = orc.mc_post_kernel(K, kind, n_samples=400_000, seed=5)
        np.testing.assert_array_less(np.abs(Q - est), 4.0 * se + 1e-12)

    @given(st.integers(0, 10_000), st.floats(0.05, 5.0))
    def test_postkernels_stay_psd(self, seed, scale):
        K = random_psd(5, seed=seed, scale=scale)
        for kind in ("erf", "relu"):
            lam = np.linalg.eigvalsh(kn.post_kernel(kind, K, 1.0))
            assert lam.min() > -1e-10 * max(lam.max(), 1.0)

    @given(st.integers(0, 10_000))
    def test_cauchy_schwarz_and_symmetry(self, seed):
        K = random_psd(4, seed=seed, scale=2.0, rank=3)
        for kind in ("erf", "relu"):
            Q = kn.post_kernel(kind, K, 1.0)
            np.testing.assert_allclose(Q, Q.T, atol=1e-12)
            bound = np.sqrt(np.outer(np.diag(Q), np.diag(Q)))
            assert np.all(np.abs(Q) <= bound + 1e-12)

    def test_clamp_tolerates_roundoff_only(self):
        # overshoot below the tolerance is clipped silently
        K = np.ones((2, 2))
        K[0, 1] = K[1, 0] = 1.5 * (1 + 5e-13)  # ratio = 1 + 5e-13
        kn.erf_post_kernel(K)
        # anything larger is a genuine PSD violation and must raise
        K[0, 1] = K[1, 0] = 1.5 * (1 + 1e-9)
        with pytest.raises(kn.KernelDomainError):
            kn.erf_post_kernel(K)
        R = np.ones((2, 2))
        R[0, 1] = R[1, 0] = 1.0 + 1e-6
        with pytest.raises(kn.KernelDomainError):
            kn.relu_post_kernel(R)

    def test_unknown_activation_rejected(self):
        with pytest.raises(ValueError, match="unknown activation"):
            kn.post_kernel("tanh", np.eye(2), 1.0)


class TestAdjoints:
    @pytest.mark.parametrize("seed", range(6))
    def test_erf_adjoint_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        K = random_psd(4, seed=seed, scale=0.5 + 2 * rng.random())
        A = rng.standard_normal((4, 4))
        A = 0.5 * (A + A.T)
        ov = 0.5 + rng.random()
        M = kn.erf_post_kernel_adjoint(K, ov, A)
        M_fd = orc.fd_trace_adjoint(lambda Z: kn.erf_post_kernel(Z, ov), K, A, h=1e-5)
        np.testing.assert_allclose(M, M_fd, rtol=0, atol=1e-6 * np.max(np.abs(M_fd)))

    def test_erf_adjoint_linearity_in_contraction(self, rng):
        K = random_psd(5, seed=21)
        A = random_psd(5, seed=22)
        B = rng.standard_normal((5, 5))
        B = 0.5 * (B + B.T)
        lhs = kn.erf_post_kernel_adjoint(K, 1.0, 2.0 * A - 0.5 * B)
        rhs = 2.0 * kn.erf_post_kernel_adjoint(K, 1.0, A) - 0.5 * kn.erf_post_kernel_adjoint(K, 1.0, B)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_linear_adjoint_is_scaled_contraction(self):
        A = np.array([[1.0, 2.0], [2.0, -1.0]])
        np.testing.assert_array_equal(
            kn.post_kernel_adjoint("linear", np.eye(2), 1.9, A), 1.9 * A
        )

    def test_relu_adjoint_rejected(self):
        with pytest.raises(ValueError, match="relu"):
            kn.post_kernel_adjoint("relu", np.eye(2), 1.0, np.eye(2))

    def test_strided_adjoint_matches_finite_differences(self, rng):
        n, groups, inner, s = 3, 2, 2, 3
        patches = rng.standard_normal((n, groups, inner, s))
        sigma = random_psd(s, seed=31, scale=0.4)
        A = rng.standard_normal((n * groups, n * groups))
        A = 0.5 * (A + A.T)
        grad = kn.strided_post_adjoint(patches, sigma, "erf", 1.7, A)
        grad_fd = orc.fd_matrix_gradient(
            lambda S: float(np.sum(A * kn.strided_post_kernel(patches, S, "erf", 1.7))),
            sigma, h=1e-6,
        )
        np.testing.assert_allclose(grad, grad_fd, atol=1e-6 * np.max(np.abs(grad_fd)))


class TestContractions:
    def test_readout_average_matches_loop(self, rng):
        n, P = 4, 3
        space = kn.IndexSpace(n, P)
        Q = random_psd(space.size, seed=41)
        got = kn.readout_average(Q, space, readout_var=2.0)
        np.testing.assert_allclose(got, orc.loop_readout_average(Q, n, P, 2.0), atol=1e-12)

    def test_readout_average_single_pixel(self):
        Q = random_psd(5, seed=42)
        np.testing.assert_allclose(kn.readout_average(Q, kn.IndexSpace(5, 1), 3.0), 3.0 * Q)

    def test_lift_is_adjoint_of_readout(self, rng):
        space = kn.IndexSpace(3, 4)
        Q = random_psd(space.size, seed=43)
        A = rng.standard_normal((3, 3))
        A = 0.5 * (A + A.T)
        lifted = kn.lift_readout_contraction(A, space, readout_var=1.6)
        lhs = float(np.sum(lifted * Q))
        rhs = float(np.sum(A * kn.readout_average(Q, space, 1.6)))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_strided_kernel_readout_route_equivalence(self, rng):
        # conv readout: strided fast path == materialise-then-average
        n, N, S = 4, 3, 5
        X = rng.standard_normal((n, N * S))
        sigma = random_psd(S, seed=44, scale=0.7)
        patches = kn.extract_patches(X, S)[:, None, :, :]  # groups=1, inner=N
        fast = kn.strided_post_kernel(patches, sigma, "erf", 2.0)
        K_full = kn.input_kernel(X, sigma, window=S)
        slow = kn.readout_average(kn.erf_post_kernel(K_full.array), K_full.space, 2.0)
        np.testing.assert_allclose(fast, slow, atol=1e-12)

    def test_strided_kernel_grouped_route_equivalence(self, rng):
        # two-stage conv: strided fast path == full patch kernel then block sums
        n, N, S1, S0 = 3, 2, 2, 4
        X = rng.standard_normal((n, N * S1 * S0))
        sigma = random_psd(S0, seed=45, scale=0.5)
        patches = kn.extract_patches(X, S0).reshape(n, N, S1, S0)
        fast = kn.strided_post_kernel(patches, sigma, "erf", 1.3)
        K_full = kn.input_kernel(X, sigma, window=S0)  # over n * (N*S1) patches
        G = kn.erf_post_kernel(K_full.array)
        slow = np.zeros((n * N, n * N))
        for mu in range(n):
            for j in range(N):
                for nu in range(n):
                    for jp in range(N):
                        acc = sum(
                            G[(mu * N + j) * S1 + i_, (nu * N + jp) * S1 + i_]
                            for i_ in range(S1)
                        )
                        slow[mu * N + j, nu * N + jp] = 1.3 * acc / S1
        np.testing.assert_allclose(fast, slow, atol=1e-12)

    def test_strided_kernel_fcn_case(self, rng):
        X = rng.standard_normal((5, 3))
        sigma = random_psd(3, seed=46)
        fast = kn.strided_post_kernel(X[:, None, None, :], sigma, "erf", 1.1)
        np.testing.assert_allclose(fast, kn.erf_post_kernel(X @ sigma @ X.T, 1.1), atol=1e-12)


class TestLinearAlgebraHelpers:
    def test_inverse_of_diagonal(self):
        inv, eps = kn.regularized_inverse(np.diag([2.0, 4.0]))
        np.testing.assert_allclose(inv, np.diag([0.5, 0.25]), rtol=1e-8)
        assert eps == pytest.approx(1e-10 * 3.0)

    def test_jitter_escalation(self):
        # slightly indefinite matrix: the first jitter level fails, a
        # larger one succeeds and is reported
        M = np.diag([1.0, -6e-11])
        _, eps = kn.regularized_inverse(M)
        assert eps > kn.default_jitter(M)

    def test_hopeless_matrix_raises(self):
        with pytest.raises(np.linalg.LinAlgError):
            kn.regularized_inverse(np.diag([1.0, -1.0]))

    def test_solve_matches_inverse(self, rng):
        M = random_psd(6, seed=51) + np.eye(6)
        b = rng.standard_normal(6)
        inv, _ = kn.regularized_inverse(M)
        np.testing.assert_allclose(kn.regularized_solve(M, b), inv @ b, rtol=1e-8)

    def test_psd_clip_counts_negatives(self):
        M = np.diag([1.0, -0.2])
        out, count = kn.psd_clip(M)
        assert count == 1
        assert np.linalg.eigvalsh(out).min() >= 0.0

    def test_psd_clip_leaves_psd_alone(self):
        M = random_psd(4, seed=52)
        out, count = kn.psd_clip(M)
        assert count == 0
        np.testing.assert_allclose(out, M, atol=1e-14)


class TestWeightCovariance:
    def test_top_eigpair(self):
        v = np.array([3.0, 4.0]) / 5.0
        M = 2.0 * np.outer(v, v) + 0.5 * np.eye(2)
        cov = kn.WeightCovariance(M)
        lam, vec = cov.top_eigpair()
        assert lam == pytest.approx(2.5)
        np.testing.assert_allclose(np.abs(vec), np.abs(v), atol=1e-12)

    def test_bulk_mean_excludes_top(self):
        cov = kn.WeightCovariance(np.diag([0.1, 0.2, 5.0]))
        assert cov.bulk_mean() == pytest.approx(0.15)
        assert cov.trace() == pytest.approx(5.3)
