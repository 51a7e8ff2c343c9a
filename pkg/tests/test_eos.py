"""Tests of the self-consistent layer-equation solver."""

import numpy as np
import pytest

import eoskit.data as data
import eoskit.kernels as kernels
from eoskit import eos
from eoskit.eos import (
    EoSState,
    SolverOptions,
    cnn_residual,
    emergent_scale,
    fcn_residual,
    hidden_fluctuation,
    kl_gradient,
    mf_diagnostic,
    solve,
)
from eoskit.gp import posterior_mean
from eoskit.networks import NetworkSpec

from _oracles import fd_matrix_gradient, gaussian_kl
from conftest import random_psd

NOISE = 0.1


def fcn3_problem(n=64, d=16, width=10**8, seed=3):
    X = data.gaussian_inputs(n, d, seed)
    y, _ = data.make_target(X, data.TeacherSpec(kind="fcn_teacher",
                                                seed=seed + 50,
                                                hidden=(32,)))
    spec = NetworkSpec(arch="fcn", input_dim=d, widths=(width, width),
                       layer_vars=(2.0, 2.0, 2.0))
    return spec, X, y


def desk_conv2(seed=0):
    ds = data.make_dataset(
        n=200, d=64, seed=seed,
        teacher=data.TeacherSpec(kind="linear_cnn", seed=100 + seed,
                                 window=16, normalized=True))
    return ds


def conv2_spec(channels):
    return NetworkSpec(arch="conv2", input_dim=64, widths=(channels,),
                       layer_vars=(2.0, 2.0), windows=(16,))


class TestGPLimit:
    def test_fcn_three_layer_recovers_composed_kernel(self):
        spec, X, y = fcn3_problem()
        state = solve(spec, X, y, NOISE,
                      SolverOptions(max_iters=100, residual_tol=1e-10))
        assert state.converged
        # lazy-limit images computed independently of the solver state
        K1 = (2.0 / 16) * (X @ X.T)
        Q2 = kernels.erf_post_kernel(K1, 2.0)
        Q3 = kernels.erf_post_kernel(Q2, 2.0)
        rel = np.linalg.norm(state.pre_kernels[0] - Q2) / np.linalg.norm(Q2)
        assert rel < 1e-6
        direct = posterior_mean(Q3, y, NOISE)
        assert np.max(np.abs(state.posterior.f_bar - direct.f_bar)) < 1e-8

    def test_conv2_matches_exact_gp(self):
        ds = desk_conv2()
        state = solve(conv2_spec(10**9), ds.X, ds.y, NOISE)
        assert state.converged
        sigma0 = (2.0 / 16) * np.eye(16)
        assert np.abs(state.sigma - sigma0).max() < 1e-8
        patches = kernels.extract_patches(ds.X, 16).reshape(200, 1, 4, 16)
        Q = kernels.strided_post_kernel(patches, sigma0, "erf", 2.0)
        direct = posterior_mean(Q, ds.y, NOISE)
        assert state.alpha == pytest.approx(direct.alpha, abs=1e-7)

    def test_conv3_recovers_lazy_kernels(self):
        X = data.gaussian_inputs(40, 16, seed=5)
        y, _ = data.make_target(X, data.TeacherSpec(kind="linear_cnn",
                                                    seed=9, window=4,
                                                    normalized=True))
        spec = NetworkSpec(arch="conv3", input_dim=16,
                           widths=(10**8, 10**8),
                           layer_vars=(2.0, 2.0, 2.0), windows=(4, 2))
        state = solve(spec, X, y, NOISE,
                      SolverOptions(max_iters=100, residual_tol=1e-10))
        assert state.converged
        patches = kernels.extract_patches(X, 4).reshape(40, 2, 2, 4)
        sigma0 = (2.0 / 4) * np.eye(4)
        Q2 = kernels.strided_post_kernel(patches, sigma0, "erf", 2.0)
        rel = np.linalg.norm(state.pre_kernels[0] - Q2) / np.linalg.norm(Q2)
        assert rel < 1e-6


class TestBuildingBlocks:
    def test_hidden_fluctuation_vanishes_on_match(self):
        Q = random_psd(5, seed=2) + 0.5 * np.eye(5)
        assert np.abs(hidden_fluctuation(Q, Q)).max() < 1e-9

    def test_hidden_fluctuation_sign(self):
        Q = random_psd(4, seed=3) + np.eye(4)
        K = 0.5 * Q
        A = hidden_fluctuation(K, Q)
        # K below Q means positive fluctuation matrix (0.5 * Q^{-1})
        lam = np.linalg.eigvalsh(A)
        assert lam.min() > 0

    @pytest.mark.parametrize("seed", range(6))
    def test_kl_gradient_matches_finite_differences(self, seed):
        m = 4
        K_prev = random_psd(m, seed=seed) + 0.3 * np.eye(m)
        K = random_psd(m, seed=seed + 40) + 0.5 * np.eye(m)
        var = 1.7

        def twice_kl(Kp):
            Q = kernels.erf_post_kernel(Kp, var)
            return 2.0 * gaussian_kl(K, Q)

        grad = kl_gradient(K_prev, K, kernels.erf_post_kernel(K_prev, var),
                           var, kind="erf")
        fd = fd_matrix_gradient(twice_kl, K_prev, h=1e-5)
        assert np.abs(grad - fd).max() < 1e-5 * max(1.0, np.abs(fd).max())

    def test_kl_gradient_linear_kind_closed_form(self):
        m = 5
        K_prev = random_psd(m, seed=11) + 0.4 * np.eye(m)
        K = random_psd(m, seed=12) + 0.4 * np.eye(m)
        var = 2.3
        Q = kernels.linear_post_kernel(K_prev, var)
        grad = kl_gradient(K_prev, K, Q, var, kind="linear")
        A = hidden_fluctuation(K, Q)
        assert np.allclose(grad, var * A, rtol=1e-10, atol=1e-12)


class TestFiniteWidth:
    def test_desk_conv2_frozen_alpha(self):
        ds = desk_conv2()
        state = solve(conv2_spec(128), ds.X, ds.y, NOISE,
                      SolverOptions(residual_tol=1e-10))
        assert state.converged
        assert state.alpha == pytest.approx(0.28859, rel=1e-3)
        scale = emergent_scale(state, ds.X)
        assert scale.chi == pytest.approx(0.310, rel=0.05)
        assert scale.width_at_unity == pytest.approx(scale.chi * 128,
                                                     rel=1e-12)

    def test_alpha_decreases_with_narrowing(self):
        ds = desk_conv2()
        alphas = [solve(conv2_spec(c), ds.X, ds.y, NOISE).alpha
                  for c in (128, 512, 10**9)]
        assert alphas[0] < alphas[1] < alphas[2]

    def test_sigma_develops_teacher_outlier(self):
        ds = desk_conv2()
        state = solve(conv2_spec(128), ds.X, ds.y, NOISE)
        lam, vecs = np.linalg.eigh(state.sigma)
        w_star = np.asarray(ds.meta["teacher_w"])
        w_star = w_star / np.linalg.norm(w_star)
        # one outlier above an isotropic-ish bulk, aligned with the teacher
        assert lam[-1] > 1.2 * lam[-2]
        assert abs(vecs[:, -1] @ w_star) > 0.9
        assert lam[-1] > 2.0 / 16 > lam[0]

    def test_fcn_three_layer_feature_learning(self):
        spec, X, y = fcn3_problem(width=64)
        state = solve(spec, X, y, NOISE,
                      SolverOptions(max_iters=300, residual_tol=1e-9))
        assert state.converged
        gp = solve(spec.with_widths(10**8), X, y, NOISE)
        # the narrow network moves its kernels off the lazy images and
        # fits the data better
        rel = np.linalg.norm(state.pre_kernels[0] - state.post_kernels[0]) \
            / np.linalg.norm(state.post_kernels[0])
        assert rel > 1e-3
        assert state.alpha < gp.alpha
        stacked = fcn_residual(spec, X, y, NOISE, state)
        assert np.linalg.norm(stacked) < 10 * 1e-9

    def test_conv3_finite_width_converges(self):
        X = data.gaussian_inputs(40, 16, seed=5)
        y, _ = data.make_target(X, data.TeacherSpec(kind="linear_cnn",
                                                    seed=9, window=4,
                                                    normalized=True))
        spec = NetworkSpec(arch="conv3", input_dim=16, widths=(48, 48),
                           layer_vars=(2.0, 2.0, 2.0), windows=(4, 2))
        state = solve(spec, X, y, NOISE,
                      SolverOptions(max_iters=300, residual_tol=1e-9))
        assert state.converged
        stacked = cnn_residual(spec, X, y, NOISE, state)
        assert np.linalg.norm(stacked) < 1e-8
        gp = solve(spec.with_widths(10**8), X, y, NOISE)
        assert state.alpha < gp.alpha


class TestPaperScaleAnchor:
    def test_conv2_alpha_train(self):
        # published self-consistent value at these parameters is 0.377
        # (0.384 without the output-covariance term); one seed, ~1 min
        ds = data.make_dataset(
            n=800, d=1280, seed=0,
            teacher=data.TeacherSpec(kind="linear_cnn", seed=100,
                                     window=64, normalized=True))
        spec = NetworkSpec(arch="conv2", input_dim=1280, widths=(80,),
                           layer_vars=(2.0, 2.0), windows=(64,))
        state = solve(spec, ds.X, ds.y, NOISE,
                      SolverOptions(max_iters=150, residual_tol=1e-8,
                                    newton_krylov=True))
        assert state.converged
        assert abs(state.alpha - 0.377) / 0.377 < 0.03
        lam = np.linalg.eigvalsh(state.sigma)
        # strong feature learning: outlier several times the bulk
        assert lam[-1] / np.mean(lam[:-1]) > 2.5


class TestSolverBehaviour:
    def test_damping_invariance(self):
        ds = desk_conv2()
        a = solve(conv2_spec(256), ds.X, ds.y, NOISE,
                  SolverOptions(damping=1.0, residual_tol=1e-10)).alpha
        b = solve(conv2_spec(256), ds.X, ds.y, NOISE,
                  SolverOptions(damping=0.5, residual_tol=1e-10)).alpha
        assert a == pytest.approx(b, abs=1e-8)

    def test_jacobi_matches_gauss_seidel(self):
        # single-block problem with strong feature learning: the two
        # sweep orders take different code paths to the same fixed point
        ds = desk_conv2()
        gs = solve(conv2_spec(256), ds.X, ds.y, NOISE,
                   SolverOptions(residual_tol=1e-10))
        ja = solve(conv2_spec(256), ds.X, ds.y, NOISE,
                   SolverOptions(residual_tol=1e-10,
                                 update_mode="jacobi"))
        assert gs.converged and ja.converged
        assert gs.alpha == pytest.approx(ja.alpha, abs=1e-8)

    def test_jacobi_multi_block_flagged_when_oscillating(self):
        # staggered updates lag the inter-layer conditions by one sweep,
        # which oscillates on deep problems (the documented limitation);
        # the solver must hand back a flagged state, not blow up
        spec, X, y = fcn3_problem(width=4096)
        ja = solve(spec, X, y, NOISE,
                   SolverOptions(max_iters=60, residual_tol=1e-10,
                                 update_mode="jacobi"))
        assert isinstance(ja, EoSState)
        assert not ja.converged

    def test_annealing_schedule(self):
        ds = desk_conv2()
        sched = solve(conv2_spec(64), ds.X, ds.y, NOISE,
                      SolverOptions(schedule=(1024, 256, 64),
                                    residual_tol=1e-9))
        direct = solve(conv2_spec(64), ds.X, ds.y, NOISE,
                       SolverOptions(residual_tol=1e-9))
        assert sched.converged
        assert [s.width for s in sched.stages] == [1024, 256, 64]
        assert all(s.converged for s in sched.stages)
        assert sched.alpha == pytest.approx(direct.alpha, abs=1e-7)
        # per-stage alphas decrease as the width anneals down
        stage_alpha = [s.alpha for s in sched.stages]
        assert stage_alpha[0] > stage_alpha[1] > stage_alpha[2]

    def test_schedule_validation(self):
        ds = desk_conv2()
        with pytest.raises(ValueError):
            SolverOptions(schedule=(64, 256))
        with pytest.raises(ValueError, match="end at the requested"):
            solve(conv2_spec(64), ds.X, ds.y, NOISE,
                  SolverOptions(schedule=(256, 128)))

    def test_non_convergence_flagged_not_raised(self):
        ds = desk_conv2()
        state = solve(conv2_spec(128), ds.X, ds.y, NOISE,
                      SolverOptions(max_iters=3, residual_tol=1e-12))
        assert isinstance(state, EoSState)
        assert not state.converged
        assert state.residual > 1e-12
        assert len(state.history) == 3

    def test_output_covariance_flag_shifts_alpha(self):
        ds = desk_conv2()
        keep = solve(conv2_spec(128), ds.X, ds.y, NOISE)
        drop = solve(conv2_spec(128), ds.X, ds.y, NOISE,
                     SolverOptions(include_output_covariance=False))
        assert keep.alpha != pytest.approx(drop.alpha, abs=1e-6)
        # dropping the negative-definite part strengthens the feedback
        assert drop.alpha < keep.alpha


class TestDiagnostics:
    def test_emergent_scale_inverse_width(self):
        ds = desk_conv2()
        chi_128 = emergent_scale(solve(conv2_spec(128), ds.X, ds.y, NOISE),
                                 ds.X).chi
        chi_256 = emergent_scale(solve(conv2_spec(256), ds.X, ds.y, NOISE),
                                 ds.X).chi
        assert 1.7 < chi_128 / chi_256 < 2.1

    def test_emergent_scale_gp_limit_is_tiny(self):
        ds = desk_conv2()
        state = solve(conv2_spec(10**9), ds.X, ds.y, NOISE)
        assert emergent_scale(state, ds.X).chi < 1e-5

    def test_mf_diagnostic_bounded_and_width_scaled(self):
        ds = desk_conv2()
        small = mf_diagnostic(solve(conv2_spec(128), ds.X, ds.y, NOISE))
        large = mf_diagnostic(solve(conv2_spec(512), ds.X, ds.y, NOISE))
        assert 0 < small < 1
        assert small > large

    def test_mean_field_readout_scaling(self):
        spec = NetworkSpec(arch="conv2", input_dim=64, widths=(128,),
                           layer_vars=(2.0, 2.0), windows=(16,),
                           mean_field_readout=True)
        assert spec.readout_var == pytest.approx(2.0 / 128)
        ds = desk_conv2()
        state = solve(spec, ds.X, ds.y, NOISE)
        assert np.isfinite(state.alpha)


class TestValidation:
    def test_relu_rejected(self):
        ds = desk_conv2()
        spec = NetworkSpec(arch="conv2", input_dim=64, widths=(64,),
                           layer_vars=(2.0, 2.0), windows=(16,),
                           activation="relu")
        with pytest.raises(ValueError, match="relu"):
            solve(spec, ds.X, ds.y, NOISE)

    def test_shape_and_noise_validation(self):
        ds = desk_conv2()
        with pytest.raises(ValueError):
            solve(conv2_spec(64), ds.X, ds.y[:-1], NOISE)
        with pytest.raises(ValueError):
            solve(conv2_spec(64), ds.X, ds.y, 0.0)
        with pytest.raises(ValueError, match="dimension"):
            solve(NetworkSpec(arch="conv2", input_dim=32, widths=(64,),
                              layer_vars=(2.0, 2.0), windows=(16,)),
                  ds.X, ds.y, NOISE)

    def test_residual_wrappers_check_arch(self):
        ds = desk_conv2()
        state = solve(conv2_spec(64), ds.X, ds.y, NOISE)
        with pytest.raises(ValueError):
            fcn_residual(conv2_spec(64), ds.X, ds.y, NOISE, state)
        spec, X, y = fcn3_problem(width=64)
        with pytest.raises(ValueError):
            cnn_residual(spec, X, y, NOISE, state)

    def test_network_spec_validation(self):
        with pytest.raises(ValueError):
            NetworkSpec(arch="fcn", input_dim=8, widths=(16,),
                        layer_vars=(2.0,))
        with pytest.raises(ValueError):
            NetworkSpec(arch="conv2", input_dim=63, widths=(8,),
                        layer_vars=(2.0, 2.0), windows=(16,))
        with pytest.raises(ValueError):
            NetworkSpec(arch="nope", input_dim=8, widths=(8,),
                        layer_vars=(2.0, 2.0))
