"""Mapping engine tests: KL gradient field, optimizers, convergence logic and
full mapping cycles on closed-form Gaussian targets."""

import numpy as np
import pytest

from mpfilter.core import ContractViolation, Covariance, Ensemble
from mpfilter.kernels import GaussianKernel
from mpfilter.models import Lorenz63
from mpfilter.mpf import (
    AdadeltaOptimizer,
    AdamOptimizer,
    MappingConfig,
    NonFiniteGradientError,
    SgdOptimizer,
    check_convergence,
    kl_gradient_field,
    kl_hessian_field,
    make_optimizer,
    mapping_cycle,
    optimizer_step,
)
from mpfilter.ssm import PriorMixture, StateSpaceModel, log_posterior_grad


def kernel_1d():
    return GaussianKernel.from_model_error(Covariance.diagonal([1.0]), 1.0)


def gaussian_ssm_1d(q=1.0, r=1.0):
    return StateSpaceModel(
        dynamics=Lorenz63(),
        obs_matrix=np.eye(1),
        q=Covariance.diagonal([q]),
        r=Covariance.diagonal([r]),
        cycle_steps=1,
    )


class TestKlGradientField:
    def test_single_particle_3dvar_limit(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            ssm = gaussian_ssm_1d(q=float(rng.uniform(0.5, 2.0)))
            kernel = GaussianKernel.from_model_error(ssm.q, 1.0)
            prior = PriorMixture(rng.standard_normal((1, 1)), ssm.q)
            x = rng.standard_normal((1, 1))
            y = rng.standard_normal(1)
            g = log_posterior_grad(ssm, prior, x, y)
            field = kl_gradient_field(kernel, x, g)
            assert np.max(np.abs(field + g)) < 1e-14

    def test_repulsion_hand_value(self):
        # flat target, particles {0, 1}: the field at 1 pushes it upward
        field = kl_gradient_field(kernel_1d(), np.array([[0.0], [1.0]]),
                                  np.zeros((2, 1)))
        assert field[1, 0] == pytest.approx(-0.5 * np.exp(-0.5), rel=1e-12)
        assert field[0, 0] == pytest.approx(+0.5 * np.exp(-0.5), rel=1e-12)

    def test_coincident_flat_zero(self):
        field = kl_gradient_field(kernel_1d(), np.array([[1.0], [1.0]]),
                                  np.zeros((2, 1)))
        np.testing.assert_array_equal(field, np.zeros((2, 1)))

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(5)
        kernel = kernel_1d()
        states = rng.standard_normal((6, 1))
        grads = rng.standard_normal((6, 1))
        perm = rng.permutation(6)
        a = kl_gradient_field(kernel, states, grads)[perm]
        b = kl_gradient_field(kernel, states[perm], grads[perm])
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            kl_gradient_field(kernel_1d(), np.zeros((3, 1)), np.zeros((2, 1)))

    def test_flat_target_repulsion_increases_separation(self):
        # sgd descent on a flat target strictly grows min pairwise distance
        rng = np.random.default_rng(9)
        kernel = kernel_1d()
        states = rng.standard_normal((8, 1)) * 0.3
        def min_dist(s):
            d = np.abs(s[:, None, 0] - s[None, :, 0])
            return d[~np.eye(8, dtype=bool)].min()
        prev = min_dist(states)
        for _ in range(20):
            field = kl_gradient_field(kernel, states, np.zeros((8, 1)))
            states = states - 0.05 * field
            cur = min_dist(states)
            assert cur > prev
            prev = cur


class TestKlHessianField:
    def test_matches_finite_difference_of_field(self):
        # Jacobian with respect to the evaluation point of the field, with
        # the source cloud (and their logp grads) frozen -- the quantity
        # the density transport needs
        rng = np.random.default_rng(13)
        kernel = GaussianKernel.from_model_error(
            Covariance.diagonal(rng.uniform(0.5, 2.0, size=2)), 1.3)
        sources = rng.standard_normal((4, 2))
        grads = rng.standard_normal((4, 2))
        hess = kl_hessian_field(kernel, sources, grads)

        def field_at(x):
            acc = np.zeros(2)
            for l in range(4):
                acc += kernel(sources[l], x) * grads[l]
                acc += kernel.grad_source(sources[l], x)
            return -acc / 4.0

        h = 1e-6
        for j in range(4):
            fd = np.empty((2, 2))
            for i in range(2):
                e = np.zeros(2)
                e[i] = h
                fd[:, i] = (field_at(sources[j] + e)
                            - field_at(sources[j] - e)) / (2 * h)
            np.testing.assert_allclose(hess[j], fd, atol=1e-6)


class TestOptimizers:
    def test_sgd_hand_value(self):
        cfg = MappingConfig(optimizer="sgd", learning_rate=0.1)
        opt = SgdOptimizer(cfg, (1, 2))
        np.testing.assert_allclose(opt.step(np.array([[2.0, -4.0]])),
                                   [[-0.2, 0.4]])

    def test_zero_gradient_zero_delta(self):
        for name in ("sgd", "adadelta", "adam"):
            cfg = MappingConfig(optimizer=name)
            opt = make_optimizer(cfg, (3, 2))
            np.testing.assert_array_equal(opt.step(np.zeros((3, 2))),
                                          np.zeros((3, 2)))

    def test_adam_first_step_magnitude(self):
        cfg = MappingConfig(optimizer="adam", learning_rate=0.03)
        opt = AdamOptimizer(cfg, (1, 3))
        delta = opt.step(np.array([[5.0, -2.0, 0.7]]))
        np.testing.assert_allclose(np.abs(delta), 0.03, rtol=0.01)

    def test_adadelta_first_step_magnitude(self):
        # conditioning constant lr^2 puts the first step near lr for
        # moderate gradients
        cfg = MappingConfig(optimizer="adadelta", learning_rate=0.03)
        opt = AdadeltaOptimizer(cfg, (1, 1))
        delta = opt.step(np.array([[1.0]]))
        assert 0.02 < abs(delta[0, 0]) < 0.2

    def test_adadelta_step_decays_with_gradient(self):
        # near a fixed point shrinking gradients give shrinking steps
        cfg = MappingConfig(optimizer="adadelta", learning_rate=0.03)
        opt = AdadeltaOptimizer(cfg, (1, 1))
        steps = []
        for i in range(60):
            g = np.array([[1.0 * 0.7**i]])
            steps.append(abs(opt.step(g)[0, 0]))
        assert steps[-1] < steps[10] * 0.01

    def test_nonfinite_gradient_rejected(self):
        cfg = MappingConfig(optimizer="sgd")
        opt = make_optimizer(cfg, (2, 1))
        with pytest.raises(NonFiniteGradientError) as err:
            optimizer_step(opt, cfg, np.array([[1.0], [np.nan]]))
        assert err.value.particle == 1

    def test_unknown_optimizer_rejected(self):
        with pytest.raises(ContractViolation):
            MappingConfig(optimizer="lbfgs")


class TestMappingConfig:
    def test_invalid_values(self):
        with pytest.raises(ContractViolation):
            MappingConfig(learning_rate=0.0)
        with pytest.raises(ContractViolation):
            MappingConfig(max_iterations=0)
        with pytest.raises(ContractViolation):
            MappingConfig(grad_ratio_threshold=1.5)
        with pytest.raises(ContractViolation):
            MappingConfig(criterion="entropy")

    def test_default_neff_threshold(self):
        cfg = MappingConfig()
        assert cfg.resolved_neff_threshold(20) == 18.0
        cfg2 = MappingConfig(neff_threshold=5.0)
        assert cfg2.resolved_neff_threshold(20) == 5.0
        with pytest.raises(ContractViolation):
            MappingConfig(neff_threshold=30.0).resolved_neff_threshold(20)


class TestCheckConvergence:
    def test_empty_trace_rejected(self):
        with pytest.raises(ContractViolation):
            check_convergence(MappingConfig(criterion="max_iter"), [])

    def test_max_iter(self):
        cfg = MappingConfig(criterion="max_iter", max_iterations=3)
        assert not check_convergence(cfg, [1.0, 1.0])
        assert check_convergence(cfg, [1.0, 1.0, 1.0])

    def test_grad_ratio_zero_initial(self):
        cfg = MappingConfig(criterion="grad_ratio")
        assert check_convergence(cfg, [0.0])

    def test_grad_ratio_geometric_decay(self):
        cfg = MappingConfig(criterion="grad_ratio", max_iterations=1000)
        trace = []
        stop_at = None
        for i in range(60):
            trace.append(0.9**i)
            if check_convergence(cfg, trace):
                stop_at = i
                break
        assert stop_at == 26  # 0.9^26 ~ 0.0646 < 0.07

    def test_neff_threshold(self):
        cfg = MappingConfig(criterion="neff")
        assert check_convergence(cfg, [1.0], neff_trace=[20.0], n_particles=20)
        assert not check_convergence(cfg, [1.0], neff_trace=[17.0], n_particles=20)
        with pytest.raises(ContractViolation):
            check_convergence(cfg, [1.0], neff_trace=None, n_particles=20)


class TestMappingCycle:
    def test_single_particle_converges_to_posterior_mode(self):
        ssm = gaussian_ssm_1d()
        kernel = GaussianKernel.from_model_error(ssm.q, 1.0)
        prior = PriorMixture(np.array([[0.0]]), ssm.q)
        forecast = Ensemble.equal_weight(np.array([[0.0]]))
        cfg = MappingConfig(optimizer="sgd", learning_rate=0.1,
                            max_iterations=200, criterion="max_iter")
        result = mapping_cycle(ssm, prior, forecast, np.array([2.0]), kernel, cfg)
        assert result.ensemble.states[0, 0] == pytest.approx(1.0, abs=1e-4)

    def test_gaussian_ensemble_moments(self):
        # 50 particles on a 1-D Gaussian posterior: mean within 10%,
        # variance within 15% of the closed form
        rng = np.random.default_rng(3)
        ssm = gaussian_ssm_1d(q=1.0, r=1.0)
        kernel = GaussianKernel.from_model_error(ssm.q, 1.0)
        center, y = 0.0, 2.0
        prior = PriorMixture(np.full((50, 1), center), ssm.q)
        forecast = Ensemble.equal_weight(center + rng.standard_normal((50, 1)))
        cfg = MappingConfig(optimizer="adadelta", learning_rate=0.03,
                            max_iterations=200, criterion="max_iter")
        result = mapping_cycle(ssm, prior, forecast, np.array([y]), kernel, cfg)
        post_mean, post_var = 1.0, 0.5
        states = result.ensemble.states[:, 0]
        assert abs(states.mean() - post_mean) / post_mean < 0.10
        assert abs(states.var() - post_var) / post_var < 0.15

    def test_gradient_norm_drops_at_stationarity(self):
        rng = np.random.default_rng(4)
        ssm = gaussian_ssm_1d()
        kernel = GaussianKernel.from_model_error(ssm.q, 1.0)
        prior = PriorMixture(np.zeros((30, 1)), ssm.q)
        forecast = Ensemble.equal_weight(rng.standard_normal((30, 1)))
        cfg = MappingConfig(optimizer="sgd", learning_rate=0.05,
                            max_iterations=500, criterion="max_iter")
        result = mapping_cycle(ssm, prior, forecast, np.array([2.0]), kernel, cfg)
        assert result.grad_norm_trace[-1] < 1e-3 * result.grad_norm_trace[0]

    def test_neff_criterion_stops_early(self):
        rng = np.random.default_rng(5)
        ssm = gaussian_ssm_1d()
        kernel = GaussianKernel.from_model_error(ssm.q, 1.0)
        prior = PriorMixture(np.zeros((20, 1)), ssm.q)
        forecast = Ensemble.equal_weight(rng.standard_normal((20, 1)))
        cfg = MappingConfig(optimizer="adadelta", criterion="neff",
                            max_iterations=100)
        result = mapping_cycle(ssm, prior, forecast, np.array([0.5]), kernel, cfg)
        assert result.iterations < 100
        assert result.neff_trace[-1] >= 18.0

    def test_output_equal_weight(self):
        rng = np.random.default_rng(6)
        ssm = gaussian_ssm_1d()
        kernel = GaussianKernel.from_model_error(ssm.q, 1.0)
        prior = PriorMixture(np.zeros((5, 1)), ssm.q)
        forecast = Ensemble.equal_weight(rng.standard_normal((5, 1)))
        result = mapping_cycle(ssm, prior, forecast, np.array([1.0]), kernel,
                               MappingConfig(criterion="max_iter",
                                             max_iterations=5))
        assert result.ensemble.is_equal_weight()

    def test_trace_retention(self):
        rng = np.random.default_rng(7)
        ssm = gaussian_ssm_1d()
        kernel = GaussianKernel.from_model_error(ssm.q, 1.0)
        prior = PriorMixture(np.zeros((4, 1)), ssm.q)
        forecast = Ensemble.equal_weight(rng.standard_normal((4, 1)))
        cfg = MappingConfig(optimizer="sgd", learning_rate=0.05,
                            criterion="max_iter", max_iterations=6,
                            keep_trace=True)
        result = mapping_cycle(ssm, prior, forecast, np.array([1.0]), kernel, cfg)
        assert len(result.trace.positions) == 7
        assert len(result.trace.epsilons) == 6
        assert all(e == 0.05 for e in result.trace.epsilons)
