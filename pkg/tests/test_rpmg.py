import numpy as np
import pytest

from viofusion.geometry import (
    euler_to_matrix,
    geodesic_angle,
    skew,
    so3_exp,
    svd_orthogonalize,
    vee,
)
from viofusion.rpmg import (
    RpmgParams,
    chain_through_euler,
    euler_jacobian,
    fiber_nearest,
    goal_rotation,
    riemannian_grad,
    rotation_loss_grad,
    rpmg_grad,
)

from conftest import random_rotation

PARAMS = RpmgParams(tau=0.25, lam=0.01)


class TestParams:
    def test_defaults(self):
        assert PARAMS.tau == 0.25 and PARAMS.lam == 0.01

    def test_validation(self):
        with pytest.raises(ValueError):
            RpmgParams(tau=0.0)
        with pytest.raises(ValueError):
            RpmgParams(lam=-0.1)


class TestRiemannianGrad:
    def test_zero_gradient(self, rng):
        r = random_rotation(rng)
        np.testing.assert_array_equal(riemannian_grad(r, np.zeros((3, 3))), np.zeros((3, 3)))

    def test_gradient_parallel_to_rotation_vanishes(self, rng):
        r = random_rotation(rng)
        np.testing.assert_array_equal(riemannian_grad(r, r), np.zeros((3, 3)))

    def test_skew_symmetry_tight(self, rng):
        for _ in range(200):
            a = riemannian_grad(random_rotation(rng), rng.normal(size=(3, 3)))
            assert np.max(np.abs(a + a.T)) < 1e-12

    def test_matches_tangent_basis_projection_oracle(self, rng):
        # Oracle: project g onto the 9-dim tangent basis {R @ G_k / sqrt(2)}
        # (G_k the elementary skew matrices), then pull back by R^T.
        gens = [skew(e) for e in np.eye(3)]
        for _ in range(50):
            r = random_rotation(rng)
            g = rng.normal(size=(3, 3))
            proj = np.zeros((3, 3))
            for gk in gens:
                basis = r @ gk / np.sqrt(2.0)
                proj += float(np.sum(basis * g)) * basis
            np.testing.assert_allclose(riemannian_grad(r, g), r.T @ proj, atol=1e-12)


class TestGoalRotation:
    def test_zero_tangent_returns_input_exactly(self, rng):
        r = random_rotation(rng)
        np.testing.assert_array_equal(goal_rotation(r, np.zeros((3, 3)), PARAMS), r)

    def test_unit_tau_z_axis(self):
        theta = 0.7
        a = skew([0.0, 0.0, theta])
        r_g = goal_rotation(np.eye(3), a, RpmgParams(tau=1.0, lam=0.0))
        np.testing.assert_allclose(r_g, so3_exp([0.0, 0.0, -theta]), atol=1e-15)

    def test_step_size_equals_tau_times_tangent_norm(self, rng):
        for _ in range(50):
            r = random_rotation(rng)
            a = skew(rng.normal(scale=0.3, size=3))
            r_g = goal_rotation(r, a, PARAMS)
            assert abs(geodesic_angle(r, r_g) - PARAMS.tau * np.linalg.norm(vee(a))) < 1e-9

    def test_rejects_non_skew(self, rng):
        with pytest.raises(ValueError, match="skew"):
            goal_rotation(np.eye(3), rng.normal(size=(3, 3)), PARAMS)


class TestFiberNearest:
    def test_already_on_fiber(self, rng):
        r_g = random_rotation(rng)
        np.testing.assert_array_equal(fiber_nearest(r_g, r_g), r_g)

    def test_psd_scaling_stays_on_fiber(self, rng):
        r_g = random_rotation(rng)
        np.testing.assert_allclose(fiber_nearest(2.0 * r_g, r_g), 2.0 * r_g, atol=1e-12)

    def test_random_search_oracle(self, rng):
        # No sampled fiber element may be closer to x than the projection.
        for _ in range(20):
            x = rng.normal(size=(3, 3))
            r_g = random_rotation(rng)
            x_g = fiber_nearest(x, r_g)
            base = np.linalg.norm(x_g - x)
            scales = np.exp(rng.uniform(-2.0, 1.5, size=100_000))
            ell = rng.normal(size=(100_000, 3, 3)) * scales[:, None, None] / np.sqrt(3.0)
            psd = ell @ np.transpose(ell, (0, 2, 1))
            dists = np.linalg.norm(r_g @ psd - x, axis=(1, 2))
            assert float(dists.min()) >= base - 1e-9

    def test_projects_back_to_goal(self, rng):
        for _ in range(100):
            x = rng.normal(size=(3, 3))
            r_g = random_rotation(rng)
            x_g = fiber_nearest(x, r_g)
            s = (r_g.T @ x_g + x_g.T @ r_g) / 2.0
            if np.linalg.eigvalsh(s).min() > 1e-9:
                np.testing.assert_allclose(svd_orthogonalize(x_g), r_g, atol=1e-9)


class TestLossGrad:
    def test_l1(self, rng):
        r, r_gt = random_rotation(rng), random_rotation(rng)
        np.testing.assert_array_equal(
            rotation_loss_grad(r, r_gt, "L1"), np.sign(r - r_gt) / 9.0
        )

    def test_l2(self, rng):
        r, r_gt = random_rotation(rng), random_rotation(rng)
        np.testing.assert_allclose(
            rotation_loss_grad(r, r_gt, "L2"), 2.0 * (r - r_gt) / 9.0
        )

    def test_bad_norm(self):
        with pytest.raises(ValueError, match="norm"):
            rotation_loss_grad(np.eye(3), np.eye(3), "Linf")


class TestRpmgGrad:
    def test_exact_zero_at_optimum(self, rng):
        for norm in ("L1", "L2"):
            for _ in range(20):
                r_gt = random_rotation(rng)
                grad = rpmg_grad(r_gt, r_gt, PARAMS, norm)
                assert np.array_equal(grad, np.zeros((3, 3)))

    def test_lambda_zero_definition_case(self, rng):
        params = RpmgParams(tau=0.25, lam=0.0)
        for _ in range(20):
            x = random_rotation(rng)
            r_gt = random_rotation(rng)
            r = svd_orthogonalize(x)
            a = riemannian_grad(r, rotation_loss_grad(r, r_gt, "L1"))
            x_g = fiber_nearest(x, goal_rotation(r, a, params))
            np.testing.assert_allclose(rpmg_grad(x, r_gt, params, "L1"), x - x_g, atol=1e-15)

    @pytest.mark.parametrize("norm", ["L1", "L2"])
    def test_empirical_descent(self, rng, norm):
        def loss(x, r_gt):
            diff = svd_orthogonalize(x) - r_gt
            return np.mean(np.abs(diff)) if norm == "L1" else np.mean(diff**2)

        eta = 1e-3
        wins = 0
        for _ in range(1000):
            x = rng.normal(size=(3, 3))
            r_gt = random_rotation(rng)
            before = loss(x, r_gt)
            after = loss(x - eta * rpmg_grad(x, r_gt, PARAMS, norm), r_gt)
            wins += after < before
        assert wins >= 990

    def test_propagates_degenerate_projection(self):
        with pytest.raises(ValueError, match="degenerate"):
            rpmg_grad(np.zeros((3, 3)), np.eye(3), PARAMS, "L1")


class TestChainThroughEuler:
    def test_zero_gradient(self, rng):
        e = rng.normal(size=3)
        np.testing.assert_array_equal(chain_through_euler(e, np.zeros((3, 3))), np.zeros(3))

    def test_jacobian_matches_finite_differences(self, rng):
        h = 1e-6
        for e in [np.zeros(3)] + [rng.uniform(-1.2, 1.2, size=3) for _ in range(20)]:
            jac = euler_jacobian(e)
            for k in range(3):
                step = np.zeros(3)
                step[k] = h
                fd = (euler_to_matrix(e + step) - euler_to_matrix(e - step)) / (2 * h)
                np.testing.assert_allclose(jac[:, k], fd.reshape(9), atol=1e-6)

    def test_transpose_contraction_matches_directional_derivatives(self, rng):
        h = 1e-6
        for _ in range(20):
            e = rng.uniform(-1.2, 1.2, size=3)
            grad_x = rng.normal(size=(3, 3))
            pulled = chain_through_euler(e, grad_x)
            for k in range(3):
                step = np.zeros(3)
                step[k] = h
                fd = np.sum(grad_x * (euler_to_matrix(e + step) - euler_to_matrix(e - step))) / (2 * h)
                assert abs(pulled[k] - fd) < 1e-6
