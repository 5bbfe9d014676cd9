import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from autodiff import tensor as T
from autodiff.functional import grad
from autodiff.models import RootSolveConfig
from autodiff.solvers import root_solve
from autodiff.tensor import Tensor
from envs.tabular import default_two_state_mdp, random_tabular_mdp
from mdp_core.exceptions import DomainError, PreconditionError
from mdp_core.models import QTable, TabularMDP, TabularModelParams
from mdp_core.operators import expected_return, softmax_probs, solve_fixed_point
from tabular_omd.gradients import (
    ift_fixed_point_jacobian,
    mle_tabular_gradient,
    mle_tabular_loss,
    model_bellman_residual,
    omd_bellman_gradient,
    omd_gradient_for,
    omd_objective_and_gradient,
    omd_return_gradient,
    project_norm_ball,
    solve_model_fixed_point,
    true_bellman_error,
)
from tabular_omd.models import TabularAgentKind

FD_STEP = 1e-5
FD_TOL = 2e-13


def fd_gradient(objective, theta: TabularModelParams) -> np.ndarray:
    """Central differences of a scalar function of the flat parameter vector."""
    flat = theta.flatten()
    result = np.zeros_like(flat)
    for index in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[index] += FD_STEP
        minus[index] -= FD_STEP
        result[index] = (
            objective(TabularModelParams.from_flat(plus, theta.n_states, theta.n_actions))
            - objective(TabularModelParams.from_flat(minus, theta.n_states, theta.n_actions))
        ) / (2 * FD_STEP)
    return result


def seeded_instance(seed: int):
    rng = np.random.default_rng(1000 + seed)
    n_states = 2 + seed % 4
    n_actions = 2 + (seed // 4) % 4
    mdp = random_tabular_mdp(n_states, n_actions, seed)
    theta = TabularModelParams.initial(n_states, n_actions, rng, scale=0.5)
    alpha = float(rng.uniform(0.5, 1.0))
    return mdp, theta, alpha


class FixedPointJacobianTestCase(SimpleTestCase):

    def test_zero_discount_is_identity_on_rewards(self):
        """With gamma = 0 a reward perturbation moves Q one for one and logits do nothing."""
        rng = np.random.default_rng(0)
        theta = TabularModelParams.initial(3, 2, rng, scale=1.0)
        q_star = solve_model_fixed_point(theta, 0.0, 0.5)
        dense = ift_fixed_point_jacobian(theta, q_star, 0.5, 0.0).dense()
        n_logits = 3 * 2 * 3
        assert_allclose(dense[:, n_logits:], np.eye(6))
        assert_allclose(dense[:, :n_logits], np.zeros((6, n_logits)))

    def test_single_state_geometric_series(self):
        """One state, one action and gamma = 0.5 give dQ*/dr = 2."""
        theta = TabularModelParams(np.zeros((1, 1, 1)), np.array([[0.7]]))
        q_star = solve_model_fixed_point(theta, 0.5, 1.0)
        gradient = ift_fixed_point_jacobian(theta, q_star, 1.0, 0.5).vjp(np.ones((1, 1)))
        self.assertAlmostEqual(float(gradient.model_rewards[0, 0]), 2.0, places=10)
        self.assertEqual(float(gradient.logits[0, 0, 0]), 0.0)

    def test_vjp_matches_finite_differences(self):
        """v^T dphi/dtheta agrees with differences of the fixed-point solver."""
        rng = np.random.default_rng(3)
        theta = TabularModelParams.initial(3, 2, rng, scale=1.0)
        v = rng.normal(size=(3, 2))
        q_star = solve_model_fixed_point(theta, 0.9, 0.7, tol=FD_TOL)
        analytic = ift_fixed_point_jacobian(theta, q_star, 0.7, 0.9).vjp(v).flatten()

        def probe(candidate):
            return float(np.sum(v * solve_model_fixed_point(candidate, 0.9, 0.7, q_init=q_star, tol=FD_TOL).values))

        assert_allclose(analytic, fd_gradient(probe, theta), rtol=1e-5, atol=1e-6)

    def test_implicit_function_identity(self):
        """df/dtheta + df/dQ dphi/dtheta vanishes, with both partials taken by differences."""
        rng = np.random.default_rng(4)
        gamma, alpha = 0.8, 0.6
        theta = TabularModelParams.initial(3, 3, rng, scale=1.0)
        q_star = solve_model_fixed_point(theta, gamma, alpha, tol=FD_TOL).values
        dense = ift_fixed_point_jacobian(theta, q_star, alpha, gamma).dense()

        flat = theta.flatten()
        df_dtheta = np.zeros((q_star.size, flat.size))
        for index in range(flat.size):
            plus, minus = flat.copy(), flat.copy()
            plus[index] += FD_STEP
            minus[index] -= FD_STEP
            df_dtheta[:, index] = (
                model_bellman_residual(TabularModelParams.from_flat(plus, 3, 3), q_star, gamma, alpha)
                - model_bellman_residual(TabularModelParams.from_flat(minus, 3, 3), q_star, gamma, alpha)
            ).ravel() / (2 * FD_STEP)

        df_dq = np.zeros((q_star.size, q_star.size))
        for index in range(q_star.size):
            plus, minus = q_star.ravel().copy(), q_star.ravel().copy()
            plus[index] += FD_STEP
            minus[index] -= FD_STEP
            df_dq[:, index] = (
                model_bellman_residual(theta, plus.reshape(3, 3), gamma, alpha)
                - model_bellman_residual(theta, minus.reshape(3, 3), gamma, alpha)
            ).ravel() / (2 * FD_STEP)

        assert_allclose(df_dtheta + df_dq @ dense, np.zeros_like(df_dtheta), atol=1e-6)

    def test_matrix_free_matches_dense(self):
        """The Neumann series path agrees with the dense solve and with jvp duality."""
        rng = np.random.default_rng(5)
        theta = TabularModelParams.initial(4, 3, rng, scale=1.0)
        q_star = solve_model_fixed_point(theta, 0.9, 0.5)
        dense_map = ift_fixed_point_jacobian(theta, q_star, 0.5, 0.9)
        matrix_free = ift_fixed_point_jacobian(theta, q_star, 0.5, 0.9)
        matrix_free.dense_limit = 0

        v = rng.normal(size=(4, 3))
        direction = TabularModelParams.initial(4, 3, rng, scale=1.0)
        assert_allclose(matrix_free.vjp(v).flatten(), dense_map.vjp(v).flatten(), rtol=1e-8, atol=1e-9)
        assert_allclose(matrix_free.jvp(direction), dense_map.jvp(direction), rtol=1e-8, atol=1e-9)
        self.assertAlmostEqual(
            float(np.sum(v * dense_map.jvp(direction))),
            float(dense_map.vjp(v).flatten() @ direction.flatten()),
            places=9,
        )

    def test_identity_mode_skips_inverse(self):
        """With the identity approximation the product is v^T dB/dtheta."""
        rng = np.random.default_rng(6)
        theta = TabularModelParams.initial(3, 2, rng, scale=1.0)
        q_star = solve_model_fixed_point(theta, 0.9, 0.5)
        jacobian = ift_fixed_point_jacobian(theta, q_star, 0.5, 0.9, use_identity_inverse=True)
        v = rng.normal(size=(3, 2))
        assert_allclose(jacobian.vjp(v).flatten(), jacobian.operator_jacobian().T @ v.ravel(), rtol=1e-12, atol=1e-14)

    def test_rejects_unconverged_point(self):
        """A Q-table that is not a fixed point is refused."""
        theta = TabularModelParams.initial(2, 2, np.random.default_rng(0))
        with self.assertRaises(PreconditionError):
            ift_fixed_point_jacobian(theta, QTable.zeros(2, 2), 1.0, 0.9)

    def test_dense_refused_above_limit(self):
        """Materialising the Jacobian is limited to small instances."""
        theta = TabularModelParams.initial(9, 8, np.random.default_rng(0))
        q_star = solve_model_fixed_point(theta, 0.5, 1.0)
        with self.assertRaises(DomainError):
            ift_fixed_point_jacobian(theta, q_star, 1.0, 0.5).dense()

    def test_agrees_with_generic_root_solve(self):
        """The tabular Jacobian matches exact-mode root_solve on the same residual at 1e-6."""
        rng = np.random.default_rng(7)
        gamma, alpha = 0.9, 0.5
        theta = TabularModelParams.initial(3, 2, rng, scale=1.0)
        v = rng.normal(size=(3, 2))

        def residual(params, w):
            dynamics = T.softmax(params[0], axis=-1)
            values = T.logsumexp(w, axis=-1, alpha=alpha)
            return w - (params[1] + gamma * (dynamics * values).sum(axis=-1))

        def solver(w0, params):
            model = TabularModelParams(params[0], params[1])
            return solve_fixed_point(model.dynamics(), model.model_rewards, gamma, alpha, tol=1e-12).values

        logits = Tensor(theta.logits, requires_grad=True)
        rewards = Tensor(theta.model_rewards, requires_grad=True)
        config = RootSolveConfig(use_identity_inverse=False, linear_solver='dense')
        w_star = root_solve(residual, np.zeros((3, 2)), [logits, rewards], solver, config)
        generic = grad((w_star * v).sum(), [logits, rewards])

        q_star = solve_model_fixed_point(theta, gamma, alpha, tol=1e-12)
        tabular = ift_fixed_point_jacobian(theta, q_star, alpha, gamma).vjp(v)
        assert_allclose(generic[0].data, tabular.logits, rtol=1e-6, atol=1e-10)
        assert_allclose(generic[1].data, tabular.model_rewards, rtol=1e-6, atol=1e-10)


class OmdGradientTestCase(SimpleTestCase):

    def test_return_gradient_matches_finite_differences(self):
        """The return gradient matches central differences on 20 seeded instances."""
        for seed in range(20):
            mdp, theta, alpha = seeded_instance(seed)
            q_star = solve_model_fixed_point(theta, mdp.gamma, alpha, tol=FD_TOL)

            def objective(candidate):
                q = solve_model_fixed_point(candidate, mdp.gamma, alpha, q_init=q_star, tol=FD_TOL)
                return expected_return(mdp, softmax_probs(q.values, alpha))

            analytic = omd_return_gradient(mdp, theta, alpha, tol=FD_TOL).flatten()
            assert_allclose(analytic, fd_gradient(objective, theta), rtol=1e-4, atol=1e-6,
                            err_msg=f"seed {seed}")

    def test_bellman_gradient_matches_finite_differences(self):
        """The Bellman-error gradient matches central differences on 20 seeded instances."""
        for seed in range(20):
            mdp, theta, alpha = seeded_instance(seed)
            q_star = solve_model_fixed_point(theta, mdp.gamma, alpha, tol=FD_TOL)

            def objective(candidate):
                q = solve_model_fixed_point(candidate, mdp.gamma, alpha, q_init=q_star, tol=FD_TOL)
                return float(np.sum(true_bellman_error(mdp, q.values, alpha) ** 2))

            analytic = omd_bellman_gradient(mdp, theta, alpha, tol=FD_TOL).flatten()
            assert_allclose(analytic, fd_gradient(objective, theta), rtol=1e-4, atol=1e-6,
                            err_msg=f"seed {seed}")

    def test_flat_rewards_flat_return(self):
        """When every reward is equal no ascent step changes the return."""
        mdp = random_tabular_mdp(3, 2, seed=11)
        mdp = mdp.with_rewards(np.full((3, 2), 0.4))
        theta = TabularModelParams(TabularModelParams.initial(3, 2, np.random.default_rng(1)).logits, mdp.rewards)
        alpha = 0.5

        def evaluate(params):
            q = solve_model_fixed_point(params, mdp.gamma, alpha)
            return expected_return(mdp, softmax_probs(q.values, alpha))

        gradient = omd_return_gradient(mdp, theta, alpha)
        stepped = TabularModelParams.from_flat(theta.flatten() + 0.1 * gradient.flatten(), 3, 2)
        self.assertLessEqual(abs(evaluate(stepped) - evaluate(theta)), 1e-9)

    def test_near_stationary_at_optimal_model(self):
        """At the true model with a near-deterministic policy an ascent step barely moves J."""
        mdp = default_two_state_mdp()
        theta = TabularModelParams.from_mdp(mdp)
        alpha = 1e-6

        def evaluate(params):
            q = solve_model_fixed_point(params, mdp.gamma, alpha)
            return expected_return(mdp, softmax_probs(q.values, alpha))

        gradient = omd_return_gradient(mdp, theta, alpha)
        stepped = TabularModelParams.from_flat(theta.flatten() + 0.1 * gradient.flatten(), 2, 2)
        self.assertLessEqual(abs(evaluate(stepped) - evaluate(theta)), 1e-6)

    def test_bellman_minimum_at_true_model(self):
        """The true model attains zero Bellman error and a vanishing gradient."""
        mdp = random_tabular_mdp(3, 2, seed=2)
        theta = TabularModelParams.from_mdp(mdp)
        result = omd_objective_and_gradient(TabularAgentKind.OMD_BELLMAN, mdp, theta, 0.5)
        self.assertLessEqual(result.objective, 1e-12)
        self.assertLessEqual(result.gradient.norm(), 1e-6)

    def test_zero_discount_ignores_logits(self):
        """With gamma = 0 and exact rewards the loss is zero whatever the logits."""
        mdp = random_tabular_mdp(3, 2, seed=4, gamma=0.0)
        logits = np.random.default_rng(4).normal(size=(3, 2, 3))
        result = omd_objective_and_gradient(
            TabularAgentKind.OMD_BELLMAN, mdp, TabularModelParams(logits, mdp.rewards), 0.5
        )
        self.assertEqual(result.objective, 0.0)
        assert_allclose(result.gradient.logits, np.zeros((3, 2, 3)), atol=0.0)

    def test_warm_start_matches_cold_start(self):
        """Reusing a previous fixed point leaves the gradient unchanged up to solver tolerance."""
        mdp, theta, alpha = seeded_instance(3)
        nearby = TabularModelParams.from_flat(theta.flatten() + 0.05, theta.n_states, theta.n_actions)
        warm = solve_model_fixed_point(nearby, mdp.gamma, alpha)
        cold = omd_return_gradient(mdp, theta, alpha).flatten()
        warmed = omd_return_gradient(mdp, theta, alpha, q_init=warm).flatten()
        assert_allclose(warmed, cold, rtol=1e-6, atol=1e-7)

    def test_noise_skips_residual_check(self):
        """Perturbed fixed points are accepted when noise is requested and are seeded."""
        mdp, theta, alpha = seeded_instance(1)
        first = omd_return_gradient(mdp, theta, alpha, noise_sigma=0.5, rng=np.random.default_rng(9))
        second = omd_return_gradient(mdp, theta, alpha, noise_sigma=0.5, rng=np.random.default_rng(9))
        clean = omd_return_gradient(mdp, theta, alpha)
        assert_allclose(first.flatten(), second.flatten())
        self.assertFalse(np.allclose(first.flatten(), clean.flatten()))

    def test_dispatch(self):
        """Agent kinds map to their gradient functions; MLE has none."""
        self.assertIs(omd_gradient_for('omd_return'), omd_return_gradient)
        self.assertIs(omd_gradient_for(TabularAgentKind.OMD_BELLMAN), omd_bellman_gradient)
        with self.assertRaises(DomainError):
            omd_gradient_for('MLE')


class ProjectionTestCase(SimpleTestCase):

    def test_outside_ball_is_rescaled(self):
        """Norm 2 onto kappa 1 halves the parameters."""
        theta = TabularModelParams.from_flat(np.array([0.0] * 4 + [2.0, 0.0]), 2, 1)
        projected = project_norm_ball(theta, 1.0)
        assert_allclose(projected.flatten(), theta.flatten() / 2)

    def test_inside_ball_unchanged(self):
        """Parameters already inside the ball are returned as they are."""
        theta = TabularModelParams.from_flat(np.array([0.3, 0.4] + [0.0] * 4), 2, 1)
        self.assertIs(project_norm_ball(theta, 1.0), theta)

    def test_zero_parameters(self):
        """The origin projects to itself without NaNs."""
        projected = project_norm_ball(TabularModelParams.zeros(2, 2), 1.0)
        assert_allclose(projected.flatten(), np.zeros(12))

    def test_idempotent_and_bounded(self):
        """Projection stays inside the ball and a second projection changes nothing."""
        rng = np.random.default_rng(0)
        for _ in range(100):
            theta = TabularModelParams.initial(3, 2, rng, scale=float(rng.uniform(0.1, 10.0)))
            kappa = float(rng.uniform(0.01, 5.0))
            once = project_norm_ball(theta, kappa)
            twice = project_norm_ball(once, kappa)
            self.assertLessEqual(once.norm(), kappa + 1e-12)
            self.assertTrue(np.array_equal(once.flatten(), twice.flatten()))
            cosine = once.flatten() @ theta.flatten() / (once.norm() * theta.norm())
            self.assertAlmostEqual(cosine, 1.0, places=12)

    def test_rejects_non_positive_radius(self):
        """kappa must be positive."""
        with self.assertRaises(DomainError):
            project_norm_ball(TabularModelParams.zeros(2, 2), 0.0)


class MleTabularTestCase(SimpleTestCase):

    def test_exact_model(self):
        """Parameters reproducing the MDP have zero loss."""
        mdp = random_tabular_mdp(4, 3, seed=0)
        avg_kl, reward_mse = mle_tabular_loss(mdp, TabularModelParams.from_mdp(mdp))
        self.assertAlmostEqual(avg_kl, 0.0, places=12)
        self.assertEqual(reward_mse, 0.0)

    def test_uniform_against_deterministic(self):
        """A uniform model of a deterministic MDP over 4 states costs ln 4."""
        transitions = np.zeros((4, 2, 4))
        for s in range(4):
            transitions[s, :, (s + 1) % 4] = 1.0
        mdp = TabularMDP(transitions, np.zeros((4, 2)), 0.9, np.full(4, 0.25))
        avg_kl, _ = mle_tabular_loss(mdp, TabularModelParams.zeros(4, 2))
        self.assertAlmostEqual(avg_kl, np.log(4.0), places=12)

    def test_reward_offset(self):
        """r_theta = r + 1 gives reward_mse = 1."""
        mdp = random_tabular_mdp(3, 2, seed=1)
        theta = TabularModelParams.from_mdp(mdp)
        _, reward_mse = mle_tabular_loss(mdp, TabularModelParams(theta.logits, mdp.rewards + 1.0))
        self.assertAlmostEqual(reward_mse, 1.0, places=12)

    def test_missing_support_is_infinite(self):
        """A model with no mass on a reachable transition has infinite KL."""
        mdp = random_tabular_mdp(2, 1, seed=0)
        logits = np.zeros((2, 1, 2))
        logits[0, 0, 1] = -np.inf
        avg_kl, _ = mle_tabular_loss(mdp, TabularModelParams(logits, mdp.rewards))
        self.assertEqual(avg_kl, float('inf'))

    def test_gradient_matches_finite_differences(self):
        """The closed-form gradient matches differences of avg_kl + reward_mse."""
        mdp = random_tabular_mdp(3, 2, seed=5)
        theta = TabularModelParams.initial(3, 2, np.random.default_rng(5), scale=1.0)
        numeric = fd_gradient(lambda params: sum(mle_tabular_loss(mdp, params)), theta)
        assert_allclose(mle_tabular_gradient(mdp, theta).flatten(), numeric, rtol=1e-5, atol=1e-9)
