import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from funcapprox.gradients import mle_model_gradient
from funcapprox.losses import inner_loss, mle_model_loss, model_mse, outer_loss, vep_model_loss
from funcapprox.models import Batch, MlpSpec
from funcapprox.networks import ModelNetworks, QNetworkPair, init_mlp
from mdp_core.exceptions import DomainError

from .test_networks import numpy_mlp

STATE_DIM = 3
N_ACTIONS = 2


def soft_max_value(values: np.ndarray, alpha: float) -> np.ndarray:
    peak = values.max(axis=-1, keepdims=True)
    return (peak + alpha * np.log(np.exp((values - peak) / alpha).sum(axis=-1, keepdims=True))).ravel()


def build(seed: int, double_q: bool = True):
    rng = np.random.default_rng(seed)
    pair = QNetworkPair(MlpSpec(STATE_DIM, N_ACTIONS, (5,)), rng, ema_tau=0.1, double_q=double_q)
    pair.target = [[w + 0.2 * rng.normal(size=w.shape) for w in net] for net in pair.target]
    model = ModelNetworks(STATE_DIM, N_ACTIONS, (4,), rng)
    return rng, pair, model


def random_batch(rng: np.random.Generator, size: int, dones=None) -> Batch:
    return Batch(
        states=rng.normal(size=(size, STATE_DIM)),
        actions=rng.integers(N_ACTIONS, size=size),
        rewards=rng.normal(size=size),
        next_states=rng.normal(size=(size, STATE_DIM)),
        dones=np.zeros(size) if dones is None else np.asarray(dones, dtype=np.float64),
    )


def model_outputs(model: ModelNetworks, states, actions):
    inputs = np.concatenate([states, np.eye(N_ACTIONS)[actions]], axis=-1)
    return numpy_mlp(model.dynamics, inputs), numpy_mlp(model.rewards, inputs).ravel()


def composed_target(pair: QNetworkPair, next_states) -> np.ndarray:
    return np.minimum.reduce([numpy_mlp(net, next_states) for net in pair.target])


def exact_batch(model: ModelNetworks, rng: np.random.Generator, size: int, dones=None) -> Batch:
    """Transitions the model reproduces exactly."""
    states = rng.normal(size=(size, STATE_DIM))
    actions = rng.integers(N_ACTIONS, size=size)
    next_states, rewards = model_outputs(model, states, actions)
    dones = np.zeros(size) if dones is None else np.asarray(dones, dtype=np.float64)
    return Batch(states, actions, rewards, next_states, dones)


class InnerLossTestCase(SimpleTestCase):

    def test_zero_at_fixed_point(self):
        """Q equal to the model backup on a one-transition batch has (numerically) zero loss."""
        rng, pair, model = build(0, double_q=False)
        states, actions = rng.normal(size=(1, STATE_DIM)), np.array([1])
        next_states, rewards = model_outputs(model, states, actions)
        target = rewards + 0.9 * soft_max_value(composed_target(pair, next_states), 0.5)
        current = numpy_mlp(pair.online[0], states)[0, 1]
        bias = pair.online[0][-1].copy()
        bias[1] += target[0] - current
        pair.online[0][-1] = bias
        loss = inner_loss(model, pair, states, actions, alpha=0.5, gamma=0.9)
        self.assertLessEqual(float(loss.data), 1e-10)

    def test_gamma_zero_is_reward_regression(self):
        """With no discount the loss is the mean squared gap between Q and the model reward."""
        rng, pair, model = build(1)
        states, actions = rng.normal(size=(6, STATE_DIM)), rng.integers(N_ACTIONS, size=6)
        _, rewards = model_outputs(model, states, actions)
        expected = np.mean([
            np.mean((numpy_mlp(net, states)[np.arange(6), actions] - rewards) ** 2) for net in pair.online
        ])
        loss = inner_loss(model, pair, states, actions, alpha=0.1, gamma=0.0)
        assert_allclose(float(loss.data), expected, rtol=1e-12)

    def test_brute_force(self):
        """A batch of four matches a transition-by-transition recomputation."""
        rng, pair, model = build(2)
        states, actions = rng.normal(size=(4, STATE_DIM)), rng.integers(N_ACTIONS, size=4)
        alpha, gamma = 0.3, 0.95
        per_net = []
        for net in pair.online:
            errors = []
            for index in range(4):
                state, action = states[index:index + 1], actions[index:index + 1]
                next_state, reward = model_outputs(model, state, action)
                bootstrap = soft_max_value(composed_target(pair, next_state), alpha)[0]
                q_value = numpy_mlp(net, state)[0, action[0]]
                errors.append((q_value - reward[0] - gamma * bootstrap) ** 2)
            per_net.append(np.mean(errors))
        loss = inner_loss(model, pair, states, actions, alpha, gamma)
        assert_allclose(float(loss.data), np.mean(per_net), rtol=1e-10)
        self.assertGreaterEqual(float(loss.data), 0.0)


class OuterLossTestCase(SimpleTestCase):

    def test_terminal_targets_are_rewards(self):
        """When every transition is terminal the target is the reward alone."""
        rng, pair, _ = build(3)
        batch = random_batch(rng, 5, dones=np.ones(5))
        expected = np.mean([
            np.mean((numpy_mlp(net, batch.states)[np.arange(5), batch.actions] - batch.rewards) ** 2)
            for net in pair.online
        ])
        assert_allclose(float(outer_loss(pair, batch, alpha=0.2, gamma=0.99).data), expected, rtol=1e-12)
        assert_allclose(float(outer_loss(pair, random_batch(np.random.default_rng(3), 5), 0.2, 0.0).data),
                        float(outer_loss(pair, random_batch(np.random.default_rng(3), 5, np.ones(5)), 0.2, 0.5).data),
                        rtol=1e-12)

    def test_brute_force(self):
        """A batch of four with mixed terminal flags matches a direct recomputation."""
        rng, pair, _ = build(4)
        batch = random_batch(rng, 4, dones=[0, 1, 0, 1])
        alpha, gamma = 0.4, 0.9
        bootstrap = soft_max_value(composed_target(pair, batch.next_states), alpha)
        targets = batch.rewards + gamma * (1.0 - batch.dones) * bootstrap
        expected = np.mean([
            np.mean((numpy_mlp(net, batch.states)[np.arange(4), batch.actions] - targets) ** 2)
            for net in pair.online
        ])
        assert_allclose(float(outer_loss(pair, batch, alpha, gamma).data), expected, rtol=1e-10)


class MleLossTestCase(SimpleTestCase):

    def test_perfect_fit(self):
        """A model reproducing the batch has zero losses and a vanishing gradient."""
        rng, _, model = build(5)
        batch = exact_batch(model, rng, 8)
        dynamics_loss, reward_loss = mle_model_loss(model, batch)
        self.assertLessEqual(float(dynamics_loss.data), 1e-20)
        self.assertLessEqual(float(reward_loss.data), 1e-20)
        for array in mle_model_gradient(model, batch):
            self.assertLessEqual(float(np.max(np.abs(array))), 1e-8)
        self.assertLessEqual(model_mse(model, batch), 1e-20)

    def test_reward_offset(self):
        """Shifting the reward head by one costs exactly one in reward loss."""
        rng, _, model = build(6)
        batch = exact_batch(model, rng, 8)
        bias = model.rewards[-1].copy()
        bias += 1.0
        model.rewards[-1] = bias
        _, reward_loss = mle_model_loss(model, batch)
        assert_allclose(float(reward_loss.data), 1.0, rtol=1e-12)

    def test_model_mse_brute_force(self):
        """Held-out MSE is the mean squared Euclidean next-state error."""
        rng, _, model = build(7)
        batch = random_batch(rng, 6)
        predicted, _ = model_outputs(model, batch.states, batch.actions)
        expected = np.mean(np.sum((predicted - batch.next_states) ** 2, axis=-1))
        assert_allclose(model_mse(model, batch), expected, rtol=1e-12)


class VepLossTestCase(SimpleTestCase):

    def setUp(self):
        rng = np.random.default_rng(8)
        self.value_fns = [init_mlp(MlpSpec(STATE_DIM, 1, (5,)), rng) for _ in range(2)]

    def test_exact_model(self):
        """A model reproducing rewards and next states has zero loss."""
        rng, _, model = build(9)
        batch = exact_batch(model, rng, 6, dones=[0, 0, 1, 0, 1, 0])
        loss = vep_model_loss(model, batch, [0, 1], self.value_fns, gamma=0.99)
        self.assertLessEqual(float(loss.data), 1e-10)

    def test_reward_offset(self):
        """An offset of c on the reward head with exact dynamics costs c squared."""
        rng, _, model = build(10)
        batch = exact_batch(model, rng, 7)
        bias = model.rewards[-1].copy()
        bias += 0.3
        model.rewards[-1] = bias
        loss = vep_model_loss(model, batch, [0, 1], self.value_fns[:1], gamma=0.99)
        assert_allclose(float(loss.data), 0.09, rtol=1e-9)

    def test_brute_force(self):
        """Three transitions, two policies and two value functions match a direct sum."""
        rng, _, model = build(11)
        batch = random_batch(rng, 3, dones=[0, 1, 0])
        gamma = 0.9
        predicted_next, predicted_reward = model_outputs(model, batch.states, batch.actions)
        total, count = 0.0, 0
        for action in (0, 1):
            for index in range(3):
                if batch.actions[index] != action:
                    continue
                count += 1
                for value_params in self.value_fns:
                    scale = gamma * (1.0 - batch.dones[index])
                    sampled = batch.rewards[index] + scale * numpy_mlp(value_params, batch.next_states[index:index + 1])[0, 0]
                    modelled = predicted_reward[index] + scale * numpy_mlp(value_params, predicted_next[index:index + 1])[0, 0]
                    total += (modelled - sampled) ** 2
        expected = total / (len(self.value_fns) * count)
        loss = vep_model_loss(model, batch, [0, 1], self.value_fns, gamma)
        assert_allclose(float(loss.data), expected, rtol=1e-10)

    def test_policy_restriction(self):
        """Only transitions taking a listed policy's action contribute."""
        rng, _, model = build(12)
        batch = random_batch(rng, 5)
        batch = Batch(batch.states, np.zeros(5, dtype=np.int64), batch.rewards, batch.next_states, batch.dones)
        self.assertEqual(float(vep_model_loss(model, batch, [1], self.value_fns, 0.9).data), 0.0)
        self.assertGreater(float(vep_model_loss(model, batch, [0], self.value_fns, 0.9).data), 0.0)

    def test_needs_policies_and_values(self):
        """Empty policy or value-function sets are rejected."""
        rng, _, model = build(13)
        batch = random_batch(rng, 2)
        with self.assertRaises(DomainError):
            vep_model_loss(model, batch, [], self.value_fns, 0.9)
        with self.assertRaises(DomainError):
            vep_model_loss(model, batch, [0], [], 0.9)
