import os
import sys
import unittest

import numpy as np

# Add the project root to the Python path to allow for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.mpgpmd.core.evaluation import (
    deterministic_occupancies,
    deterministic_values,
    evaluate,
    occupancy_measure,
    perf_diff_check,
    policy_gradient,
    policy_gradient_entry,
    policy_increment_residual,
    total_potential,
)
from src.mpgpmd.errors import DimensionMismatchError, MissingPotentialError
from src.mpgpmd.games.generators import (
    make_coordination_game,
    make_dummy_term_mpg,
    make_identical_interest,
)
from src.mpgpmd.games.model import JointPolicy, MarkovGame, PotentialSpec
from src.mpgpmd.oracles.enumeration import joint_action_table, joint_choice_table


def two_state_cycle(discount=0.5) -> MarkovGame:
    """One player, two actions, states alternate deterministically whatever is played."""
    transition = np.zeros((2, 2, 2))
    transition[0, :, 1] = 1.0
    transition[1, :, 0] = 1.0
    rewards = np.array([[[1.0, 0.0], [0.0, 0.5]]])
    return MarkovGame((2,), transition, rewards, discount, np.array([0.5, 0.5]), name="cycle")


class TestExactEvaluation(unittest.TestCase):
    def setUp(self):
        """A random identical-interest game and a random dummy-term game with interior policies."""
        self.rng = np.random.default_rng(11)
        self.game, self.potential = make_identical_interest(2, 3, [2, 3], 0.9, seed=3)
        self.dummy_game, self.dummy_potential = make_dummy_term_mpg(3, 2, [2, 2, 2], 0.8, seed=4)
        self.policy = JointPolicy.random_interior(self.game, self.rng)
        self.dummy_policy = JointPolicy.random_interior(self.dummy_game, self.rng)

    def test_01_zero_discount_q_equals_rewards(self):
        """With gamma = 0 the Q-values are the rewards."""
        game, potential = make_identical_interest(2, 2, [2, 2], 0.0, seed=2)
        bundle = evaluate(game, JointPolicy.random_interior(game, self.rng), potential)
        np.testing.assert_array_equal(bundle.q_values, game.rewards)
        np.testing.assert_array_equal(bundle.potential_q, potential.phi)

    def test_02_coordination_averaged_q(self):
        """Against a uniform opponent both coordination actions are worth 0.5."""
        game, _ = make_coordination_game()
        bundle = evaluate(game, JointPolicy.uniform(game))
        np.testing.assert_allclose(bundle.avg_q[0], [[0.5, 0.5]], atol=1e-15)
        np.testing.assert_allclose(bundle.avg_q[1], [[0.5, 0.5]], atol=1e-15)

    def test_03_single_state_potential_is_one_shot(self):
        """At gamma = 0 in one state the total potential is the expected phi."""
        game, potential = make_identical_interest(2, 1, [2, 2], 0.0, seed=7)
        policy = JointPolicy.random_interior(game, self.rng)
        expected = float(policy.joint()[0] @ potential.phi[0])
        self.assertAlmostEqual(total_potential(game, potential, policy, game.initial_dist), expected, places=14)

    def test_04_occupancy_of_a_cycle(self):
        """Deterministic two-state cycle from state 0 with gamma 0.5 gives (2/3, 1/3)."""
        game = two_state_cycle(0.5)
        for policy in (JointPolicy.uniform(game), JointPolicy.deterministic(game, [[1, 0]])):
            d = occupancy_measure(game, policy, [1.0, 0.0])
            np.testing.assert_allclose(d, [2.0 / 3.0, 1.0 / 3.0], atol=1e-14)

    def test_05_occupancy_edge_cases(self):
        """One state gives d = [1] and gamma = 0 gives d = mu."""
        game, _ = make_coordination_game()
        np.testing.assert_allclose(occupancy_measure(game, JointPolicy.uniform(game), [1.0]), [1.0])
        game = two_state_cycle(0.0)
        np.testing.assert_allclose(occupancy_measure(game, JointPolicy.uniform(game), [0.3, 0.7]), [0.3, 0.7])

    def test_06_occupancy_floor(self):
        """d_mu >= (1 - gamma) mu entrywise and d sums to one."""
        bundle = evaluate(self.game, self.policy)
        mu = self.rng.dirichlet(np.ones(self.game.num_states))
        d = bundle.occupancy_for(mu)
        self.assertTrue(np.all(d >= (1.0 - self.game.discount) * mu - 1e-12))
        self.assertAlmostEqual(d.sum(), 1.0, delta=1e-12)

    def test_07_constant_potential(self):
        """phi = c everywhere gives Phi = c / (1 - gamma)."""
        phi = PotentialSpec.from_table(np.full(self.potential.phi.shape, 0.3))
        value = total_potential(self.game, phi, self.policy, self.game.initial_dist)
        self.assertAlmostEqual(value, 0.3 / (1.0 - self.game.discount), places=10)

    def test_08_identical_interest_potential_equals_value(self):
        """Phi^pi(rho) = V_1^pi(rho) when every player receives phi."""
        bundle = evaluate(self.game, self.policy, self.potential)
        self.assertAlmostEqual(bundle.total_potential(), bundle.value(0), places=10)
        self.assertAlmostEqual(bundle.total_potential(), bundle.value(1), places=10)

    def test_09_advantage_has_zero_mean(self):
        """sum_a pi_i(a|s) Abar_i(s, a) = 0 for every player and state."""
        bundle = evaluate(self.dummy_game, self.dummy_policy)
        for i in range(self.dummy_game.num_players):
            means = (self.dummy_policy.player(i) * bundle.avg_adv[i]).sum(axis=1)
            np.testing.assert_allclose(means, 0.0, atol=1e-12)

    def test_10_performance_difference(self):
        """Joint and deviation performance-difference identities hold to 1e-10."""
        for game, potential in ((self.game, self.potential), (self.dummy_game, self.dummy_potential)):
            a = JointPolicy.random_interior(game, self.rng)
            b = JointPolicy.random_interior(game, self.rng)
            mu = self.rng.dirichlet(np.ones(game.num_states))
            self.assertLess(perf_diff_check(game, a, b, mu, potential), 1e-10)
            self.assertLess(perf_diff_check(game, a, a, mu, potential), 1e-12)

    def test_11_policy_increment_decomposition(self):
        """The joint policy increment telescopes over single-player swaps."""
        a = JointPolicy.random_interior(self.dummy_game, self.rng)
        b = JointPolicy.random_interior(self.dummy_game, self.rng)
        self.assertLess(policy_increment_residual(a, b), 1e-14)

    def test_12_gradient_equality_identical_interest(self):
        """dV_i/dpi_i equals dPhi/dpi_i entrywise when r_i = phi."""
        bundle = evaluate(self.game, self.policy, self.potential)
        for i in range(self.game.num_players):
            value_grad = policy_gradient(self.game, self.policy, i, bundle=bundle)
            potential_grad = policy_gradient(self.game, self.policy, i, bundle=bundle, of_potential=True)
            np.testing.assert_allclose(value_grad, potential_grad, atol=1e-10)

    def test_13_dummy_term_advantages_match_potential(self):
        """Player advantages equal the potential's advantages on dummy-term games."""
        bundle = evaluate(self.dummy_game, self.dummy_policy, self.dummy_potential)
        for i in range(self.dummy_game.num_players):
            np.testing.assert_allclose(bundle.avg_adv[i], bundle.avg_potential_adv[i], atol=1e-10)

    def test_14_gradient_single_state(self):
        """One state at gamma = 0: the gradient is the averaged reward."""
        game, _ = make_coordination_game()
        policy = JointPolicy.biased(game, bias=0.2)
        self.assertAlmostEqual(policy_gradient_entry(game, policy, 0, 0, 0, [1.0]), 0.7, places=14)
        self.assertAlmostEqual(policy_gradient_entry(game, policy, 0, 0, 1, [1.0]), 0.3, places=14)
        with self.assertRaises(IndexError):
            policy_gradient_entry(game, policy, 2, 0, 0, [1.0])

    def test_15_batched_deterministic_values(self):
        """Batched solves agree with evaluate() for every deterministic joint policy."""
        game, potential = make_identical_interest(2, 2, [2, 2], 0.7, seed=9)
        choices = joint_choice_table(game)
        actions = joint_action_table(game, choices)
        tables = np.concatenate([game.rewards, potential.phi[None]], axis=0)
        values = deterministic_values(game, actions, tables, game.initial_dist)
        occupancies = deterministic_occupancies(game, actions, game.initial_dist)
        for k, choice in enumerate(choices):
            bundle = evaluate(game, JointPolicy.deterministic(game, choice), potential)
            np.testing.assert_allclose(values[k, :2], bundle.values(), atol=1e-12)
            self.assertAlmostEqual(values[k, 2], bundle.total_potential(), places=12)
            np.testing.assert_allclose(occupancies[k], bundle.occupancy, atol=1e-12)

    def test_16_errors(self):
        """Mismatched policies and missing potentials are rejected."""
        other, _ = make_identical_interest(2, 2, [2, 2], 0.9, seed=0)
        with self.assertRaises(DimensionMismatchError):
            evaluate(self.game, JointPolicy.uniform(other))
        bundle = evaluate(self.game, self.policy)
        with self.assertRaises(MissingPotentialError):
            bundle.total_potential()
        with self.assertRaises(MissingPotentialError):
            policy_gradient(self.game, self.policy, 0, bundle=bundle, of_potential=True)


if __name__ == "__main__":
    unittest.main()
