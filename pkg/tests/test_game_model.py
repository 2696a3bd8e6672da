import json
import os
import sys
import tempfile
import unittest

import numpy as np

# Add the project root to the Python path to allow for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.mpgpmd.errors import (
    DimensionMismatchError,
    EnumerationCapExceeded,
    GameConstructionError,
)
from src.mpgpmd.games.game_io import game_from_dict, game_to_dict, load_game, save_game
from src.mpgpmd.games.generators import (
    make_coordination_game,
    make_dummy_term_mpg,
    make_identical_interest,
    make_stateless_congestion,
    make_weighted_identical_interest,
)
from src.mpgpmd.games.model import JointPolicy, MarkovGame, PotentialSpec, marginalize_opponents
from src.mpgpmd.games.verification import verify_mpg

DATA_DIR = os.path.join(os.path.dirname(__file__), "..", "data", "games")


class TestGameModel(unittest.TestCase):
    def setUp(self):
        """Builds a small identical-interest game used by several tests."""
        self.game, self.potential = make_identical_interest(2, 3, [2, 2], 0.9, seed=1)

    def test_01_generated_tables_are_distributions(self):
        """Transition rows and rho are valid distributions for every family."""
        games = [
            self.game,
            make_dummy_term_mpg(3, 2, [2, 3, 2], 0.8, seed=4)[0],
            make_stateless_congestion(4, 3, seed=2)[0],
            make_coordination_game(3, 2)[0],
        ]
        for game in games:
            np.testing.assert_allclose(game.transition.sum(axis=2), 1.0, atol=1e-12)
            self.assertTrue(np.all(game.transition >= 0))
            self.assertAlmostEqual(game.initial_dist.sum(), 1.0, delta=1e-12)
            self.assertEqual(game.num_joint_actions, int(np.prod(game.action_counts)))

    def test_02_generators_are_deterministic(self):
        """The same seed twice gives bit-identical games."""
        again, potential = make_identical_interest(2, 3, [2, 2], 0.9, seed=1)
        self.assertTrue(np.array_equal(self.game.transition, again.transition))
        self.assertTrue(np.array_equal(self.game.rewards, again.rewards))
        self.assertEqual(self.game.digest(), again.digest())
        other, _ = make_identical_interest(2, 3, [2, 2], 0.9, seed=2)
        self.assertNotEqual(self.game.digest(), other.digest())

    def test_03_phi_max_is_exact(self):
        """phi_max equals the largest absolute potential entry."""
        self.assertEqual(self.potential.phi_max, float(np.max(np.abs(self.potential.phi))))
        with self.assertRaises(GameConstructionError):
            PotentialSpec(phi=np.array([[1.0, -2.0]]), phi_max=1.0)

    def test_04_identical_interest_rewards(self):
        """Every player receives phi."""
        for i in range(self.game.num_players):
            np.testing.assert_array_equal(self.game.rewards[i], self.potential.phi)
        self.assertTrue(np.all((self.potential.phi >= 0) & (self.potential.phi <= 1)))

    def test_05_verify_identical_interest(self):
        """Identical-interest games satisfy the potential identity exactly."""
        self.assertLess(verify_mpg(self.game, self.potential), 1e-10)

    def test_06_verify_dummy_term(self):
        """Dummy-term games pass verification and have distinct rewards."""
        game, potential = make_dummy_term_mpg(2, 3, [2, 2], 0.9, seed=3)
        self.assertLess(verify_mpg(game, potential), 1e-10)
        self.assertTrue(game.has_action_independent_transitions())
        self.assertFalse(np.allclose(game.rewards[0], game.rewards[1]))

    def test_07_dummy_term_without_dummies(self):
        """dummy_scale=0 reduces to identical interest with the same phi."""
        game, potential = make_dummy_term_mpg(2, 2, [2, 2], 0.5, seed=5, dummy_scale=0.0)
        np.testing.assert_array_equal(game.rewards[0], potential.phi)
        np.testing.assert_array_equal(game.rewards[1], potential.phi)

    def test_08_congestion_two_by_two(self):
        """Unit slopes: sharing costs 2 each, splitting costs 1 each."""
        game, potential = make_stateless_congestion(2, 2, seed=0, cost_weights=[1.0, 1.0])
        same = game.joint_index((0, 0))
        split = game.joint_index((0, 1))
        self.assertEqual(game.rewards[0, 0, same], -2.0)
        self.assertEqual(game.rewards[1, 0, same], -2.0)
        self.assertEqual(game.rewards[0, 0, split], -1.0)
        self.assertEqual(game.rewards[1, 0, split], -1.0)
        self.assertEqual(potential.phi[0, same], -3.0)
        self.assertEqual(potential.phi[0, split], -2.0)
        self.assertEqual(game.discount, 0.0)
        self.assertLess(verify_mpg(game, potential), 1e-12)

    def test_09_congestion_many_players(self):
        """Rosenthal's potential certifies congestion games with several players."""
        for n in (3, 5):
            game, potential = make_stateless_congestion(n, 2, seed=n)
            self.assertLess(verify_mpg(game, potential), 1e-12)
        game, potential = make_stateless_congestion(3, 1, seed=0)
        self.assertEqual(game.action_counts, (1, 1, 1))

    def test_10_corrupted_reward_fails_verification(self):
        """A single +0.1 reward perturbation breaks the identity."""
        rewards = np.array(self.game.rewards)
        rewards[0, 1, 2] += 0.1
        corrupted = MarkovGame(
            self.game.action_counts, self.game.transition, rewards, self.game.discount, self.game.initial_dist
        )
        self.assertGreater(verify_mpg(corrupted, self.potential), 0.01)

    def test_11_verification_cap(self):
        """Enumeration beyond the cap is refused, not truncated."""
        with self.assertRaises(EnumerationCapExceeded) as ctx:
            verify_mpg(self.game, self.potential, cap=10)
        self.assertEqual(ctx.exception.count, 64)
        self.assertEqual(ctx.exception.cap, 10)

    def test_12_invalid_construction(self):
        """Invalid sizes and distributions raise construction errors."""
        with self.assertRaises(GameConstructionError):
            make_identical_interest(0, 2, [], 0.9, seed=0)
        with self.assertRaises(GameConstructionError):
            make_identical_interest(2, 2, [2, 2], 1.0, seed=0)
        with self.assertRaises(GameConstructionError):
            make_identical_interest(2, 2, [2], 0.5, seed=0)
        with self.assertRaises(GameConstructionError):
            MarkovGame((2,), np.full((1, 2, 1), 0.7), np.zeros((1, 1, 2)), 0.5, np.ones(1))

    def test_13_joint_policy_product(self):
        """The joint table is the row-major product of player rows."""
        rng = np.random.default_rng(0)
        policy = JointPolicy.random_interior(self.game, rng)
        joint = policy.joint()
        for s in range(self.game.num_states):
            for a in range(self.game.num_joint_actions):
                a1, a2 = self.game.joint_actions(a)
                self.assertAlmostEqual(joint[s, a], policy.player(0)[s, a1] * policy.player(1)[s, a2], places=14)
        np.testing.assert_allclose(joint.sum(axis=1), 1.0, atol=1e-12)

    def test_14_policy_validation(self):
        """Non-stochastic rows are rejected unless probing."""
        with self.assertRaises(GameConstructionError):
            JointPolicy((np.array([[0.7, 0.7]]),))
        probe = JointPolicy((np.array([[0.7, 0.7]]),), probe=True)
        self.assertTrue(probe.probe)
        other_game, _ = make_identical_interest(2, 2, [2, 2], 0.9, seed=1)
        with self.assertRaises(DimensionMismatchError):
            JointPolicy.uniform(other_game).check_against(self.game)

    def test_15_biased_policy(self):
        """Two actions with bias 0.1 give rows (0.6, 0.4)."""
        game, _ = make_coordination_game()
        policy = JointPolicy.biased(game, action=0, bias=0.1)
        np.testing.assert_allclose(policy.player(0), [[0.6, 0.4]])
        np.testing.assert_allclose(policy.player(1), [[0.6, 0.4]])

    def test_16_marginalize_opponents(self):
        """Averaging a table over the opponent's uniform policy."""
        game, _ = make_coordination_game()
        policy = JointPolicy.uniform(game)
        averaged = marginalize_opponents(game.rewards[0], policy, 0)
        np.testing.assert_allclose(averaged, [[0.5, 0.5]])

    def test_17_game_file_roundtrip(self):
        """A saved game loads back with identical tables and potential."""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "game.json")
            save_game(path, self.game, self.potential)
            loaded, potential = load_game(path)
        self.assertEqual(loaded.digest(), self.game.digest())
        np.testing.assert_array_equal(potential.phi, self.potential.phi)

    def test_18_game_file_rejections(self):
        """The loader rejects unknown fields, missing fields and bad distributions."""
        document = game_to_dict(self.game, self.potential)
        with self.assertRaises(GameConstructionError):
            game_from_dict({**document, "extra": 1})
        missing = dict(document)
        del missing["transition"]
        with self.assertRaises(GameConstructionError):
            game_from_dict(missing)
        bad = json.loads(json.dumps(document))
        bad["initial_dist"] = [0.5, 0.5, 0.5]
        with self.assertRaises(GameConstructionError):
            game_from_dict(bad)
        with self.assertRaises(GameConstructionError):
            load_game(os.path.join(DATA_DIR, "does_not_exist.json"))

    def test_19_shipped_game_files(self):
        """Shipped sample games load and are certified."""
        for name in ("coordination_2x2.json", "congestion_2p2f.json"):
            game, potential = load_game(os.path.join(DATA_DIR, name))
            self.assertLess(verify_mpg(game, potential), 1e-12)

    def test_20_certification_sweep_small_games(self):
        """Generator outputs within desk sizes all verify."""
        for seed in range(5):
            for n, s, a in ((2, 2, 3), (3, 2, 2), (2, 4, 2)):
                game, potential = make_identical_interest(n, s, [a] * n, 0.9, seed=seed)
                self.assertLess(verify_mpg(game, potential), 1e-10)
                game, potential = make_dummy_term_mpg(n, s, [a] * n, 0.9, seed=seed)
                self.assertLess(verify_mpg(game, potential), 1e-10)

    def test_21_marginalize_matches_joint_sum(self):
        """Contraction equals the explicit sum over opponent actions, trailing axes kept."""
        game, _ = make_identical_interest(3, 2, [2, 3, 2], 0.8, seed=3)
        policy = JointPolicy.random_interior(game, np.random.default_rng(0))
        table = game.action_table()
        for i in range(game.num_players):
            weights = np.ones((game.num_states, game.num_joint_actions))
            for j in range(game.num_players):
                if j != i:
                    weights = weights * policy.player(j)[:, table[:, j]]
            expected_rewards = np.zeros((game.num_states, game.action_counts[i]))
            expected_kernel = np.zeros((game.num_states, game.action_counts[i], game.num_states))
            for a in range(game.num_joint_actions):
                expected_rewards[:, table[a, i]] += weights[:, a] * game.rewards[i][:, a]
                expected_kernel[:, table[a, i]] += weights[:, a, None] * game.transition[:, a]
            np.testing.assert_allclose(marginalize_opponents(game.rewards[i], policy, i), expected_rewards, atol=1e-14)
            np.testing.assert_allclose(marginalize_opponents(game.transition, policy, i), expected_kernel, atol=1e-14)

    def test_22_weighted_identical_interest(self):
        """Certified, phi_max fixed at 0.25 and the lead player's values shared across N."""
        leads = []
        for n in (2, 4, 8):
            game, potential = make_weighted_identical_interest(n, 1, [2] * n, 0.0, seed=3)
            self.assertLess(verify_mpg(game, potential), 1e-10)
            self.assertAlmostEqual(potential.phi_max, 0.25, places=12)
            policy = JointPolicy.uniform(game)
            leads.append(marginalize_opponents(potential.phi, policy, 0))
        for lead in leads[1:]:
            np.testing.assert_allclose(lead, leads[0], atol=1e-14)
        np.testing.assert_allclose(np.sort(leads[0][0]), [-0.2, 0.2], atol=1e-14)

        game, potential = make_weighted_identical_interest(2, 3, [3, 2], 0.9, seed=1)
        self.assertLess(verify_mpg(game, potential), 1e-10)
        with self.assertRaises(GameConstructionError):
            make_weighted_identical_interest(2, 1, [2, 2], 0.0, seed=0, lead_weight=0.0)


if __name__ == "__main__":
    unittest.main()
