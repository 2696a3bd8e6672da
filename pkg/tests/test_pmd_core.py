import math
import os
import sys
import unittest

import numpy as np

# Add the project root to the Python path to allow for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.mpgpmd.core.evaluation import evaluate
from src.mpgpmd.core.pmd import (
    PmdConfig,
    Regularizer,
    euclidean_improvement_slack,
    kl_improvement_slack,
    pmd_step,
    project_simplex,
    project_simplex_rows,
    run_pmd,
    theorem_step_size,
)
from src.mpgpmd.errors import ConfigError, DegenerateGameError, NotAPotentialGameError
from src.mpgpmd.games.generators import make_coordination_game, make_identical_interest
from src.mpgpmd.games.model import JointPolicy, MarkovGame, PotentialSpec


def single_agent_bandit(rewards) -> tuple:
    """One player, one state, gamma = 0: averaged Q-values are the rewards."""
    rewards = np.asarray(rewards, dtype=float)
    n = len(rewards)
    game = MarkovGame((n,), np.ones((1, n, 1)), rewards[None, None, :], 0.0, np.ones(1), name="bandit")
    return game, PotentialSpec.from_table(rewards[None, :])


class TestPolicyMirrorDescent(unittest.TestCase):
    def setUp(self):
        """A discounted identical-interest game with three states."""
        self.game, self.potential = make_identical_interest(2, 3, [2, 2], 0.9, seed=1)

    def test_01_theorem_step_sizes(self):
        """Closed-form theorem step sizes."""
        euclid_game, _ = make_identical_interest(2, 1, [2, 2], 0.9, seed=0)
        unit = PotentialSpec.from_table(np.eye(1, 4))
        self.assertAlmostEqual(theorem_step_size("euclidean", euclid_game, unit), 0.00625, places=15)

        kl_game, _ = make_identical_interest(4, 1, [2, 2, 2, 2], 0.9, seed=0)
        unit = PotentialSpec.from_table(np.eye(1, 16))
        self.assertAlmostEqual(theorem_step_size("kl", kl_game, unit), 0.025, places=15)
        self.assertAlmostEqual(theorem_step_size("kl", kl_game, unit, advantage_form=True), 0.0025, places=15)

        bandit, potential = single_agent_bandit([1.0, 0.0])
        self.assertEqual(theorem_step_size("kl", bandit, potential), 0.5)

    def test_02_degenerate_potential(self):
        """phi identically zero has no theorem step size."""
        zero = PotentialSpec.from_table(np.zeros_like(self.potential.phi))
        with self.assertRaises(DegenerateGameError):
            theorem_step_size(Regularizer.KL, self.game, zero)

    def test_03_projection_examples(self):
        """Symmetric, clipped and already-feasible vectors."""
        np.testing.assert_allclose(project_simplex([0.6, 0.6]), [0.5, 0.5], atol=1e-15)
        np.testing.assert_allclose(project_simplex([1.5, -0.5]), [1.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(project_simplex([0.2, 0.3, 0.5]), [0.2, 0.3, 0.5], atol=1e-15)
        rows = project_simplex_rows(np.random.default_rng(0).normal(size=(50, 4)) * 3)
        np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-12)
        self.assertTrue(np.all(rows >= 0))
        with self.assertRaises(ValueError):
            project_simplex([np.nan, 1.0])

    def test_04_kl_closed_form(self):
        """Uniform row, Qbar = (1, 0), eta = ln 2 in Q-form gives (2/3, 1/3)."""
        game, potential = single_agent_bandit([1.0, 0.0])
        config = PmdConfig(Regularizer.KL, step_size=math.log(2.0), advantage_form=False)
        policy = JointPolicy.uniform(game)
        new, record = pmd_step(game, potential, policy, evaluate(game, policy, potential), config)
        np.testing.assert_allclose(new.player(0), [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-14)
        self.assertAlmostEqual(record.log_z[0, 0], math.log(1.5), places=14)

    def test_05_kl_advantage_form_matches_q_form(self):
        """Advantage form with eta (1-gamma) reproduces the Q-form step with eta."""
        policy = JointPolicy.random_interior(self.game, np.random.default_rng(3))
        bundle = evaluate(self.game, policy, self.potential)
        q_form = PmdConfig(Regularizer.KL, step_size=0.3, advantage_form=False)
        adv_form = PmdConfig(Regularizer.KL, step_size=0.3 * (1.0 - self.game.discount), advantage_form=True)
        a, _ = pmd_step(self.game, self.potential, policy, bundle, q_form)
        b, _ = pmd_step(self.game, self.potential, policy, bundle, adv_form)
        for i in range(self.game.num_players):
            np.testing.assert_allclose(a.player(i), b.player(i), atol=1e-13)

    def test_06_kl_shift_invariance_and_zeros(self):
        """Constant Qbar leaves the row unchanged; zero entries stay zero."""
        game, potential = single_agent_bandit([0.4, 0.4, 0.4])
        policy = JointPolicy((np.array([[0.2, 0.8, 0.0]]),))
        config = PmdConfig(Regularizer.KL, step_size=5.0, advantage_form=False)
        new, _ = pmd_step(game, potential, policy, evaluate(game, policy, potential), config)
        np.testing.assert_allclose(new.player(0), [[0.2, 0.8, 0.0]], atol=1e-14)

        game, potential = single_agent_bandit([0.0, 0.1, 9.0])
        new, _ = pmd_step(game, potential, policy, evaluate(game, policy, potential), config)
        self.assertEqual(new.player(0)[0, 2], 0.0)

    def test_07_euclidean_interior_step(self):
        """Inside the simplex the projected step is pi + eta (Qbar - mean Qbar)."""
        game, potential = single_agent_bandit([0.3, 0.1, 0.2])
        policy = JointPolicy.uniform(game)
        config = PmdConfig(Regularizer.EUCLIDEAN, step_size=0.1)
        new, record = pmd_step(game, potential, policy, evaluate(game, policy, potential), config)
        expected = 1.0 / 3.0 + 0.1 * (np.array([0.3, 0.1, 0.2]) - 0.2)
        np.testing.assert_allclose(new.player(0)[0], expected, atol=1e-14)
        self.assertAlmostEqual(record.sq_displacement.sum(), float(np.sum((expected - 1.0 / 3.0) ** 2)), places=15)

    def test_08_single_iteration(self):
        """T = 1 applies one update and produces one record."""
        config = PmdConfig(Regularizer.EUCLIDEAN, num_iterations=1)
        trace = run_pmd(self.game, self.potential, config)
        self.assertEqual(trace.num_iterations, 1)
        self.assertEqual(len(trace.policies), 2)
        self.assertGreater(float(trace.records[0].sq_displacement.sum()), 0.0)
        self.assertLess(trace.verification_residual, 1e-10)

    def test_09_potential_is_monotone(self):
        """Theorem step sizes never decrease Phi along the trace."""
        for regularizer in (Regularizer.EUCLIDEAN, Regularizer.KL):
            config = PmdConfig(regularizer, num_iterations=40, initial_policy="random")
            trace = run_pmd(self.game, self.potential, config, seed=2)
            potentials = trace.potentials()
            self.assertEqual(len(potentials), 41)
            self.assertTrue(np.all(np.diff(potentials) >= -1e-10), regularizer)

    def test_10_improvement_slacks(self):
        """Both improvement inequalities hold at every step of a theorem-step run."""
        euclid = run_pmd(self.game, self.potential, PmdConfig(Regularizer.EUCLIDEAN, num_iterations=10))
        kl = run_pmd(self.game, self.potential, PmdConfig(Regularizer.KL, num_iterations=10))
        for t in range(1, 11):
            self.assertGreaterEqual(euclidean_improvement_slack(self.game, self.potential, euclid, t), -1e-10)
            self.assertGreaterEqual(
                euclidean_improvement_slack(self.game, self.potential, euclid, t, variant="loose"), -1e-10
            )
            self.assertGreaterEqual(kl_improvement_slack(self.game, self.potential, kl, t), -1e-10)
            self.assertGreaterEqual(kl_improvement_slack(self.game, self.potential, kl, t, full=True), -1e-10)

    def test_11_improvement_at_other_distribution(self):
        """The improvement inequality holds for a distribution other than rho."""
        trace = run_pmd(self.game, self.potential, PmdConfig(Regularizer.KL, num_iterations=3))
        mu = np.array([0.7, 0.2, 0.1])
        for t in range(1, 4):
            self.assertGreaterEqual(kl_improvement_slack(self.game, self.potential, trace, t, mu=mu), -1e-10)

    def test_12_coordination_converges(self):
        """A biased start on the coordination game moves towards the favoured action."""
        game, potential = make_coordination_game()
        config = PmdConfig(Regularizer.KL, num_iterations=200, initial_policy="biased", bias=0.1)
        trace = run_pmd(game, potential, config)
        final = trace.policies[-1]
        self.assertGreater(final.player(0)[0, 0], 0.6)
        self.assertGreater(final.player(1)[0, 0], 0.6)

    def test_13_refuses_non_potential_games(self):
        """A corrupted game is refused unless the caller trusts it."""
        rewards = np.array(self.game.rewards)
        rewards[1, 0, 3] += 0.5
        corrupted = MarkovGame(
            self.game.action_counts, self.game.transition, rewards, self.game.discount, self.game.initial_dist
        )
        config = PmdConfig(Regularizer.EUCLIDEAN, num_iterations=2)
        with self.assertRaises(NotAPotentialGameError):
            run_pmd(corrupted, self.potential, config)
        trace = run_pmd(corrupted, self.potential, config, trust_mpg=True)
        self.assertIsNone(trace.verification_residual)

    def test_14_config_validation(self):
        """Bad step sizes, regularizers and boundary KL starts are rejected."""
        with self.assertRaises(ConfigError):
            PmdConfig("entropy")
        with self.assertRaises(ConfigError):
            PmdConfig(Regularizer.KL, step_size=-1.0)
        with self.assertRaises(ConfigError):
            PmdConfig(Regularizer.KL, num_iterations=0)
        boundary = JointPolicy.deterministic(self.game, [[0, 0, 0], [1, 1, 1]])
        with self.assertRaises(ConfigError):
            PmdConfig(Regularizer.KL, initial_policy=boundary)

    def test_15_runs_are_deterministic(self):
        """Two runs with the same seed produce identical policies."""
        config = PmdConfig(Regularizer.KL, num_iterations=5, initial_policy="random")
        a = run_pmd(self.game, self.potential, config, seed=4)
        b = run_pmd(self.game, self.potential, config, seed=4)
        for p, q in zip(a.policies, b.policies):
            for i in range(self.game.num_players):
                self.assertTrue(np.array_equal(p.player(i), q.player(i)))

    def test_16_reuses_an_earlier_verification(self):
        """A passed-in residual replaces enumeration; a failing one is still refused."""
        config = PmdConfig(Regularizer.EUCLIDEAN, num_iterations=3)
        trace = run_pmd(self.game, self.potential, config, cap=1, verified_residual=2e-12)
        self.assertEqual(trace.verification_residual, 2e-12)
        with self.assertRaises(NotAPotentialGameError):
            run_pmd(self.game, self.potential, config, verified_residual=1e-3)


if __name__ == "__main__":
    unittest.main()
