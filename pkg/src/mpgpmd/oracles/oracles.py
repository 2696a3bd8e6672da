"""
Brute-force oracles that certify the exact engine along independent code
paths: active-set simplex projection, Monte-Carlo rollouts, iterative
evaluation for finite differences, random deviations and exhaustive
deterministic best responses.

Nothing here calls into the linear solves of ``core.evaluation`` or the
sort-and-threshold projection; only the game data model is shared.
"""

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from src.mpgpmd.games.model import JointPolicy, MarkovGame
from src.mpgpmd.oracles.enumeration import enumerate_deterministic_policies

logger = logging.getLogger(__name__)

PROJECTION_MAX_DIM = 12
FD_STEP_RANGE = (1e-7, 1e-3)
MC_CHUNK = 10_000
ITERATIVE_TOLERANCE = 1e-13


@dataclass(frozen=True)
class OracleReport:
    oracle: str
    instance: str
    main_value: float
    oracle_value: float
    abs_error: float
    rel_error: float
    tolerance: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "oracle": self.oracle,
            "instance": self.instance,
            "main_value": self.main_value,
            "oracle_value": self.oracle_value,
            "abs_error": self.abs_error,
            "rel_error": self.rel_error,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def make_report(oracle: str, instance: str, main_value: float, oracle_value: float, tolerance: float) -> OracleReport:
    error = abs(float(main_value) - float(oracle_value))
    scale = abs(float(oracle_value))
    report = OracleReport(
        oracle=oracle,
        instance=instance,
        main_value=float(main_value),
        oracle_value=float(oracle_value),
        abs_error=error,
        rel_error=error / scale if scale > 0 else error,
        tolerance=float(tolerance),
        passed=bool(error <= tolerance),
    )
    if not report.passed:
        logger.warning(f"Oracle '{oracle}' failed on {instance}: error {error:.3e} > {tolerance:.1e}")
    return report


def projection_oracle(v) -> np.ndarray:
    """
    Euclidean projection onto the simplex by enumerating every candidate
    support: on support K the minimiser is v_K - (sum v_K - 1)/|K|.
    """
    v = np.asarray(v, dtype=float)
    n = v.size
    if n > PROJECTION_MAX_DIM:
        raise ValueError(f"projection_oracle enumerates 2^n supports; n={n} exceeds {PROJECTION_MAX_DIM}")
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot project a vector with NaN or infinite entries")

    best, best_distance = None, np.inf
    for size in range(1, n + 1):
        for support in itertools.combinations(range(n), size):
            idx = list(support)
            candidate = np.zeros(n)
            candidate[idx] = v[idx] - (v[idx].sum() - 1.0) / size
            if np.any(candidate[idx] < -1e-15):
                continue
            candidate = np.maximum(candidate, 0.0)
            distance = float(np.sum((candidate - v) ** 2))
            if distance < best_distance:
                best, best_distance = candidate, distance
    return best


def joint_probabilities(game: MarkovGame, policy: JointPolicy) -> np.ndarray:
    """(S, A) product probabilities by explicit enumeration of joint actions."""
    table = np.empty((game.num_states, game.num_joint_actions))
    for a, actions in enumerate(itertools.product(*[range(n) for n in game.action_counts])):
        prob = np.ones(game.num_states)
        for i, a_i in enumerate(actions):
            prob = prob * policy.rows[i][:, a_i]
        table[:, a] = prob
    return table


def iterative_values(game: MarkovGame, policy: JointPolicy, reward: np.ndarray, tolerance: float = ITERATIVE_TOLERANCE) -> np.ndarray:
    """
    Value iteration V <- r_pi + gamma P_pi V until the geometric tail is
    below ``tolerance``. Accepts probe policies with non-stochastic rows.
    """
    joint = joint_probabilities(game, policy)
    r_pi = (joint * reward).sum(axis=1)
    p_pi = (joint[:, :, None] * game.transition).sum(axis=1)
    gamma = game.discount
    v = r_pi.copy()
    if gamma == 0:
        return v
    while True:
        updated = r_pi + gamma * p_pi @ v
        change = float(np.max(np.abs(updated - v)))
        v = updated
        if change * gamma / (1.0 - gamma) < tolerance:
            return v


@dataclass(frozen=True)
class MonteCarloEstimate:
    estimate: float
    standard_error: float
    truncation_error: float
    horizon: int
    num_trajectories: int

    def covers(self, exact: float) -> bool:
        return abs(exact - self.estimate) <= 3.0 * self.standard_error + self.truncation_error + 1e-12


def truncation_horizon(game: MarkovGame, i: int, truncation_error: float) -> int:
    """Smallest H with gamma^H max|r_i| / (1 - gamma) < truncation_error."""
    gamma = game.discount
    reward_max = float(np.max(np.abs(game.rewards[i])))
    if gamma == 0 or reward_max == 0:
        return 1
    tail = reward_max / (1.0 - gamma)
    horizon = max(1, int(np.ceil(np.log(truncation_error / tail) / np.log(gamma))))
    while gamma**horizon * tail >= truncation_error:
        horizon += 1
    return horizon


def _sample_rows(rng, cdf_rows: np.ndarray) -> np.ndarray:
    u = rng.random(len(cdf_rows))
    return np.minimum((u[:, None] > cdf_rows).sum(axis=1), cdf_rows.shape[1] - 1)


def rollout_chunk(
    game: MarkovGame,
    policy: JointPolicy,
    i: int,
    horizon: int,
    seed: int,
    chunk: int,
    size: int,
) -> np.ndarray:
    """
    Truncated discounted returns of player i for ``size`` trajectories, all
    drawn from Philox seeded with SeedSequence(seed, spawn_key=(chunk,)).
    The trajectories advance together, so a chunk's returns depend on its
    size as well as on (seed, chunk).
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chunk,))))
    policy_cdfs = [np.cumsum(r, axis=1) for r in policy.rows]
    transition_cdf = np.cumsum(game.transition, axis=2)
    states = _sample_rows(rng, np.broadcast_to(np.cumsum(game.initial_dist), (size, game.num_states)))
    total = np.zeros(size)
    discount = 1.0
    for _ in range(horizon):
        actions = [_sample_rows(rng, cdf[states]) for cdf in policy_cdfs]
        joint = np.ravel_multi_index(tuple(actions), game.action_counts)
        total += discount * game.rewards[i, states, joint]
        states = _sample_rows(rng, transition_cdf[states, joint])
        discount *= game.discount
    return total


def mc_value_oracle(
    game: MarkovGame,
    policy: JointPolicy,
    i: int,
    num_trajectories: int,
    horizon: int = None,
    seed: int = 0,
    truncation_error: float = 1e-6,
) -> MonteCarloEstimate:
    """
    Rollout estimate of V_i^pi(rho).

    Trajectory j belongs to chunk j // MC_CHUNK and every chunk is one
    rollout_chunk call keyed on (seed, chunk). Estimates are therefore
    reproducible for a fixed (seed, num_trajectories), however chunks are
    scheduled; a run's first k full chunks are those of any longer run with
    the same seed.
    """
    policy.check_against(game)
    if horizon is None:
        horizon = truncation_horizon(game, i, truncation_error)
    gamma = game.discount
    reward_max = float(np.max(np.abs(game.rewards[i])))
    truncation = gamma**horizon * reward_max / (1.0 - gamma)

    returns = np.empty(num_trajectories)
    for chunk, start in enumerate(range(0, num_trajectories, MC_CHUNK)):
        size = min(MC_CHUNK, num_trajectories - start)
        returns[start:start + size] = rollout_chunk(game, policy, i, horizon, seed, chunk, size)

    standard_error = float(returns.std(ddof=1) / np.sqrt(num_trajectories)) if num_trajectories > 1 else 0.0
    return MonteCarloEstimate(
        estimate=float(returns.mean()),
        standard_error=standard_error,
        truncation_error=float(truncation),
        horizon=int(horizon),
        num_trajectories=int(num_trajectories),
    )


def fd_gradient_oracle(game: MarkovGame, policy: JointPolicy, i: int, s: int, a_i: int, mu, h: float = 1e-5, reward: np.ndarray = None) -> float:
    """
    Central difference of V_i^pi(mu) in the entry pi_i(a_i|s), perturbing
    only that entry (linear extension of the policy table). ``reward``
    overrides player i's reward, e.g. with the potential table.
    """
    low, high = FD_STEP_RANGE
    if not low <= h <= high:
        raise ValueError(f"finite-difference step {h} outside [{low}, {high}]")
    reward = game.rewards[i] if reward is None else np.asarray(reward, dtype=float)
    mu = np.asarray(mu, dtype=float)
    values = []
    for sign in (1.0, -1.0):
        table = np.array(policy.player(i), dtype=float)
        table[s, a_i] += sign * h
        probe = policy.with_player(i, table, probe=True)
        values.append(float(mu @ iterative_values(game, probe, reward)))
    return (values[0] - values[1]) / (2.0 * h)


def random_deviation_probe(game: MarkovGame, policy: JointPolicy, i: int, num_samples: int = 100, seed: int = 0) -> float:
    """Best value of player i over ``num_samples`` random stochastic deviations."""
    rng = np.random.default_rng(seed)
    best = -np.inf
    for _ in range(num_samples):
        table = rng.dirichlet(np.ones(game.action_counts[i]), size=game.num_states)
        deviated = policy.with_player(i, table)
        value = float(game.initial_dist @ iterative_values(game, deviated, game.rewards[i]))
        best = max(best, value)
    return best


def enumerated_best_value(game: MarkovGame, policy: JointPolicy, i: int, cap: int = None) -> float:
    """max over every deterministic policy of player i, opponents frozen."""
    best = -np.inf
    for table in enumerate_deterministic_policies(game, scope="player", player=i, cap=cap):
        deviated = policy.with_player(i, table)
        best = max(best, float(game.initial_dist @ iterative_values(game, deviated, game.rewards[i])))
    return best
