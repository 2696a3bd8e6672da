"""
Exact policy evaluation by dense linear solves.

For a joint policy pi the system (I - gamma P_pi) V = r_pi is factorised once
with an LU decomposition; the same factors give every player's values, the
potential's values (when a potential is supplied) and, through the transposed
system, discounted occupancy measures d_mu^pi = (1 - gamma) (I - gamma P_pi^T)^{-1} mu.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from src.mpgpmd.errors import (
    DimensionMismatchError,
    GameConstructionError,
    MissingPotentialError,
    SolverError,
)
from src.mpgpmd.games.model import (
    CONSTRUCTION_TOLERANCE,
    JointPolicy,
    MarkovGame,
    PotentialSpec,
    marginalize_opponents,
)

logger = logging.getLogger(__name__)

BELLMAN_TOLERANCE = 1e-10
DETERMINISTIC_CHUNK = 65536


def _check_mu(game: MarkovGame, mu) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (game.num_states,):
        raise DimensionMismatchError(
            f"distribution has shape {mu.shape}, expected ({game.num_states},)"
        )
    if np.any(mu < 0) or abs(mu.sum() - 1.0) > CONSTRUCTION_TOLERANCE:
        raise GameConstructionError("mu must be a probability distribution over states.")
    return mu


@dataclass(frozen=True, eq=False)
class EvalBundle:
    """
    Everything exact evaluation produces for one joint policy.

    ``q_values[i]`` is Q_i^pi over (S, A); ``avg_q[i]`` and ``avg_adv[i]`` are the
    (S, A_i) averaged Q-values and advantages. Potential quantities are None
    when no potential was supplied.
    """

    game: MarkovGame
    policy: JointPolicy
    q_values: np.ndarray
    v_values: np.ndarray
    avg_q: tuple
    avg_adv: tuple
    occupancy: np.ndarray
    potential_q: np.ndarray
    potential_v: np.ndarray
    avg_potential_q: tuple
    avg_potential_adv: tuple
    bellman_residual: float
    lu: tuple

    def occupancy_for(self, mu) -> np.ndarray:
        """d_mu^pi for any initial distribution mu."""
        mu = _check_mu(self.game, mu)
        return _occupancy_from_lu(self.lu, self.game.discount, mu, normalize=not self.policy.probe)

    def value(self, i: int, mu=None) -> float:
        mu = self.game.initial_dist if mu is None else _check_mu(self.game, mu)
        return float(mu @ self.v_values[i])

    def values(self, mu=None) -> np.ndarray:
        mu = self.game.initial_dist if mu is None else _check_mu(self.game, mu)
        return self.v_values @ mu

    def total_potential(self, mu=None) -> float:
        if self.potential_v is None:
            raise MissingPotentialError("This bundle was evaluated without a potential.")
        mu = self.game.initial_dist if mu is None else _check_mu(self.game, mu)
        return float(mu @ self.potential_v)

    def to_dict(self) -> dict:
        """Plain-list dump for debugging output."""
        dump = {
            "q_values": self.q_values.tolist(),
            "v_values": self.v_values.tolist(),
            "avg_q": [t.tolist() for t in self.avg_q],
            "avg_adv": [t.tolist() for t in self.avg_adv],
            "occupancy": self.occupancy.tolist(),
            "bellman_residual": self.bellman_residual,
        }
        if self.potential_q is not None:
            dump["potential_q"] = self.potential_q.tolist()
            dump["potential_v"] = self.potential_v.tolist()
        return dump


def _occupancy_from_lu(lu, discount, mu, normalize=True) -> np.ndarray:
    d = (1.0 - discount) * lu_solve(lu, mu, trans=1)
    if normalize:
        d = np.clip(d, 0.0, None)
        d = d / d.sum()
    return d


def state_transition_matrix(game: MarkovGame, joint: np.ndarray) -> np.ndarray:
    """P_pi(s, s') = sum_a pi(a|s) P(s, a, s')."""
    return np.einsum("sa,sat->st", joint, game.transition)


def evaluate(game: MarkovGame, policy: JointPolicy, potential: PotentialSpec = None) -> EvalBundle:
    """
    Solves the Bellman equations of every player (and of the potential) under
    ``policy`` and derives averaged Q-values, advantages and occupancy.
    """
    policy.check_against(game)
    if potential is not None:
        potential.check_against(game)

    gamma = game.discount
    joint = policy.joint()
    p_pi = state_transition_matrix(game, joint)
    system = np.eye(game.num_states) - gamma * p_pi
    try:
        lu = lu_factor(system, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as e:
        raise SolverError(f"Policy evaluation system could not be factorised: {e}")

    sources = game.rewards
    if potential is not None:
        sources = np.concatenate([sources, potential.phi[None]], axis=0)

    r_pi = np.einsum("sa,ksa->sk", joint, sources)
    v = lu_solve(lu, r_pi).T
    q = sources + gamma * np.einsum("sat,kt->ksa", game.transition, v)

    v_from_q = np.einsum("sa,ksa->ks", joint, q)
    residual = float(np.max(np.abs(v_from_q - v)))
    scale = max(1.0, float(np.max(np.abs(q))))
    if residual > BELLMAN_TOLERANCE * scale:
        raise SolverError(f"Bellman residual {residual:.3e} exceeds tolerance.")

    num_players = game.num_players
    q_players, v_players = q[:num_players], v[:num_players]
    avg_q = tuple(marginalize_opponents(q_players[i], policy, i) for i in range(num_players))
    avg_adv = tuple(avg_q[i] - v_players[i][:, None] for i in range(num_players))

    potential_q = potential_v = avg_potential_q = avg_potential_adv = None
    if potential is not None:
        potential_q, potential_v = q[num_players], v[num_players]
        avg_potential_q = tuple(
            marginalize_opponents(potential_q, policy, i) for i in range(num_players)
        )
        avg_potential_adv = tuple(
            avg_potential_q[i] - potential_v[:, None] for i in range(num_players)
        )

    occupancy = _occupancy_from_lu(lu, gamma, game.initial_dist, normalize=not policy.probe)

    return EvalBundle(
        game=game,
        policy=policy,
        q_values=q_players,
        v_values=v_players,
        avg_q=avg_q,
        avg_adv=avg_adv,
        occupancy=occupancy,
        potential_q=potential_q,
        potential_v=potential_v,
        avg_potential_q=avg_potential_q,
        avg_potential_adv=avg_potential_adv,
        bellman_residual=residual,
        lu=lu,
    )


def occupancy_measure(game: MarkovGame, policy: JointPolicy, mu) -> np.ndarray:
    """Discounted state occupancy d_mu^pi from the adjoint linear system."""
    policy.check_against(game)
    mu = _check_mu(game, mu)
    p_pi = state_transition_matrix(game, policy.joint())
    lu = lu_factor(np.eye(game.num_states) - game.discount * p_pi)
    return _occupancy_from_lu(lu, game.discount, mu, normalize=not policy.probe)


def potential_range(game: MarkovGame, potential: PotentialSpec) -> float:
    """Upper bound phi_max / (1 - gamma) on |Phi^pi(mu)|."""
    return potential.phi_max / (1.0 - game.discount)


def total_potential(game: MarkovGame, potential: PotentialSpec, policy: JointPolicy, mu) -> float:
    if potential is None:
        raise MissingPotentialError("total_potential needs a potential table.")
    value = evaluate(game, policy, potential).total_potential(mu)
    if abs(value) > potential_range(game, potential) * (1.0 + 1e-12) + 1e-12:
        raise SolverError(f"Total potential {value} exceeds phi_max / (1 - gamma).")
    return value


def policy_gradient(game: MarkovGame, policy: JointPolicy, i: int, mu=None, bundle: EvalBundle = None, of_potential: bool = False) -> np.ndarray:
    """
    (S, A_i) table of dV_i^pi(mu)/dpi_i(a_i|s) = d_mu^pi(s) Qbar_i^pi(s, a_i) / (1 - gamma).

    With ``of_potential=True`` the potential's averaged Q-values are used,
    giving the gradient of Phi^pi(mu).
    """
    if bundle is None:
        bundle = evaluate(game, policy)
    mu = game.initial_dist if mu is None else mu
    d = bundle.occupancy_for(mu)
    if of_potential:
        if bundle.avg_potential_q is None:
            raise MissingPotentialError("Potential gradient needs a bundle evaluated with a potential.")
        table = bundle.avg_potential_q[i]
    else:
        table = bundle.avg_q[i]
    return d[:, None] * table / (1.0 - game.discount)


def policy_gradient_entry(game: MarkovGame, policy: JointPolicy, i: int, s: int, a_i: int, mu) -> float:
    if not 0 <= i < game.num_players:
        raise IndexError(f"player index {i} out of range")
    if not 0 <= s < game.num_states or not 0 <= a_i < game.action_counts[i]:
        raise IndexError(f"entry ({s}, {a_i}) out of range for player {i}")
    return float(policy_gradient(game, policy, i, mu)[s, a_i])


def joint_perf_diff_residual(game: MarkovGame, policy_a: JointPolicy, policy_b: JointPolicy, mu, reward_tables: np.ndarray) -> float:
    """
    Performance difference lemma on the joint action space, for each reward
    table k: V_k^b(mu) - V_k^a(mu) = 1/(1-gamma) sum_{s,a} d_mu^b(s) (pi_b - pi_a)(a|s) Q_k^a(s, a).
    """
    mu = _check_mu(game, mu)
    gamma = game.discount
    worst = 0.0
    joint_a, joint_b = policy_a.joint(), policy_b.joint()
    d_b = occupancy_measure(game, policy_b, mu)
    for reward in reward_tables:
        values = []
        q_a = None
        for joint in (joint_a, joint_b):
            p_pi = state_transition_matrix(game, joint)
            lu = lu_factor(np.eye(game.num_states) - gamma * p_pi)
            v = lu_solve(lu, (joint * reward).sum(axis=1))
            values.append(float(mu @ v))
            if q_a is None:
                q_a = reward + gamma * game.transition @ v
        rhs = float(np.sum(d_b[:, None] * (joint_b - joint_a) * q_a)) / (1.0 - gamma)
        worst = max(worst, abs(values[1] - values[0] - rhs))
    return worst


def deviation_perf_diff_residual(game: MarkovGame, policy_a: JointPolicy, policy_b: JointPolicy, mu) -> float:
    """
    Single-agent deviation form: for each player i with pi' = (pi_b_i, pi_a_{-i}),
    V_i^{pi'}(mu) - V_i^{pi_a}(mu) = 1/(1-gamma) sum_s d_mu^{pi'}(s) <pi'_i - pi_a_i, Qbar_i^{pi_a}(s, .)>.
    """
    mu = _check_mu(game, mu)
    base = evaluate(game, policy_a)
    worst = 0.0
    for i in range(game.num_players):
        deviated = policy_a.with_player(i, policy_b.player(i))
        dev = evaluate(game, deviated)
        d_dev = dev.occupancy_for(mu)
        delta = deviated.player(i) - policy_a.player(i)
        rhs = float(np.sum(d_dev[:, None] * delta * base.avg_q[i])) / (1.0 - game.discount)
        worst = max(worst, abs(dev.value(i, mu) - base.value(i, mu) - rhs))
    return worst


def perf_diff_check(game: MarkovGame, policy_a: JointPolicy, policy_b: JointPolicy, mu, potential: PotentialSpec = None) -> float:
    """Largest residual of the joint and single-deviation performance difference identities."""
    tables = game.rewards
    if potential is not None:
        tables = np.concatenate([tables, potential.phi[None]], axis=0)
    return max(
        joint_perf_diff_residual(game, policy_a, policy_b, mu, tables),
        deviation_perf_diff_residual(game, policy_a, policy_b, mu),
    )


def policy_increment_residual(policy_a: JointPolicy, policy_b: JointPolicy) -> float:
    """
    Checks pi_b(a|s) - pi_a(a|s) = sum_i (H_i - H_{i-1})(a|s), where the hybrid
    H_i takes players 1..i from pi_b and the rest from pi_a.
    """
    num_players = policy_a.num_players
    hybrids = []
    for i in range(num_players + 1):
        rows = tuple(policy_b.rows[:i]) + tuple(policy_a.rows[i:])
        hybrids.append(JointPolicy(rows).joint())
    telescoped = sum(hybrids[i + 1] - hybrids[i] for i in range(num_players))
    return float(np.max(np.abs(policy_b.joint() - policy_a.joint() - telescoped)))


def _deterministic_systems(game: MarkovGame, joint_actions: np.ndarray) -> np.ndarray:
    states = np.arange(game.num_states)
    p_pi = game.transition[states[None, :], joint_actions]
    return np.eye(game.num_states)[None] - game.discount * p_pi


def deterministic_values(game: MarkovGame, joint_actions: np.ndarray, reward_tables: np.ndarray, mu) -> np.ndarray:
    """
    Batched exact values of deterministic joint policies.

    ``joint_actions`` is (K, S) with the joint action played in each state;
    returns the (K, R) values at ``mu`` for each of the R reward tables.
    """
    mu = _check_mu(game, mu)
    states = np.arange(game.num_states)
    out = np.empty((len(joint_actions), len(reward_tables)))
    for start in range(0, len(joint_actions), DETERMINISTIC_CHUNK):
        chunk = joint_actions[start:start + DETERMINISTIC_CHUNK]
        systems = _deterministic_systems(game, chunk)
        r_pi = np.moveaxis(reward_tables[:, states[None, :], chunk], 0, -1)
        v = np.linalg.solve(systems, r_pi)
        out[start:start + len(chunk)] = np.einsum("s,ksr->kr", mu, v)
    return out


def deterministic_occupancies(game: MarkovGame, joint_actions: np.ndarray, mu) -> np.ndarray:
    """Batched occupancy measures, (K, S), of deterministic joint policies."""
    mu = _check_mu(game, mu)
    out = np.empty((len(joint_actions), game.num_states))
    for start in range(0, len(joint_actions), DETERMINISTIC_CHUNK):
        chunk = joint_actions[start:start + DETERMINISTIC_CHUNK]
        systems = np.swapaxes(_deterministic_systems(game, chunk), 1, 2)
        rhs = np.broadcast_to(mu[:, None], (len(chunk), game.num_states, 1))
        out[start:start + len(chunk)] = (1.0 - game.discount) * np.linalg.solve(systems, rhs)[..., 0]
    return out
