"""
Seeded generators for game families whose potential property holds by
construction.
"""

import logging

import numpy as np

from src.mpgpmd.errors import GameConstructionError
from src.mpgpmd.games.model import MarkovGame, PotentialSpec

logger = logging.getLogger(__name__)


def _check_sizes(num_players, num_states, action_counts, discount) -> tuple:
    if int(num_players) < 1:
        raise GameConstructionError(f"num_players must be positive, got {num_players}")
    if int(num_states) < 1:
        raise GameConstructionError(f"num_states must be positive, got {num_states}")
    counts = tuple(int(n) for n in action_counts)
    if len(counts) != int(num_players):
        raise GameConstructionError(
            f"action_counts lists {len(counts)} players, expected {num_players}"
        )
    if any(n < 1 for n in counts):
        raise GameConstructionError(f"action counts must be positive, got {counts}")
    if not 0.0 <= float(discount) < 1.0:
        raise GameConstructionError(f"discount must lie in [0, 1), got {discount}")
    return counts


def _normalized(rows: np.ndarray) -> np.ndarray:
    return rows / rows.sum(axis=-1, keepdims=True)


def make_identical_interest(
    num_players: int,
    num_states: int,
    action_counts,
    discount: float,
    seed: int,
) -> tuple:
    """
    Every player receives r_i = phi with phi ~ U[0, 1] entrywise, random
    Dirichlet transitions and a uniform initial distribution.
    """
    counts = _check_sizes(num_players, num_states, action_counts, discount)
    rng = np.random.default_rng(seed)
    num_joint = int(np.prod(counts))

    phi = rng.uniform(0.0, 1.0, size=(num_states, num_joint))
    transition = _normalized(rng.dirichlet(np.ones(num_states), size=(num_states, num_joint)))
    rewards = np.broadcast_to(phi, (len(counts), num_states, num_joint)).copy()
    initial_dist = np.full(num_states, 1.0 / num_states)

    game = MarkovGame(
        action_counts=counts,
        transition=transition,
        rewards=rewards,
        discount=discount,
        initial_dist=initial_dist,
        name=f"identical_interest_N{len(counts)}_S{num_states}_seed{seed}",
    )
    logger.info(f"Built identical-interest game {game.name}")
    return game, PotentialSpec.from_table(phi)


def make_weighted_identical_interest(
    num_players: int,
    num_states: int,
    action_counts,
    discount: float,
    seed: int,
    lead_weight: float = 0.4,
    follower_weight: float = 0.1,
) -> tuple:
    """
    Identical interest with a separable potential
    phi(s, a) = sum_i w_i b_i(s, a_i).

    Each b_i(s, .) is drawn from U[0, 1] and rescaled to span exactly
    [-1/2, 1/2]. Player 0 carries ``lead_weight`` and the others share
    ``follower_weight`` equally, so phi_max and the lead player's initial
    gap stay fixed as players are added.
    """
    counts = _check_sizes(num_players, num_states, action_counts, discount)
    if lead_weight <= 0 or follower_weight < 0:
        raise GameConstructionError(
            f"lead_weight must be positive and follower_weight nonnegative, got {lead_weight}, {follower_weight}"
        )
    rng = np.random.default_rng(seed)
    num_joint = int(np.prod(counts))
    choices = np.stack(np.unravel_index(np.arange(num_joint), counts), axis=1)
    followers = len(counts) - 1
    weights = [lead_weight] + [follower_weight / max(followers, 1)] * followers

    phi = np.zeros((num_states, num_joint))
    for i, n in enumerate(counts):
        own = rng.uniform(0.0, 1.0, size=(num_states, n))
        spread = own.max(axis=1, keepdims=True) - own.min(axis=1, keepdims=True)
        centered = own - (own.max(axis=1, keepdims=True) + own.min(axis=1, keepdims=True)) / 2.0
        own = np.divide(centered, spread, out=np.zeros_like(centered), where=spread > 0)
        phi += weights[i] * own[:, choices[:, i]]
    transition = _normalized(rng.dirichlet(np.ones(num_states), size=(num_states, num_joint)))

    game = MarkovGame(
        action_counts=counts,
        transition=transition,
        rewards=np.broadcast_to(phi, (len(counts), num_states, num_joint)).copy(),
        discount=discount,
        initial_dist=np.full(num_states, 1.0 / num_states),
        name=f"weighted_identical_interest_N{len(counts)}_S{num_states}_seed{seed}",
    )
    logger.info(f"Built weighted identical-interest game {game.name} with weights {weights[:2]}")
    return game, PotentialSpec.from_table(phi)


def make_dummy_term_mpg(
    num_players: int,
    num_states: int,
    action_counts,
    discount: float,
    seed: int,
    dummy_scale: float = 1.0,
) -> tuple:
    """
    Rewards r_i(s, a) = phi(s, a) + u_i(s, a_{-i}) where u_i ignores player
    i's own action and the transitions ignore actions entirely. Occupancy
    measures are then policy independent and a unilateral deviation of player
    i leaves the dummy term's contribution unchanged.
    """
    counts = _check_sizes(num_players, num_states, action_counts, discount)
    if dummy_scale < 0:
        raise GameConstructionError(f"dummy_scale must be nonnegative, got {dummy_scale}")
    rng = np.random.default_rng(seed)
    num_joint = int(np.prod(counts))

    phi = rng.uniform(0.0, 1.0, size=(num_states, num_joint))
    state_kernel = _normalized(rng.dirichlet(np.ones(num_states), size=num_states))
    transition = np.broadcast_to(
        state_kernel[:, None, :], (num_states, num_joint, num_states)
    ).copy()

    rewards = np.empty((len(counts), num_states, num_joint))
    for i in range(len(counts)):
        shape = [num_states, *counts]
        shape[1 + i] = 1
        dummy = dummy_scale * rng.uniform(0.0, 1.0, size=shape)
        dummy = np.broadcast_to(dummy, (num_states, *counts)).reshape(num_states, num_joint)
        rewards[i] = phi + dummy

    game = MarkovGame(
        action_counts=counts,
        transition=transition,
        rewards=rewards,
        discount=discount,
        initial_dist=np.full(num_states, 1.0 / num_states),
        name=f"dummy_term_N{len(counts)}_S{num_states}_seed{seed}",
    )
    logger.info(f"Built dummy-term game {game.name} (dummy_scale={dummy_scale})")
    return game, PotentialSpec.from_table(phi)


def make_stateless_congestion(
    num_players: int,
    num_facilities: int,
    seed: int,
    cost_weights=None,
) -> tuple:
    """
    Single-state congestion game: each player picks one facility and pays
    w_f * load_f. The potential is Rosenthal's, -sum_f w_f * (1 + ... + load_f).

    ``cost_weights`` fixes the per-facility slopes; otherwise they are drawn
    from U[0.5, 1.5] with ``seed``.
    """
    if int(num_facilities) < 1:
        raise GameConstructionError(f"num_facilities must be positive, got {num_facilities}")
    counts = _check_sizes(num_players, 1, [num_facilities] * int(num_players), 0.0)
    rng = np.random.default_rng(seed)
    if cost_weights is None:
        weights = rng.uniform(0.5, 1.5, size=num_facilities)
    else:
        weights = np.asarray(cost_weights, dtype=float)
        if weights.shape != (num_facilities,):
            raise GameConstructionError(
                f"cost_weights must list {num_facilities} slopes, got {weights.shape}"
            )

    num_joint = int(np.prod(counts))
    choices = np.stack(np.unravel_index(np.arange(num_joint), counts), axis=1)
    loads = np.stack([(choices == f).sum(axis=1) for f in range(num_facilities)], axis=1)

    own_load = np.take_along_axis(loads, choices, axis=1)
    rewards = -weights[choices] * own_load
    rosenthal = -(weights * loads * (loads + 1) / 2.0).sum(axis=1)

    game = MarkovGame(
        action_counts=counts,
        transition=np.ones((1, num_joint, 1)),
        rewards=rewards.T.reshape(len(counts), 1, num_joint),
        discount=0.0,
        initial_dist=np.ones(1),
        name=f"congestion_N{len(counts)}_F{num_facilities}_seed{seed}",
    )
    logger.info(f"Built congestion game {game.name} with slopes {weights.tolist()}")
    return game, PotentialSpec.from_table(rosenthal[None, :])


def make_coordination_game(num_players: int = 2, num_actions: int = 2, discount: float = 0.0) -> tuple:
    """Stateless pure coordination: reward 1 when every player picks the same action."""
    counts = _check_sizes(num_players, 1, [num_actions] * int(num_players), discount)
    num_joint = int(np.prod(counts))
    choices = np.stack(np.unravel_index(np.arange(num_joint), counts), axis=1)
    phi = np.all(choices == choices[:, :1], axis=1).astype(float)[None, :]

    game = MarkovGame(
        action_counts=counts,
        transition=np.ones((1, num_joint, 1)),
        rewards=np.broadcast_to(phi, (len(counts), 1, num_joint)).copy(),
        discount=discount,
        initial_dist=np.ones(1),
        name=f"coordination_N{len(counts)}_A{num_actions}",
    )
    return game, PotentialSpec.from_table(phi)


GAME_FAMILIES = {
    "identical_interest": make_identical_interest,
    "weighted_identical_interest": make_weighted_identical_interest,
    "dummy_term": make_dummy_term_mpg,
    "congestion": make_stateless_congestion,
    "coordination": make_coordination_game,
}
