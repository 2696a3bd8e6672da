"""
Exhaustive enumeration of deterministic stationary policies.

Order is lexicographic: a player's deterministic policy is the tuple
(a(s_0), ..., a(s_{S-1})) in ``itertools.product`` order, and joint policies
are products of player policies with player 1 varying slowest.
"""

import itertools
import os

import numpy as np

from src.mpgpmd.errors import EnumerationCapExceeded
from src.mpgpmd.games.model import JointPolicy, MarkovGame

DEFAULT_ENUMERATION_CAP = int(os.getenv("MPGPMD_ENUMERATION_CAP", 1_000_000))


def count_deterministic_policies(game: MarkovGame, scope: str = "joint", player: int = None) -> int:
    if scope == "player":
        return game.action_counts[player] ** game.num_states
    if scope == "joint":
        return int(np.prod([n ** game.num_states for n in game.action_counts], dtype=object))
    raise ValueError(f"Unknown enumeration scope '{scope}'")


def _check_cap(game, scope, player, cap, hint=""):
    cap = DEFAULT_ENUMERATION_CAP if cap is None else cap
    count = count_deterministic_policies(game, scope, player)
    if count > cap:
        raise EnumerationCapExceeded(f"{scope} deterministic policies", count, cap, hint)
    return count


def player_choice_table(game: MarkovGame, player: int) -> np.ndarray:
    """(|A_i|^S, S) array; row k is the action taken in every state by policy k."""
    choices = itertools.product(range(game.action_counts[player]), repeat=game.num_states)
    return np.array(list(choices), dtype=int).reshape(-1, game.num_states)


def joint_choice_table(game: MarkovGame, cap: int = None, hint: str = "") -> np.ndarray:
    """
    (K, N, S) array of the actions every deterministic joint policy takes,
    in enumeration order.
    """
    _check_cap(game, "joint", None, cap, hint)
    tables = [player_choice_table(game, i) for i in range(game.num_players)]
    index = np.indices([len(t) for t in tables]).reshape(game.num_players, -1).T
    return np.stack([tables[i][index[:, i]] for i in range(game.num_players)], axis=1)


def joint_action_table(game: MarkovGame, choices: np.ndarray) -> np.ndarray:
    """Flat joint action per state, (K, S), for a (K, N, S) choice table."""
    return np.ravel_multi_index(tuple(np.moveaxis(choices, 1, 0)), game.action_counts)


def enumerate_deterministic_policies(game: MarkovGame, scope: str = "joint", player: int = None, cap: int = None):
    """
    Yields every deterministic policy exactly once.

    ``scope="joint"`` yields JointPolicy objects; ``scope="player"`` yields the
    (S, A_i) one-hot tables of ``player``.
    """
    _check_cap(game, scope, player, cap)
    if scope == "player":
        eye = np.eye(game.action_counts[player])
        for choice in player_choice_table(game, player):
            yield eye[choice]
        return
    for choices in joint_choice_table(game, cap):
        yield JointPolicy.deterministic(game, choices)
