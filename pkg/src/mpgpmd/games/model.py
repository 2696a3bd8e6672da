"""
Data model for finite Markov games, their statewise potentials and joint
product policies.

Joint actions are a flat index in row-major order over (a_1, ..., a_N), the
order used by ``np.ravel_multi_index``. Tables are laid out as
``transition[s, a, s']``, ``rewards[i, s, a]`` and ``phi[s, a]``; a joint
policy keeps one ``(S, A_i)`` row table per player.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from src.mpgpmd.errors import DimensionMismatchError, GameConstructionError

CONSTRUCTION_TOLERANCE = 1e-12


def _frozen(array) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


def _check_distribution_rows(rows: np.ndarray, what: str):
    if not np.all(np.isfinite(rows)):
        raise GameConstructionError(f"{what} contains non-finite entries.")
    if np.any(rows < 0):
        raise GameConstructionError(f"{what} has negative entries.")
    worst = float(np.max(np.abs(rows.sum(axis=-1) - 1.0)))
    if worst > CONSTRUCTION_TOLERANCE:
        raise GameConstructionError(
            f"{what} rows must sum to 1 (largest deviation {worst:.3e})."
        )


@dataclass(frozen=True, eq=False)
class MarkovGame:
    """
    A discounted finite Markov game with N players.
    """

    action_counts: tuple
    transition: np.ndarray
    rewards: np.ndarray
    discount: float
    initial_dist: np.ndarray
    name: str = "game"

    def __post_init__(self):
        counts = tuple(int(n) for n in self.action_counts)
        if len(counts) < 1 or any(n < 1 for n in counts):
            raise GameConstructionError(
                f"action_counts must list at least one positive count, got {self.action_counts}"
            )
        object.__setattr__(self, "action_counts", counts)

        transition = _frozen(self.transition)
        rewards = _frozen(self.rewards)
        initial_dist = _frozen(self.initial_dist)
        num_joint = int(np.prod(counts))

        if transition.ndim != 3 or transition.shape[0] != transition.shape[2]:
            raise GameConstructionError(
                f"transition must have shape (S, A, S), got {transition.shape}"
            )
        num_states = transition.shape[0]
        if num_states < 1:
            raise GameConstructionError("A game needs at least one state.")
        if transition.shape[1] != num_joint:
            raise GameConstructionError(
                f"transition has {transition.shape[1]} joint actions, expected {num_joint}"
            )
        if rewards.shape != (len(counts), num_states, num_joint):
            raise GameConstructionError(
                f"rewards must have shape {(len(counts), num_states, num_joint)}, got {rewards.shape}"
            )
        if not np.all(np.isfinite(rewards)):
            raise GameConstructionError("rewards contain non-finite entries.")
        if initial_dist.shape != (num_states,):
            raise GameConstructionError(
                f"initial_dist must have shape ({num_states},), got {initial_dist.shape}"
            )
        if not 0.0 <= float(self.discount) < 1.0:
            raise GameConstructionError(f"discount must lie in [0, 1), got {self.discount}")

        _check_distribution_rows(transition, "transition")
        _check_distribution_rows(initial_dist, "initial_dist")

        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "initial_dist", initial_dist)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def num_players(self) -> int:
        return len(self.action_counts)

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_joint_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def total_actions(self) -> int:
        """Sum of the per-player action counts."""
        return int(sum(self.action_counts))

    def joint_index(self, actions) -> int:
        return int(np.ravel_multi_index(tuple(actions), self.action_counts))

    def joint_actions(self, index: int) -> tuple:
        return tuple(int(a) for a in np.unravel_index(index, self.action_counts))

    def action_table(self) -> np.ndarray:
        """(A, N) array with the per-player actions of every joint action."""
        return np.stack(
            np.unravel_index(np.arange(self.num_joint_actions), self.action_counts),
            axis=1,
        )

    def has_action_independent_transitions(self) -> bool:
        return bool(np.all(self.transition == self.transition[:, :1, :]))

    def digest(self) -> str:
        """SHA-256 over every table, used to address artifacts."""
        h = hashlib.sha256()
        h.update(repr((self.action_counts, self.discount)).encode())
        for table in (self.transition, self.rewards, self.initial_dist):
            h.update(np.ascontiguousarray(table).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "num_players": self.num_players,
            "num_states": self.num_states,
            "action_counts": list(self.action_counts),
            "discount": self.discount,
            "initial_dist": self.initial_dist.tolist(),
            "transition": self.transition.tolist(),
            "rewards": self.rewards.tolist(),
        }


@dataclass(frozen=True, eq=False)
class PotentialSpec:
    """Statewise potential phi(s, a) with its exact maximum absolute entry."""

    phi: np.ndarray
    phi_max: float

    def __post_init__(self):
        phi = _frozen(self.phi)
        if phi.ndim != 2:
            raise GameConstructionError(f"phi must have shape (S, A), got {phi.shape}")
        if not np.all(np.isfinite(phi)):
            raise GameConstructionError("phi contains non-finite entries.")
        exact = float(np.max(np.abs(phi)))
        if float(self.phi_max) != exact:
            raise GameConstructionError(
                f"phi_max={self.phi_max} does not match the table maximum {exact}"
            )
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "phi_max", exact)

    @classmethod
    def from_table(cls, phi) -> "PotentialSpec":
        phi = np.asarray(phi, dtype=float)
        return cls(phi=phi, phi_max=float(np.max(np.abs(phi))))

    def check_against(self, game: MarkovGame):
        if self.phi.shape != (game.num_states, game.num_joint_actions):
            raise DimensionMismatchError(
                f"phi has shape {self.phi.shape}, game expects "
                f"{(game.num_states, game.num_joint_actions)}"
            )


@dataclass(frozen=True, eq=False)
class JointPolicy:
    """
    Product policy: one (S, A_i) table of probability rows per player.

    ``probe=True`` relaxes the stochasticity check so that single entries can
    be perturbed for finite-difference probing of the multilinear extension.
    """

    rows: tuple
    probe: bool = field(default=False)

    def __post_init__(self):
        rows = tuple(_frozen(r) for r in self.rows)
        if not rows:
            raise GameConstructionError("A joint policy needs at least one player.")
        num_states = rows[0].shape[0]
        for i, table in enumerate(rows):
            if table.ndim != 2 or table.shape[0] != num_states or table.shape[1] < 1:
                raise DimensionMismatchError(
                    f"policy rows of player {i} have shape {table.shape}"
                )
            if self.probe:
                if not np.all(np.isfinite(table)):
                    raise GameConstructionError(f"probe policy of player {i} is not finite.")
            else:
                _check_distribution_rows(table, f"policy of player {i}")
        object.__setattr__(self, "rows", rows)

    @property
    def num_players(self) -> int:
        return len(self.rows)

    @property
    def num_states(self) -> int:
        return self.rows[0].shape[0]

    @property
    def action_counts(self) -> tuple:
        return tuple(r.shape[1] for r in self.rows)

    @classmethod
    def uniform(cls, game: MarkovGame) -> "JointPolicy":
        return cls(
            tuple(np.full((game.num_states, n), 1.0 / n) for n in game.action_counts)
        )

    @classmethod
    def deterministic(cls, game: MarkovGame, choices) -> "JointPolicy":
        """``choices[i][s]`` is the action player i takes in state s."""
        choices = np.asarray(choices, dtype=int)
        rows = []
        for i, n in enumerate(game.action_counts):
            table = np.zeros((game.num_states, n))
            table[np.arange(game.num_states), choices[i]] = 1.0
            rows.append(table)
        return cls(tuple(rows))

    @classmethod
    def random_interior(cls, game: MarkovGame, rng: np.random.Generator) -> "JointPolicy":
        return cls(
            tuple(
                rng.dirichlet(np.ones(n), size=game.num_states)
                for n in game.action_counts
            )
        )

    @classmethod
    def biased(cls, game: MarkovGame, action: int = 0, bias: float = 0.1) -> "JointPolicy":
        """Uniform rows with ``bias`` extra mass moved onto ``action``."""
        rows = []
        for n in game.action_counts:
            table = np.full((game.num_states, n), 1.0 / n)
            if n > 1:
                shift = min(bias, 1.0 - 1.0 / n)
                table -= shift / (n - 1)
                table[:, action % n] += shift + shift / (n - 1)
            rows.append(table / table.sum(axis=1, keepdims=True))
        return cls(tuple(rows))

    def check_against(self, game: MarkovGame):
        if self.num_states != game.num_states or self.action_counts != game.action_counts:
            raise DimensionMismatchError(
                f"policy shape {(self.num_states, self.action_counts)} does not match "
                f"game {(game.num_states, game.action_counts)}"
            )

    def player(self, i: int) -> np.ndarray:
        return self.rows[i]

    def with_player(self, i: int, table, probe: bool = None) -> "JointPolicy":
        rows = list(self.rows)
        rows[i] = np.asarray(table, dtype=float)
        return JointPolicy(tuple(rows), probe=self.probe if probe is None else probe)

    def joint(self) -> np.ndarray:
        """(S, A) table of joint probabilities prod_i pi_i(a_i|s), row-major."""
        out = self.rows[0]
        for table in self.rows[1:]:
            out = (out[:, :, None] * table[:, None, :]).reshape(self.num_states, -1)
        return out

    def to_list(self) -> list:
        return [r.tolist() for r in self.rows]


def marginalize_opponents(table: np.ndarray, policy: JointPolicy, i: int) -> np.ndarray:
    """
    Average ``table[s, a, ...]`` over a_{-i} ~ pi_{-i}(.|s).

    Returns an array of shape (S, A_i, ...) keeping any trailing axes, e.g.
    next-state axes of a transition kernel. Opponents are contracted one at a
    time, last player first, on a (S, before, A_j, after) view of the table.
    """
    counts = policy.action_counts
    num_states = policy.num_states
    trailing = table.shape[2:]
    if table.shape[:2] != (num_states, int(np.prod(counts))):
        raise DimensionMismatchError(
            f"table of shape {table.shape} does not match policy {(num_states, counts)}"
        )
    tensor = np.asarray(table)
    for j in range(len(counts) - 1, -1, -1):
        if j == i:
            continue
        before = int(np.prod(counts[:j], dtype=int))
        view = tensor.reshape(num_states, before, counts[j], -1)
        tensor = np.einsum("sbat,sa->sbt", view, policy.rows[j])
    return tensor.reshape((num_states, counts[i]) + trailing)
