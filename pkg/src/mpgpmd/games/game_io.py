"""
Reading and writing game files.

A game file is a JSON document with the fields ``num_players``,
``num_states``, ``action_counts``, ``discount``, ``initial_dist``,
``transition`` ([s][joint_a][s']), ``rewards`` ([i][s][joint_a]) and the
optional ``potential`` ([s][joint_a]) and ``phi_max``. Joint actions are
row-major over (a_1, ..., a_N).
"""

import json
import logging
import os

import numpy as np

from src.mpgpmd.errors import GameConstructionError
from src.mpgpmd.games.model import MarkovGame, PotentialSpec

logger = logging.getLogger(__name__)

REQUIRED_FIELDS = (
    "num_players",
    "num_states",
    "action_counts",
    "discount",
    "initial_dist",
    "transition",
    "rewards",
)
OPTIONAL_FIELDS = ("potential", "phi_max", "name")


def game_from_dict(document: dict) -> tuple:
    """Validates a parsed game document and returns (game, potential or None)."""
    missing = [key for key in REQUIRED_FIELDS if key not in document]
    if missing:
        raise GameConstructionError(f"Game file is missing fields: {missing}")
    unknown = sorted(set(document) - set(REQUIRED_FIELDS) - set(OPTIONAL_FIELDS))
    if unknown:
        raise GameConstructionError(f"Game file has unknown fields: {unknown}")

    counts = tuple(int(n) for n in document["action_counts"])
    if len(counts) != int(document["num_players"]):
        raise GameConstructionError(
            f"action_counts lists {len(counts)} players but num_players is {document['num_players']}"
        )
    try:
        transition = np.asarray(document["transition"], dtype=float)
        rewards = np.asarray(document["rewards"], dtype=float)
        initial_dist = np.asarray(document["initial_dist"], dtype=float)
    except (TypeError, ValueError) as e:
        raise GameConstructionError(f"Game tables are not rectangular numeric arrays: {e}")
    if transition.shape[:1] != (int(document["num_states"]),):
        raise GameConstructionError(
            f"transition covers {transition.shape[:1]} states, num_states is {document['num_states']}"
        )

    game = MarkovGame(
        action_counts=counts,
        transition=transition,
        rewards=rewards,
        discount=float(document["discount"]),
        initial_dist=initial_dist,
        name=str(document.get("name", "game")),
    )

    potential = None
    if "potential" in document:
        phi = np.asarray(document["potential"], dtype=float)
        if "phi_max" in document:
            potential = PotentialSpec(phi=phi, phi_max=float(document["phi_max"]))
        else:
            potential = PotentialSpec.from_table(phi)
        potential.check_against(game)
    elif "phi_max" in document:
        raise GameConstructionError("phi_max given without a potential table.")
    return game, potential


def game_to_dict(game: MarkovGame, potential: PotentialSpec = None) -> dict:
    document = {"name": game.name, **game.to_dict()}
    if potential is not None:
        document["potential"] = potential.phi.tolist()
        document["phi_max"] = potential.phi_max
    return document


def load_game(path: str) -> tuple:
    try:
        with open(path) as f:
            document = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise GameConstructionError(f"Could not read game file '{path}': {e}")
    game, potential = game_from_dict(document)
    logger.info(f"Loaded game '{game.name}' from {path}")
    return game, potential


def save_game(path: str, game: MarkovGame, potential: PotentialSpec = None):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        json.dump(game_to_dict(game, potential), f, indent=2)
    logger.info(f"Saved game '{game.name}' to {path}")
