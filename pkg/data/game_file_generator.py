import dataclasses
import os

from src.mpgpmd.games.game_io import save_game
from src.mpgpmd.games.generators import make_coordination_game, make_stateless_congestion


def create_game_files(output_dir):
    """
    Writes the shipped sample games: the 2x2 coordination game and the
    two-player two-facility congestion game with unit cost slopes.
    """
    print(f"Writing sample games to '{output_dir}'...")

    game, potential = make_coordination_game(num_players=2, num_actions=2)
    game = dataclasses.replace(game, name="coordination_2x2")
    save_game(os.path.join(output_dir, "coordination_2x2.json"), game, potential)

    game, potential = make_stateless_congestion(2, 2, seed=0, cost_weights=[1.0, 1.0])
    game = dataclasses.replace(game, name="congestion_2p2f")
    save_game(os.path.join(output_dir, "congestion_2p2f.json"), game, potential)

    print(f"✅ Successfully saved sample games to '{output_dir}'")


# This part runs when you execute the script directly
if __name__ == "__main__":
    OUTPUT_DIR = os.path.join("data", "games")

    create_game_files(OUTPUT_DIR)
