import datetime
import logging
import os
import sqlite3

logger = logging.getLogger(__name__)


class ArtifactStore:
    """
    A small SQLite index of finished experiment cells, keyed by the content
    hash of their inputs, so that a rerun can reuse cells already on disk.
    """

    def __init__(self, output_dir: str, db_name: str = "artifacts.db"):
        """Opens (and creates if needed) the index inside ``output_dir``."""
        os.makedirs(output_dir, exist_ok=True)
        self.db_path = os.path.join(output_dir, db_name)
        try:
            self.conn = sqlite3.connect(self.db_path)
            self._create_table()
            logger.info(f"Successfully connected to artifact index at {self.db_path}")
        except sqlite3.Error as e:
            logger.error(f"Error connecting to artifact index: {e}")
            self.conn = None

    def _create_table(self):
        """Creates the artifacts table if it's not already present."""
        try:
            cursor = self.conn.cursor()
            cursor.execute(
                """
                CREATE TABLE IF NOT EXISTS artifacts (
                    content_hash TEXT PRIMARY KEY,
                    cell_id TEXT NOT NULL,
                    algorithm TEXT NOT NULL,
                    num_players INTEGER NOT NULL,
                    seed INTEGER NOT NULL,
                    created_at TEXT NOT NULL,
                    wall_seconds REAL,
                    directory TEXT NOT NULL
                );
            """
            )
            self.conn.commit()
        except sqlite3.Error as e:
            logger.error(f"Error creating artifacts table: {e}")

    def lookup(self, content_hash: str):
        """Directory of a cached cell whose files still exist, else None."""
        if self.conn is None:
            return None
        cursor = self.conn.cursor()
        cursor.execute("SELECT directory FROM artifacts WHERE content_hash = ?", (content_hash,))
        row = cursor.fetchone()
        if row is None:
            return None
        directory = row[0]
        if not os.path.exists(os.path.join(directory, "metadata.json")):
            logger.warning(f"Artifact {content_hash[:12]} is indexed but {directory} is gone")
            return None
        return directory

    def record(self, content_hash: str, cell_id: str, algorithm: str, num_players: int, seed: int, directory: str, wall_seconds: float = None):
        if self.conn is None:
            return False
        try:
            cursor = self.conn.cursor()
            cursor.execute(
                """
                INSERT OR REPLACE INTO artifacts
                (content_hash, cell_id, algorithm, num_players, seed, created_at, wall_seconds, directory)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?)
            """,
                (
                    content_hash,
                    cell_id,
                    algorithm,
                    int(num_players),
                    int(seed),
                    datetime.datetime.now().isoformat(timespec="seconds"),
                    wall_seconds,
                    directory,
                ),
            )
            self.conn.commit()
            return True
        except sqlite3.Error as e:
            logger.error(f"Error indexing artifact {cell_id}: {e}")
            return False

    def list_cells(self) -> list:
        if self.conn is None:
            return []
        cursor = self.conn.cursor()
        cursor.execute(
            "SELECT cell_id, algorithm, num_players, seed, content_hash FROM artifacts ORDER BY cell_id"
        )
        return cursor.fetchall()

    def close(self):
        if self.conn is not None:
            self.conn.close()
            self.conn = None
