import logging
import os

from dotenv import load_dotenv

from src.mpgpmd.experiments.config import apply_overrides, load_config
from src.mpgpmd.experiments.tools import initialize_tools

load_dotenv()

logger = logging.getLogger(__name__)


def configure_logging():
    """File logging set up once, for the whole process, from the environment."""
    logging.basicConfig(
        level=os.getenv("MPGPMD_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s - %(levelname)s - %(message)s",
        filename=os.getenv("MPGPMD_LOG_FILE", "mpgpmd.log"),
        filemode="a",
    )


class ExperimentApp:
    """
    Orchestrates config loading, flag overrides and dispatch of the
    run | sweep | certify | bounds verbs.
    """

    def __init__(self, config_path: str, overrides: dict = None, progress: bool = True):
        """
        Loads the experiment config and initializes the verb registry.
        """
        config = load_config(config_path)
        self.config = apply_overrides(config, **(overrides or {}))
        self.tool_registry, self.store = initialize_tools(self.config, progress=progress)
        logger.info(f"ExperimentApp initialized for '{self.config.name}'")

    def dispatch(self, verb: str) -> dict:
        """
        Runs one verb and returns its structured result.
        """
        if verb not in self.tool_registry:
            logger.warning(f"Unknown verb '{verb}'")
            return {"success": False, "certified": False, "message": f"Unknown verb '{verb}'"}
        try:
            result = self.tool_registry[verb]()
        except Exception as e:
            logger.error(f"Error calling verb '{verb}': {e}")
            result = {"success": False, "certified": False, "message": f"Internal error: {e}"}
        finally:
            self.store.close()

        logger.info(f"Verb '{verb}' finished: {result.get('message')}")
        return result

    @staticmethod
    def exit_code(result: dict) -> int:
        return 0 if result.get("success") and result.get("certified") else 1
