import logging
import os

import pandas as pd

from src.mpgpmd.errors import EnumerationCapExceeded, MpgError
from src.mpgpmd.experiments.artifact_store import ArtifactStore
from src.mpgpmd.experiments.config import ExperimentConfig
from src.mpgpmd.experiments.outputs import cell_writer, certification_frame, emit_experiment, emit_table
from src.mpgpmd.experiments.runner import (
    bounds_table,
    build_game,
    run_certification,
    run_experiment,
    scaling_summary,
    summary_frame,
)

# Get the logger instance that is configured in app.py
logger = logging.getLogger(__name__)


def _experiment_dir(config: ExperimentConfig) -> str:
    return os.path.join(config.resolved_output_dir(), config.name)


def _failure(verb: str, e: Exception) -> dict:
    if isinstance(e, EnumerationCapExceeded):
        logger.error(f"Verb '{verb}' refused to enumerate: {e}")
    else:
        logger.error(f"Error running verb '{verb}': {e}")
    return {"success": False, "certified": False, "message": str(e)}


def run_experiment_verb(config: ExperimentConfig, store: ArtifactStore, progress: bool = True) -> dict:
    """Runs every cell of the config and writes traces and the summary table."""
    logger.info(f"Executing verb: run with config '{config.name}'")
    try:
        experiment_dir = _experiment_dir(config)
        artifacts = run_experiment(config, store=store, writer=cell_writer(experiment_dir, config.format), progress=progress)
        summary = summary_frame(artifacts)
        paths = emit_experiment(artifacts, summary, experiment_dir, config.format)
        certified = all(a.passed for a in artifacts)
        return {
            "success": True,
            "certified": certified,
            "message": f"{len(artifacts)} cells written to {experiment_dir}",
            "paths": paths,
            "artifacts": artifacts,
        }
    except (MpgError, ValueError, OSError) as e:
        return _failure("run", e)


def sweep_verb(config: ExperimentConfig, store: ArtifactStore, progress: bool = True) -> dict:
    """Runs a num_players sweep and adds the scaling summary for every epsilon."""
    logger.info(f"Executing verb: sweep with config '{config.name}'")
    if config.sweep is None:
        logger.warning("sweep called on a config without a sweep section.")
        return {"success": False, "certified": False, "message": "The config has no 'sweep' section."}
    try:
        experiment_dir = _experiment_dir(config)
        artifacts = run_experiment(config, store=store, writer=cell_writer(experiment_dir, config.format), progress=progress)
        summary = summary_frame(artifacts)
        scaling = pd.concat([scaling_summary(artifacts, eps) for eps in config.epsilons], ignore_index=True)
        paths = emit_experiment(artifacts, summary, experiment_dir, config.format, scaling=scaling)
        return {
            "success": True,
            "certified": all(a.passed for a in artifacts),
            "message": f"Sweep over N={config.sweep.values} written to {experiment_dir}",
            "paths": paths,
            "artifacts": artifacts,
            "scaling": scaling,
        }
    except (MpgError, ValueError, OSError) as e:
        return _failure("sweep", e)


def certify_verb(config: ExperimentConfig, progress: bool = True) -> dict:
    """Runs only the oracle suite on every game instance of the config."""
    logger.info(f"Executing verb: certify with config '{config.name}'")
    try:
        players = config.sweep.values if config.sweep is not None else [config.game.num_players]
        reports = []
        for n in players:
            for seed in config.seeds:
                game, potential = build_game(config.game, n, seed)
                reports.extend(
                    run_certification(game, potential, config.certification, seed=seed, cap=config.enumeration_cap)
                )
        path = emit_table(certification_frame(reports), _experiment_dir(config), "certification", config.format)
        failed = [r for r in reports if not r.passed]
        return {
            "success": True,
            "certified": not failed,
            "message": f"{len(reports) - len(failed)}/{len(reports)} oracle checks passed",
            "paths": [path],
            "reports": reports,
        }
    except (MpgError, ValueError, OSError) as e:
        return _failure("certify", e)


def bounds_verb(config: ExperimentConfig, progress: bool = True) -> dict:
    """Writes the closed-form bound tables without running PMD."""
    logger.info(f"Executing verb: bounds with config '{config.name}'")
    try:
        table = bounds_table(config)
        path = emit_table(table, _experiment_dir(config), "bounds", config.format)
        return {
            "success": True,
            "certified": True,
            "message": f"{len(table)} bound rows written to {path}",
            "paths": [path],
            "table": table,
        }
    except (MpgError, ValueError, OSError) as e:
        return _failure("bounds", e)


def initialize_tools(config: ExperimentConfig, progress: bool = True):
    """
    Opens the artifact index for the config's output directory and returns
    a registry of verb functions.
    """
    store = ArtifactStore(config.resolved_output_dir())

    tool_registry = {
        "run": lambda: run_experiment_verb(config=config, store=store, progress=progress),
        "sweep": lambda: sweep_verb(config=config, store=store, progress=progress),
        "certify": lambda: certify_verb(config=config, progress=progress),
        "bounds": lambda: bounds_verb(config=config, progress=progress),
    }
    return tool_registry, store
