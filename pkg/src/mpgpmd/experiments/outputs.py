"""
Writing experiment artifacts.

Per cell, ``<out>/<experiment>/<cell_id>/`` holds:

- ``trace.csv``: t, worst_gap, gap_player_0 .. gap_player_{N-1}, potential,
  running_nash_regret, thm_bound_<nu> for each reference distribution,
  then log_sum_logZ (KL) or sq_displacement (Euclidean), then
  improvement_slack;
- ``certification.csv``: one row per OracleReport;
- ``metadata.json``: the full artifact including wall-clock data.

Per experiment, ``summary.csv`` (one row per algorithm, N and seed),
``certification.csv`` and, for sweeps, ``scaling.csv``. With format json
the tables are written as records-oriented ``.json`` files instead. CSV
numbers are written with 17 significant digits and JSON numbers as the
shortest repr that reads back to the same double; wall-clock values only
appear in metadata.json and the sqlite index.
"""

import json
import logging
import os

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
TRACE_FILE = "trace"
SUMMARY_FILE = "summary"
CERTIFICATION_FILE = "certification"
SCALING_FILE = "scaling"
METADATA_FILE = "metadata.json"


def trace_frame(artifact) -> pd.DataFrame:
    regret = artifact.regret
    T = regret.num_iterations
    columns = {"t": np.arange(1, T + 1), "worst_gap": regret.worst_gaps}
    for i in range(regret.gaps.shape[1]):
        columns[f"gap_player_{i}"] = regret.gaps[:, i]
    columns["potential"] = regret.potentials
    columns["running_nash_regret"] = regret.running_regret
    for nu, series in artifact.bounds.items():
        columns[f"thm_bound_{nu}"] = series
    magnitude = "log_sum_logZ" if regret.regularizer == "kl" else "sq_displacement"
    columns[magnitude] = regret.update_magnitude
    columns["improvement_slack"] = artifact.improvement_slack
    return pd.DataFrame(columns)


def check_prefix_average(frame: pd.DataFrame, tolerance: float = 1e-12) -> float:
    """Running Nash regret must be the prefix average of the worst-gap column."""
    expected = frame["worst_gap"].cumsum().to_numpy() / frame["t"].to_numpy()
    error = float(np.max(np.abs(frame["running_nash_regret"].to_numpy() - expected)))
    if error > tolerance:
        raise ValueError(f"running_nash_regret is not the prefix average of worst_gap (error {error:.3e})")
    return error


def certification_frame(reports) -> pd.DataFrame:
    columns = ["oracle", "instance", "main_value", "oracle_value", "abs_error", "rel_error", "tolerance", "passed"]
    return pd.DataFrame([r.to_dict() for r in reports], columns=columns)


def _write_table(frame: pd.DataFrame, directory: str, stem: str, output_format: str) -> str:
    os.makedirs(directory, exist_ok=True)
    if output_format == "json":
        path = os.path.join(directory, f"{stem}.json")
        records = frame.astype(object).where(frame.notna(), None).to_dict(orient="records")
        with open(path, "w") as f:
            json.dump(records, f, indent=2)
    else:
        path = os.path.join(directory, f"{stem}.csv")
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def emit_csv(artifact, directory: str) -> list:
    return emit_cell(artifact, directory, "csv")


def emit_json(artifact, directory: str) -> list:
    return emit_cell(artifact, directory, "json")


def emit_cell(artifact, directory: str, output_format: str = "csv") -> list:
    """Writes one cell's trace, certification and metadata; returns the paths."""
    frame = trace_frame(artifact)
    check_prefix_average(frame)
    paths = [
        _write_table(frame, directory, TRACE_FILE, output_format),
        _write_table(certification_frame(artifact.certification), directory, CERTIFICATION_FILE, output_format),
    ]
    metadata_path = os.path.join(directory, METADATA_FILE)
    with open(metadata_path, "w") as f:
        json.dump(artifact.to_dict(), f, indent=2)
    paths.append(metadata_path)
    logger.info(f"Wrote cell {artifact.cell_id} to {directory}")
    return paths


EMITTERS = {"csv": emit_csv, "json": emit_json}


def cell_writer(experiment_dir: str, output_format: str):
    """Callback for run_experiment: writes a cell and returns its directory."""

    def write(artifact) -> str:
        directory = os.path.join(experiment_dir, artifact.cell_id)
        EMITTERS[output_format](artifact, directory)
        return directory

    return write


def load_artifact(directory: str):
    from src.mpgpmd.experiments.runner import RunArtifact

    with open(os.path.join(directory, METADATA_FILE)) as f:
        return RunArtifact.from_dict(json.load(f))


def emit_experiment(artifacts, summary: pd.DataFrame, experiment_dir: str, output_format: str = "csv", scaling: pd.DataFrame = None) -> list:
    reports = []
    for artifact in artifacts:
        for report in artifact.certification:
            reports.append(report)
    paths = [
        _write_table(summary, experiment_dir, SUMMARY_FILE, output_format),
        _write_table(certification_frame(reports), experiment_dir, CERTIFICATION_FILE, output_format),
    ]
    if scaling is not None:
        paths.append(_write_table(scaling, experiment_dir, SCALING_FILE, output_format))
    logger.info(f"Wrote experiment tables to {experiment_dir}")
    return paths


def emit_table(frame: pd.DataFrame, directory: str, stem: str, output_format: str = "csv") -> str:
    return _write_table(frame, directory, stem, output_format)
