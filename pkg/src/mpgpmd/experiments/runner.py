"""
Experiment orchestration: expands a config into (game, algorithm, seed)
cells, runs and certifies each cell, and aggregates artifacts into scaling
and bound tables.
"""

import datetime
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.mpgpmd.core.evaluation import (
    evaluate,
    perf_diff_check,
    policy_gradient,
    policy_gradient_entry,
    policy_increment_residual,
)
from src.mpgpmd.core.metrics import (
    MismatchReport,
    RegretTrace,
    best_response,
    build_regret_trace,
    iteration_bound,
    bound_kappa,
    mismatch_coefficients,
    theorem_bound,
)
from src.mpgpmd.core.pmd import (
    THEOREM,
    Regularizer,
    euclidean_improvement_slack,
    kl_exponent,
    kl_improvement_slack,
    project_simplex,
    run_pmd,
)
from src.mpgpmd.errors import EnumerationCapExceeded
from src.mpgpmd.experiments.artifact_store import ArtifactStore
from src.mpgpmd.experiments.config import AlgorithmConfig, ExperimentConfig, GameSource
from src.mpgpmd.games.game_io import load_game
from src.mpgpmd.games.generators import GAME_FAMILIES
from src.mpgpmd.games.model import JointPolicy, MarkovGame, PotentialSpec
from src.mpgpmd.games.verification import VERIFY_TOLERANCE, verify_mpg
from src.mpgpmd.oracles.oracles import (
    OracleReport,
    enumerated_best_value,
    fd_gradient_oracle,
    make_report,
    mc_value_oracle,
    projection_oracle,
    random_deviation_probe,
)

logger = logging.getLogger(__name__)

IMPROVEMENT_TOLERANCE = 1e-9
IDENTITY_TOLERANCE = 1e-10
FD_TOLERANCE = 1e-6
GRADIENT_IDENTITY_TOLERANCE = 1e-8
CALIBRATION_ALGORITHMS = ("euclidean", "kl", "kl_m")


@dataclass(frozen=True)
class Cell:
    num_players: int
    algorithm: AlgorithmConfig
    seed: int

    @property
    def cell_id(self) -> str:
        return f"{self.algorithm.label}_N{self.num_players}_seed{self.seed}"


def expand_cells(config: ExperimentConfig) -> list:
    players = config.sweep.values if config.sweep is not None else [config.game.num_players]
    return [
        Cell(num_players=n, algorithm=algorithm, seed=seed)
        for n in players
        for algorithm in config.algorithms
        for seed in config.seeds
    ]


def build_game(source: GameSource, num_players: int, seed: int) -> tuple:
    """(game, potential or None) for a generator family or a game file."""
    if source.path is not None:
        return load_game(source.path)
    game_seed = source.seed if source.seed is not None else seed
    counts = source.counts() if num_players == source.num_players else [source.num_actions] * num_players
    if source.family == "identical_interest":
        return GAME_FAMILIES["identical_interest"](num_players, source.num_states, counts, source.discount, game_seed)
    if source.family == "weighted_identical_interest":
        return GAME_FAMILIES["weighted_identical_interest"](
            num_players,
            source.num_states,
            counts,
            source.discount,
            game_seed,
            lead_weight=source.lead_weight,
            follower_weight=source.follower_weight,
        )
    if source.family == "dummy_term":
        return GAME_FAMILIES["dummy_term"](
            num_players, source.num_states, counts, source.discount, game_seed, dummy_scale=source.dummy_scale
        )
    if source.family == "congestion":
        return GAME_FAMILIES["congestion"](num_players, source.num_facilities, game_seed)
    return GAME_FAMILIES["coordination"](num_players, source.num_actions, source.discount)


def content_hash(config: ExperimentConfig, cell: Cell, game: MarkovGame) -> str:
    """SHA-256 over every input that determines a cell's files."""
    echo = config.model_dump(exclude={"output_dir", "workers", "seeds", "sweep", "algorithms"})
    document = {
        "config": echo,
        "algorithm": cell.algorithm.model_dump(),
        "num_players": cell.num_players,
        "seed": cell.seed,
        "game": game.digest(),
    }
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class RunArtifact:
    cell_id: str
    content_hash: str
    algorithm: str
    num_players: int
    seed: int
    config_echo: dict
    game: dict
    regret: RegretTrace
    mismatch: MismatchReport
    bounds: dict
    improvement_slack: np.ndarray
    iterations_to_epsilon: dict
    iteration_bounds: dict
    certification: list
    verification_residual: float = None
    wall_clock: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(report.passed for report in self.certification)

    def to_dict(self) -> dict:
        return {
            "cell_id": self.cell_id,
            "content_hash": self.content_hash,
            "algorithm": self.algorithm,
            "num_players": self.num_players,
            "seed": self.seed,
            "config_echo": self.config_echo,
            "game": self.game,
            "regret": self.regret.to_dict(),
            "mismatch": self.mismatch.to_dict(),
            "bounds": {nu: values.tolist() for nu, values in self.bounds.items()},
            "improvement_slack": self.improvement_slack.tolist(),
            "iterations_to_epsilon": self.iterations_to_epsilon,
            "iteration_bounds": self.iteration_bounds,
            "certification": [r.to_dict() for r in self.certification],
            "verification_residual": self.verification_residual,
            "wall_clock": self.wall_clock,
        }

    @classmethod
    def from_dict(cls, document: dict) -> "RunArtifact":
        return cls(
            cell_id=document["cell_id"],
            content_hash=document["content_hash"],
            algorithm=document["algorithm"],
            num_players=int(document["num_players"]),
            seed=int(document["seed"]),
            config_echo=document["config_echo"],
            game=document["game"],
            regret=RegretTrace.from_dict(document["regret"]),
            mismatch=MismatchReport.from_dict(document["mismatch"]),
            bounds={nu: np.asarray(v, dtype=float) for nu, v in document["bounds"].items()},
            improvement_slack=np.asarray(document["improvement_slack"], dtype=float),
            iterations_to_epsilon=document["iterations_to_epsilon"],
            iteration_bounds=document["iteration_bounds"],
            certification=[OracleReport(**r) for r in document["certification"]],
            verification_residual=document["verification_residual"],
            wall_clock=document["wall_clock"],
        )


def _improvement_slacks(game, potential, trace) -> np.ndarray:
    """Per-step slack of the potential-improvement inequality that applies to the run."""
    slacks = np.empty(trace.num_iterations)
    if trace.config.regularizer is Regularizer.EUCLIDEAN:
        for t in range(1, trace.num_iterations + 1):
            slacks[t - 1] = euclidean_improvement_slack(game, potential, trace, t)
        return slacks
    eta_adv = (1.0 - game.discount) * kl_exponent(trace.config, game, trace.step_size)
    conditional = eta_adv <= (1.0 - game.discount) ** 2 / (potential.phi_max * np.sqrt(game.num_players))
    for t in range(1, trace.num_iterations + 1):
        slacks[t - 1] = kl_improvement_slack(game, potential, trace, t, full=not conditional)
    return slacks


def _bound_series(game, potential, mismatch, regret, regularizer, nu_list) -> dict:
    """theorem_bound at every t = 1 .. T for each reference distribution."""
    T = regret.num_iterations
    bounds = {}
    for nu in nu_list:
        if potential is None:
            bounds[nu] = np.full(T, np.nan)
            continue
        bounds[nu] = np.array(
            [
                theorem_bound(regularizer, game, potential, mismatch, t, c=regret.c, nu=nu)
                for t in range(1, T + 1)
            ]
        )
    return bounds


def run_cell(config: ExperimentConfig, cell: Cell, verified_residual: float = None) -> RunArtifact:
    """
    Builds the cell's game, runs PMD and computes every reported quantity.
    ``verified_residual`` skips re-verifying a game already certified for
    another algorithm.
    """
    started_at = datetime.datetime.now().isoformat(timespec="seconds")
    clock = time.perf_counter()

    game, potential = build_game(config.game, cell.num_players, cell.seed)
    pmd_config = cell.algorithm.to_pmd_config(config.num_iterations)
    trace = run_pmd(
        game,
        potential,
        pmd_config,
        seed=cell.seed,
        trust_mpg=config.trust_mpg,
        cap=config.enumeration_cap,
        verified_residual=verified_residual,
    )
    regret = build_regret_trace(game, trace)
    mismatch = mismatch_coefficients(game, cap=config.enumeration_cap)
    regularizer = pmd_config.regularizer
    bounds = _bound_series(game, potential, mismatch, regret, regularizer, config.bound_nu)

    certification = []
    if trace.verification_residual is not None:
        certification.append(
            make_report("mpg_identity", game.name, trace.verification_residual, 0.0, VERIFY_TOLERANCE)
        )
    consistency = float(np.max(np.abs(regret.running_regret - np.cumsum(regret.worst_gaps) / np.arange(1, regret.num_iterations + 1))))
    certification.append(make_report("running_regret_prefix_average", cell.cell_id, consistency, 0.0, 1e-12))

    improvement = np.full(regret.num_iterations, np.nan)
    if potential is not None:
        improvement = _improvement_slacks(game, potential, trace)
        worst_slack = float(np.min(improvement))
        # One-sided check: only a negative slack counts as an error.
        certification.append(
            make_report("potential_improvement", cell.cell_id, min(worst_slack, 0.0), 0.0, IMPROVEMENT_TOLERANCE)
        )
        if cell.algorithm.step_size == THEOREM:
            drop = float(np.min(np.diff(trace.potentials())))
            certification.append(make_report("potential_monotone", cell.cell_id, min(drop, 0.0), 0.0, 1e-12))
            for nu, series in bounds.items():
                excess = float(np.max(regret.running_regret - series))
                certification.append(
                    make_report(f"regret_below_bound_{nu}", cell.cell_id, max(excess, 0.0), 0.0, 0.0)
                )

    iterations = {}
    iteration_bounds = {}
    for epsilon in config.epsilons:
        key = repr(float(epsilon))
        iterations[key] = regret.iterations_to(epsilon)
        if potential is None:
            continue
        iteration_bounds[key] = {
            nu: iteration_bound(
                regularizer,
                potential.phi_max,
                bound_kappa(mismatch, nu),
                game.total_actions,
                game.num_players,
                game.discount,
                epsilon,
                c=regret.c,
            )
            for nu in config.bound_nu
        }

    artifact = RunArtifact(
        cell_id=cell.cell_id,
        content_hash=content_hash(config, cell, game),
        algorithm=cell.algorithm.label,
        num_players=cell.num_players,
        seed=cell.seed,
        config_echo={
            "name": config.name,
            "game": config.game.model_dump(),
            "algorithm": cell.algorithm.model_dump(),
            "num_iterations": config.num_iterations,
            "epsilons": list(config.epsilons),
        },
        game={
            "name": game.name,
            "num_states": game.num_states,
            "total_actions": game.total_actions,
            "discount": game.discount,
            "phi_max": None if potential is None else potential.phi_max,
        },
        regret=regret,
        mismatch=mismatch,
        bounds=bounds,
        improvement_slack=improvement,
        iterations_to_epsilon=iterations,
        iteration_bounds=iteration_bounds,
        certification=certification,
        verification_residual=trace.verification_residual,
        wall_clock={"started_at": started_at, "seconds": time.perf_counter() - clock},
    )
    logger.info(
        f"Cell {cell.cell_id}: Nash-regret(T)={regret.regret:.6g}, c={regret.c:.4g}, "
        f"certified={artifact.passed}"
    )
    return artifact


def run_experiment(config: ExperimentConfig, store: ArtifactStore = None, writer=None, progress: bool = True) -> list:
    """
    Runs every cell of ``config``; cells found in ``store`` with the same
    content hash are loaded instead of recomputed. ``writer(artifact)`` is
    called in the parent process for each fresh artifact and returns its
    directory.
    """
    from src.mpgpmd.experiments.outputs import load_artifact

    cells = expand_cells(config)
    games = {}

    def game_for(cell):
        key = (cell.num_players, cell.seed)
        if key not in games:
            games[key] = build_game(config.game, cell.num_players, cell.seed)
        return games[key]

    artifacts, pending = {}, []
    for cell in cells:
        if store is not None:
            game, _ = game_for(cell)
            directory = store.lookup(content_hash(config, cell, game))
            if directory is not None:
                logger.info(f"Reusing cached cell {cell.cell_id} from {directory}")
                artifacts[cell.cell_id] = load_artifact(directory)
                continue
        pending.append(cell)

    # One verification per game, shared by every algorithm run on it.
    residuals = {}
    if not config.trust_mpg:
        for cell in pending:
            key = (cell.num_players, cell.seed)
            game, potential = game_for(cell)
            if key not in residuals and potential is not None:
                residuals[key] = verify_mpg(game, potential, cap=config.enumeration_cap)
    games.clear()

    def finish(artifact):
        artifacts[artifact.cell_id] = artifact
        if writer is not None:
            directory = writer(artifact)
            if store is not None:
                store.record(
                    artifact.content_hash,
                    artifact.cell_id,
                    artifact.algorithm,
                    artifact.num_players,
                    artifact.seed,
                    directory,
                    artifact.wall_clock.get("seconds"),
                )

    bar = tqdm(total=len(pending), desc=config.name, disable=not progress)
    if config.workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [
                pool.submit(run_cell, config, cell, residuals.get((cell.num_players, cell.seed)))
                for cell in pending
            ]
            for future in as_completed(futures):
                finish(future.result())
                bar.update(1)
    else:
        for cell in pending:
            finish(run_cell(config, cell, residuals.get((cell.num_players, cell.seed))))
            bar.update(1)
    bar.close()
    return [artifacts[cell.cell_id] for cell in cells]


def summary_frame(artifacts: list) -> pd.DataFrame:
    """One row per (algorithm, N, seed)."""
    rows = []
    for a in artifacts:
        row = {
            "algorithm": a.algorithm,
            "num_players": a.num_players,
            "seed": a.seed,
            "num_states": a.game["num_states"],
            "total_actions": a.game["total_actions"],
            "discount": a.game["discount"],
            "phi_max": a.game["phi_max"],
            "step_size": a.regret.step_size,
            "num_iterations": a.regret.num_iterations,
            "nash_regret": a.regret.regret,
            "final_worst_gap": float(a.regret.worst_gaps[-1]),
            "constant_c": a.regret.c,
            "kappa_rho": a.mismatch.kappa_rho,
            "kappa_tilde_upper": a.mismatch.kappa_tilde_upper,
            "kappa_uniform": a.mismatch.kappa_uniform,
            "m_coefficient": a.mismatch.m_coefficient,
            "mismatch_method": a.mismatch.method,
        }
        for nu, series in a.bounds.items():
            row[f"thm_bound_{nu}"] = float(series[-1])
        for key, value in a.iterations_to_epsilon.items():
            row[f"iterations_to_eps_{key}"] = value
        row["certified"] = a.passed
        rows.append(row)
    return pd.DataFrame(rows)


def _check_compatible(artifacts: list):
    if not artifacts:
        raise ValueError("scaling_summary needs at least one artifact.")
    reference = artifacts[0].config_echo
    keys = ("family", "path", "num_states", "num_actions", "discount", "num_facilities", "lead_weight", "follower_weight", "seed")
    for a in artifacts[1:]:
        echo = a.config_echo
        if echo["num_iterations"] != reference["num_iterations"]:
            raise ValueError(f"{a.cell_id} ran {echo['num_iterations']} iterations, expected {reference['num_iterations']}")
        for key in keys:
            if echo["game"].get(key) != reference["game"].get(key):
                raise ValueError(f"{a.cell_id} differs from {artifacts[0].cell_id} in game field '{key}'")


def scaling_summary(artifacts: list, epsilon: float) -> pd.DataFrame:
    """
    Iterations to epsilon-Nash regret against the theorem iteration bounds,
    grouped by (N, algorithm). ``normalized_iteration_bound`` sets phi_max,
    kappa and c to 1 so that only the N dependence remains.
    """
    _check_compatible(artifacts)
    rows = []
    groups = {}
    for a in artifacts:
        groups.setdefault((a.num_players, a.algorithm), []).append(a)
    for (num_players, algorithm), members in sorted(groups.items()):
        regularizer = members[0].regret.regularizer
        iterations = [m.regret.iterations_to(epsilon) for m in members]
        bounds = []
        for m in members:
            if m.game["phi_max"] is None:
                continue
            bounds.append(
                iteration_bound(
                    regularizer,
                    m.game["phi_max"],
                    m.mismatch.kappa_tilde_upper,
                    m.game["total_actions"],
                    m.num_players,
                    m.game["discount"],
                    epsilon,
                    c=m.regret.c,
                )
            )
        first = members[0]
        rows.append(
            {
                "num_players": num_players,
                "algorithm": algorithm,
                "epsilon": epsilon,
                "num_seeds": len(members),
                "iterations_to_epsilon": float(np.median(iterations)),
                "theorem_iteration_bound": float(max(bounds)) if bounds else float("nan"),
                "normalized_iteration_bound": iteration_bound(
                    regularizer, 1.0, 1.0, first.game["total_actions"], num_players, first.game["discount"], epsilon, c=1.0
                ),
            }
        )
    return pd.DataFrame(rows)


def bounds_table(config: ExperimentConfig) -> pd.DataFrame:
    """
    Closed-form iteration and regret bounds for every N, epsilon and
    reference distribution, without running PMD. KL rows assume c = 1.
    """
    players = config.sweep.values if config.sweep is not None else [config.game.num_players]
    seed = config.seeds[0]
    rows = []
    for n in players:
        game, potential = build_game(config.game, n, seed)
        if potential is None:
            raise ValueError(f"Game '{game.name}' has no potential; bounds need phi_max.")
        mismatch = mismatch_coefficients(game, cap=config.enumeration_cap)
        for epsilon in config.epsilons:
            for algorithm in CALIBRATION_ALGORITHMS:
                regularizer = "euclidean" if algorithm == "euclidean" else "kl"
                variant = "kl_m" if algorithm == "kl_m" else "theorem"
                for nu in config.bound_nu:
                    if variant == "kl_m" and (nu != "rho" or mismatch.m_coefficient is None):
                        continue
                    kappa = bound_kappa(mismatch, nu, variant)
                    rows.append(
                        {
                            "num_players": n,
                            "total_actions": game.total_actions,
                            "discount": game.discount,
                            "phi_max": potential.phi_max,
                            "epsilon": epsilon,
                            "algorithm": algorithm,
                            "nu": nu if variant != "kl_m" else "M",
                            "kappa": kappa,
                            "c_assumed": None if regularizer == "euclidean" else 1.0,
                            "iteration_bound": iteration_bound(
                                regularizer, potential.phi_max, kappa, game.total_actions, n, game.discount, epsilon, c=1.0, variant=variant
                            ),
                            "regret_bound_at_T": theorem_bound(
                                regularizer, game, potential, mismatch, config.num_iterations, c=1.0, nu=nu, variant=variant
                            ),
                        }
                    )
    return pd.DataFrame(rows)


def tangent_gap(grad_a: np.ndarray, grad_b: np.ndarray) -> float:
    """
    Largest difference of two (S, A_i) policy gradients after removing each
    row's mean, i.e. along directions that stay on the simplex. Averaged
    Q-values of a player and of the potential may differ by a shift that
    does not depend on the player's own action.
    """
    diff = grad_a - grad_b
    return float(np.max(np.abs(diff - diff.mean(axis=1, keepdims=True))))


def run_certification(game: MarkovGame, potential: PotentialSpec, settings, seed: int = 0, cap: int = None) -> list:
    """
    Checks the exact engine against the brute-force oracles on ``game``:
    projections, rollouts, finite differences, best responses and the exact
    identities of policy evaluation.
    """
    rng = np.random.default_rng(seed)
    reports = []

    discrepancy = 0.0
    for _ in range(settings.projection_vectors):
        v = rng.uniform(-3.0, 3.0, size=int(rng.integers(2, settings.projection_max_dim + 1)))
        discrepancy = max(discrepancy, float(np.max(np.abs(project_simplex(v) - projection_oracle(v)))))
    reports.append(
        make_report("projection", f"{settings.projection_vectors} random vectors", discrepancy, 0.0, 1e-9)
    )

    policies = [JointPolicy.uniform(game)] + [
        JointPolicy.random_interior(game, rng) for _ in range(settings.num_policies - 1)
    ]
    if potential is not None:
        reports.append(make_report("mpg_identity", game.name, verify_mpg(game, potential, cap=cap), 0.0, VERIFY_TOLERANCE))

    for k, policy in enumerate(policies):
        bundle = evaluate(game, policy, potential)
        instance = f"{game.name}/policy{k}"
        reports.append(make_report("bellman_residual", instance, bundle.bellman_residual, 0.0, IDENTITY_TOLERANCE))
        zero_mean = max(
            float(np.max(np.abs((policy.player(i) * bundle.avg_adv[i]).sum(axis=1))))
            for i in range(game.num_players)
        )
        reports.append(make_report("advantage_zero_mean", instance, zero_mean, 0.0, IDENTITY_TOLERANCE))
        floor = float(np.min(bundle.occupancy - (1.0 - game.discount) * game.initial_dist))
        reports.append(make_report("occupancy_floor", instance, min(floor, 0.0), 0.0, IDENTITY_TOLERANCE))

        other = policies[(k + 1) % len(policies)]
        reports.append(make_report("perf_diff", instance, perf_diff_check(game, policy, other, game.initial_dist, potential), 0.0, IDENTITY_TOLERANCE))
        reports.append(make_report("policy_increment", instance, policy_increment_residual(policy, other), 0.0, 1e-12))

        for i in range(game.num_players):
            player = f"{instance}/player{i}"
            estimate = mc_value_oracle(
                game,
                policy,
                i,
                settings.mc_trajectories,
                seed=seed + 1000 * k + i,
                truncation_error=settings.truncation_error,
            )
            tolerance = 3.0 * estimate.standard_error + estimate.truncation_error + 1e-12
            reports.append(make_report("mc_value", player, bundle.value(i), estimate.estimate, tolerance))

            _, best = best_response(game, policy, i)
            try:
                reports.append(make_report("best_response_enumeration", player, best, enumerated_best_value(game, policy, i, cap=cap), 1e-9))
            except EnumerationCapExceeded as e:
                logger.warning(f"Skipping enumerated best response for {player}: {e}")
            if settings.deviation_samples:
                probe = random_deviation_probe(game, policy, i, settings.deviation_samples, seed=seed + i)
                # One-sided: random deviations may not beat the best response.
                reports.append(make_report("best_response_deviation", player, best, max(best, probe), 1e-9))

            if potential is not None:
                grad_v = policy_gradient(game, policy, i, bundle=bundle)
                grad_phi = policy_gradient(game, policy, i, bundle=bundle, of_potential=True)
                reports.append(
                    make_report("gradient_equals_potential_gradient", player, tangent_gap(grad_v, grad_phi), 0.0, GRADIENT_IDENTITY_TOLERANCE)
                )

    for e in range(settings.fd_entries):
        k = int(rng.integers(len(policies)))
        i = int(rng.integers(game.num_players))
        s = int(rng.integers(game.num_states))
        a_i = int(rng.integers(game.action_counts[i]))
        policy = policies[k]
        main = policy_gradient_entry(game, policy, i, s, a_i, game.initial_dist)
        oracle = fd_gradient_oracle(game, policy, i, s, a_i, game.initial_dist, h=settings.fd_step)
        reports.append(make_report("fd_gradient", f"{game.name}/policy{k}/({i},{s},{a_i})", main, oracle, FD_TOLERANCE))
        if potential is not None:
            main_phi = float(policy_gradient(game, policy, i, of_potential=True, bundle=evaluate(game, policy, potential))[s, a_i])
            oracle_phi = fd_gradient_oracle(game, policy, i, s, a_i, game.initial_dist, h=settings.fd_step, reward=potential.phi)
            reports.append(make_report("fd_potential_gradient", f"{game.name}/policy{k}/({i},{s},{a_i})", main_phi, oracle_phi, FD_TOLERANCE))

    failed = sum(not r.passed for r in reports)
    logger.info(f"Certification of '{game.name}': {len(reports) - failed}/{len(reports)} checks passed")
    return reports
