"""
Independent policy mirror descent.

Every player updates simultaneously from the same exact evaluation of the
current joint policy: projected averaged-Q ascent for the Euclidean mirror
map, multiplicative weights for the negative-entropy (KL) mirror map.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import logsumexp
from tqdm import tqdm

from src.mpgpmd.core.evaluation import EvalBundle, evaluate
from src.mpgpmd.errors import (
    ConfigError,
    DegenerateGameError,
    MissingPotentialError,
    NotAPotentialGameError,
)
from src.mpgpmd.games.model import JointPolicy, MarkovGame, PotentialSpec
from src.mpgpmd.games.verification import VERIFY_TOLERANCE, verify_mpg

logger = logging.getLogger(__name__)

THEOREM = "theorem"
INITIAL_POLICIES = ("uniform", "biased", "random")


class Regularizer(str, Enum):
    EUCLIDEAN = "euclidean"
    KL = "kl"


@dataclass(frozen=True, eq=False)
class PmdConfig:
    """
    ``step_size`` is a positive float or ``"theorem"``. For KL it is read in
    the scale of the chosen form: the exponent coefficient is ``step_size``
    in Q-form and ``step_size / (1 - gamma)`` in advantage form.
    """

    regularizer: Regularizer
    step_size: object = THEOREM
    num_iterations: int = 1
    advantage_form: bool = True
    initial_policy: object = "uniform"
    bias: float = 0.1
    bias_action: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "regularizer", Regularizer(self.regularizer))
        except ValueError:
            raise ConfigError(f"Unknown regularizer '{self.regularizer}'")
        if self.step_size != THEOREM:
            if isinstance(self.step_size, str) or not float(self.step_size) > 0:
                raise ConfigError(f"step_size must be positive or '{THEOREM}', got {self.step_size}")
            object.__setattr__(self, "step_size", float(self.step_size))
        if int(self.num_iterations) < 1:
            raise ConfigError(f"num_iterations must be at least 1, got {self.num_iterations}")
        if isinstance(self.initial_policy, str) and self.initial_policy not in INITIAL_POLICIES:
            raise ConfigError(f"initial_policy must be one of {INITIAL_POLICIES} or a JointPolicy")
        if (
            isinstance(self.initial_policy, JointPolicy)
            and self.regularizer is Regularizer.KL
            and any(np.any(r <= 0) for r in self.initial_policy.rows)
        ):
            raise ConfigError("KL mirror descent needs an initial policy in the interior of the simplex.")

    def to_dict(self) -> dict:
        initial = self.initial_policy
        if isinstance(initial, JointPolicy):
            initial = initial.to_list()
        return {
            "regularizer": self.regularizer.value,
            "step_size": self.step_size,
            "num_iterations": int(self.num_iterations),
            "advantage_form": self.advantage_form,
            "initial_policy": initial,
            "bias": self.bias,
            "bias_action": self.bias_action,
        }


@dataclass(frozen=True, eq=False)
class IterationRecord:
    """
    One update pi^(t) -> pi^(t+1).

    ``log_z`` is the per-(player, state) log normaliser in the scale that was
    applied; ``log_z_adv`` is the same quantity in the advantage scale. Both
    are None for Euclidean steps.
    """

    iteration: int
    policy: JointPolicy
    step_size: float
    values: np.ndarray
    potential: float
    occupancy: np.ndarray
    avg_q: tuple
    sq_displacement: np.ndarray
    log_z: np.ndarray = None
    log_z_adv: np.ndarray = None
    kl_displacement: np.ndarray = None


@dataclass(frozen=True, eq=False)
class PmdTrace:
    """Policies pi^(1) .. pi^(T+1) and the T records between them."""

    config: PmdConfig
    step_size: float
    policies: list
    records: list
    terminal_potential: float = None
    terminal_occupancy: np.ndarray = None
    verification_residual: float = None

    @property
    def num_iterations(self) -> int:
        return len(self.records)

    def potentials(self) -> np.ndarray:
        """Phi^(t)(rho) for t = 1 .. T+1."""
        if self.terminal_potential is None:
            raise MissingPotentialError("This trace was produced without a potential.")
        return np.array([r.potential for r in self.records] + [self.terminal_potential])

    def occupancy_after(self, t: int) -> np.ndarray:
        """d_rho^(t+1) for the record with 1-based index t."""
        if t < self.num_iterations:
            return self.records[t].occupancy
        return self.terminal_occupancy


def theorem_step_size(regularizer, game: MarkovGame, potential: PotentialSpec, advantage_form: bool = False) -> float:
    """
    Step sizes that carry the regret guarantees:
    Euclidean (1-gamma) / (4 phi_max sum_i |A_i|), KL (1-gamma) / (2 phi_max sqrt(N)).
    In advantage form the KL value is multiplied by (1-gamma).
    """
    if potential is None:
        raise MissingPotentialError("Theorem step sizes need the potential's phi_max.")
    if potential.phi_max == 0:
        raise DegenerateGameError("phi_max is 0, so the theorem step size is undefined.")
    gamma = game.discount
    regularizer = Regularizer(regularizer)
    if regularizer is Regularizer.EUCLIDEAN:
        return (1.0 - gamma) / (4.0 * potential.phi_max * game.total_actions)
    eta = (1.0 - gamma) / (2.0 * potential.phi_max * np.sqrt(game.num_players))
    if advantage_form:
        eta *= 1.0 - gamma
    return float(eta)


def resolve_step_size(config: PmdConfig, game: MarkovGame, potential: PotentialSpec) -> float:
    if config.step_size == THEOREM:
        return theorem_step_size(config.regularizer, game, potential, config.advantage_form)
    return config.step_size


def kl_exponent(config: PmdConfig, game: MarkovGame, eta: float) -> float:
    """Coefficient in front of the score inside the exponential."""
    if config.advantage_form:
        return eta / (1.0 - game.discount)
    return eta


def project_simplex_rows(matrix) -> np.ndarray:
    """Row-wise Euclidean projection onto the probability simplex (sort and threshold)."""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-d array, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("cannot project rows with NaN or infinite entries")
    n = matrix.shape[1]
    ordered = -np.sort(-matrix, axis=1)
    cumulative = np.cumsum(ordered, axis=1) - 1.0
    ranks = np.arange(1, n + 1)
    support = ordered - cumulative / ranks > 0
    # support is a prefix of the sorted row, so its size is the count of True.
    size = support.sum(axis=1)
    threshold = cumulative[np.arange(len(matrix)), size - 1] / size
    return np.maximum(matrix - threshold[:, None], 0.0)


def project_simplex(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ValueError(f"expected a vector, got shape {v.shape}")
    return project_simplex_rows(v[None, :])[0]


def _euclidean_row_update(table, avg_q, eta):
    if table.shape[1] == 1:
        return table.copy()
    return project_simplex_rows(table + eta * avg_q)


def _kl_row_update(table, score, adv, kappa):
    """Returns (new rows, log Z applied, log Z advantage scale, KL displacement)."""
    num_states = table.shape[0]
    if table.shape[1] == 1:
        zeros = np.zeros(num_states)
        return table.copy(), kappa * score[:, 0], zeros, zeros
    positive = table > 0
    with np.errstate(divide="ignore"):
        log_table = np.where(positive, np.log(table), -np.inf)
    logits = log_table + kappa * np.where(positive, score, 0.0)
    log_z = logsumexp(logits, axis=1)
    log_z_adv = logsumexp(log_table + kappa * np.where(positive, adv, 0.0), axis=1)

    new = np.where(positive, np.exp(logits - log_z[:, None]), 0.0)
    new = new / new.sum(axis=1, keepdims=True)
    kl = np.where(new > 0, new * (kappa * score - log_z[:, None]), 0.0).sum(axis=1)
    return new, log_z, log_z_adv, np.maximum(kl, 0.0)


def pmd_step(game: MarkovGame, potential: PotentialSpec, policy: JointPolicy, bundle: EvalBundle, config: PmdConfig, iteration: int = 1) -> tuple:
    """
    One simultaneous update of every player from ``bundle``, the exact
    evaluation of ``policy``. Returns (next policy, IterationRecord).
    """
    if bundle.policy is not policy:
        policy.check_against(bundle.game)
    eta = resolve_step_size(config, game, potential)
    num_players, num_states = game.num_players, game.num_states

    new_rows = []
    log_z = log_z_adv = kl_disp = None
    if config.regularizer is Regularizer.EUCLIDEAN:
        for i in range(num_players):
            new_rows.append(_euclidean_row_update(policy.player(i), bundle.avg_q[i], eta))
    else:
        kappa = kl_exponent(config, game, eta)
        log_z = np.empty((num_players, num_states))
        log_z_adv = np.empty((num_players, num_states))
        kl_disp = np.empty((num_players, num_states))
        for i in range(num_players):
            score = bundle.avg_adv[i] if config.advantage_form else bundle.avg_q[i]
            new, log_z[i], log_z_adv[i], kl_disp[i] = _kl_row_update(
                policy.player(i), score, bundle.avg_adv[i], kappa
            )
            new_rows.append(new)

    sq_disp = np.stack(
        [((new_rows[i] - policy.player(i)) ** 2).sum(axis=1) for i in range(num_players)]
    )
    record = IterationRecord(
        iteration=iteration,
        policy=policy,
        step_size=eta,
        values=bundle.values(),
        potential=None if bundle.potential_v is None else bundle.total_potential(),
        occupancy=bundle.occupancy,
        avg_q=bundle.avg_q,
        sq_displacement=sq_disp,
        log_z=log_z,
        log_z_adv=log_z_adv,
        kl_displacement=kl_disp,
    )
    return JointPolicy(tuple(new_rows)), record


def initial_policy(game: MarkovGame, config: PmdConfig, seed: int = 0) -> JointPolicy:
    start = config.initial_policy
    if isinstance(start, JointPolicy):
        start.check_against(game)
        return start
    if start == "biased":
        return JointPolicy.biased(game, action=config.bias_action, bias=config.bias)
    if start == "random":
        return JointPolicy.random_interior(game, np.random.default_rng(seed))
    return JointPolicy.uniform(game)


def run_pmd(
    game: MarkovGame,
    potential: PotentialSpec,
    config: PmdConfig,
    seed: int = 0,
    trust_mpg: bool = False,
    cap: int = None,
    progress: bool = False,
    verified_residual: float = None,
) -> PmdTrace:
    """
    Applies ``config.num_iterations`` PMD updates from the initial policy.

    Unless ``trust_mpg`` is set the potential identity is certified first by
    enumeration and a failing game is refused. ``verified_residual`` passes
    in the residual of an earlier verify_mpg on the same game.
    """
    residual = None
    if not trust_mpg:
        if potential is None:
            raise MissingPotentialError("Verifying the game needs a potential; pass trust_mpg to skip.")
        if verified_residual is None:
            residual = verify_mpg(game, potential, cap=cap)
        else:
            residual = float(verified_residual)
        if residual >= VERIFY_TOLERANCE:
            raise NotAPotentialGameError(
                f"Game '{game.name}' violates the potential identity (residual {residual:.3e})."
            )

    eta = resolve_step_size(config, game, potential)
    policy = initial_policy(game, config, seed)
    logger.info(
        f"Running {config.regularizer.value} PMD on '{game.name}' for {config.num_iterations} "
        f"iterations with step size {eta:.6g}"
    )

    policies, records = [policy], []
    steps = tqdm(
        range(1, int(config.num_iterations) + 1),
        desc=f"{config.regularizer.value} PMD",
        disable=not progress,
        leave=False,
    )
    for t in steps:
        bundle = evaluate(game, policy, potential)
        policy, record = pmd_step(game, potential, policy, bundle, config, iteration=t)
        policies.append(policy)
        records.append(record)

    terminal = evaluate(game, policy, potential)
    terminal_potential = None if potential is None else terminal.total_potential()
    logger.info(f"Finished PMD on '{game.name}'; final potential {terminal_potential}")
    return PmdTrace(
        config=config,
        step_size=eta,
        policies=policies,
        records=records,
        terminal_potential=terminal_potential,
        terminal_occupancy=terminal.occupancy,
        verification_residual=residual,
    )


def _improvement_terms(game, potential, trace, t, mu):
    """(Phi^(t+1) - Phi^(t), d_mu^(t+1)) for the 1-based record index t."""
    if mu is None:
        phis = trace.potentials()
        return phis[t] - phis[t - 1], trace.occupancy_after(t)
    before = evaluate(game, trace.policies[t - 1], potential)
    after = evaluate(game, trace.policies[t], potential)
    return after.total_potential(mu) - before.total_potential(mu), after.occupancy_for(mu)


def euclidean_improvement_slack(game: MarkovGame, potential: PotentialSpec, trace: PmdTrace, t: int, mu=None, variant: str = "tight") -> float:
    """
    Phi^(t+1)(mu) - Phi^(t)(mu) minus the Euclidean lower bound
    (1/(2 eta (1-gamma)) - C) sum_s d_mu^(t+1)(s) sum_i ||pi_i,s^(t+1) - pi_i,s^(t)||^2,
    with C = phi_max sum|A_i| / (1-gamma)^2, or 2 phi_max sum|A_i| / (1-gamma)^3
    for ``variant="loose"``.
    """
    gamma, eta = game.discount, trace.step_size
    if variant == "tight":
        penalty = potential.phi_max * game.total_actions / (1.0 - gamma) ** 2
    elif variant == "loose":
        penalty = 2.0 * potential.phi_max * game.total_actions / (1.0 - gamma) ** 3
    else:
        raise ValueError(f"Unknown variant '{variant}'")
    gain, d_next = _improvement_terms(game, potential, trace, t, mu)
    coefficient = 1.0 / (2.0 * eta * (1.0 - gamma)) - penalty
    moved = float(d_next @ trace.records[t - 1].sq_displacement.sum(axis=0))
    return float(gain - coefficient * moved)


def kl_improvement_slack(game: MarkovGame, potential: PotentialSpec, trace: PmdTrace, t: int, mu=None, full: bool = False) -> float:
    """
    Phi^(t+1)(mu) - Phi^(t)(mu) minus (1/eta) sum_s d_mu^(t+1)(s) sum_i log Z_t^{i,s},
    with eta and log Z in the advantage scale. ``full=True`` adds the KL
    displacement term (1/eta - phi_max sqrt(N)/(1-gamma)^2) sum_s d KL(pi_s^(t+1) || pi_s^(t)),
    which holds for every step size.
    """
    record = trace.records[t - 1]
    if record.log_z_adv is None:
        raise ValueError("kl_improvement_slack needs a KL trace.")
    gamma = game.discount
    eta_adv = (1.0 - gamma) * kl_exponent(trace.config, game, trace.step_size)
    gain, d_next = _improvement_terms(game, potential, trace, t, mu)
    bound = float(d_next @ record.log_z_adv.sum(axis=0)) / eta_adv
    if full:
        coefficient = 1.0 / eta_adv - potential.phi_max * np.sqrt(game.num_players) / (1.0 - gamma) ** 2
        bound += coefficient * float(d_next @ record.kl_displacement.sum(axis=0))
    return float(gain - bound)
