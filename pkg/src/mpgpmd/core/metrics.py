"""
Equilibrium metrics: exact best responses, Nash gaps and Nash regret, the
greedy-mass constant c, distribution mismatch coefficients and the
closed-form regret bounds of independent PMD.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve

from src.mpgpmd.core.evaluation import deterministic_occupancies, evaluate, occupancy_measure
from src.mpgpmd.core.pmd import PmdTrace, Regularizer
from src.mpgpmd.errors import EnumerationCapExceeded, SolverError
from src.mpgpmd.games.model import JointPolicy, MarkovGame, PotentialSpec, marginalize_opponents
from src.mpgpmd.oracles.enumeration import joint_action_table, joint_choice_table

logger = logging.getLogger(__name__)

GAP_TOLERANCE = 1e-10
ARGMAX_TOLERANCE = 1e-9
OPTIMALITY_TOLERANCE = 1e-10
MAX_POLICY_ITERATIONS = 10_000


def induced_mdp(game: MarkovGame, policy: JointPolicy, i: int) -> tuple:
    """Player i's single-agent MDP with opponents frozen: (S, A_i) rewards, (S, A_i, S) kernel."""
    if not 0 <= i < game.num_players:
        raise IndexError(f"player index {i} out of range")
    policy.check_against(game)
    rewards = marginalize_opponents(game.rewards[i], policy, i)
    transition = marginalize_opponents(game.transition, policy, i)
    return rewards, transition


def _stateless_best_response(game: MarkovGame, policy: JointPolicy, i: int, mu) -> tuple:
    """One state: the induced MDP is a bandit repeated forever, V = max_a r(a) / (1 - gamma)."""
    if not 0 <= i < game.num_players:
        raise IndexError(f"player index {i} out of range")
    policy.check_against(game)
    rewards = marginalize_opponents(game.rewards[i], policy, i)[0]
    action = int(np.argmax(rewards))
    table = np.zeros((1, game.action_counts[i]))
    table[0, action] = 1.0
    mu = game.initial_dist if mu is None else np.asarray(mu, dtype=float)
    return table, float(mu[0] * rewards[action] / (1.0 - game.discount))


def best_response(game: MarkovGame, policy: JointPolicy, i: int, mu=None) -> tuple:
    """
    Deterministic optimal policy of player i's induced MDP, by policy iteration.

    Returns the (S, A_i) one-hot table and V_i^{pi_i*, pi_-i}(mu), mu
    defaulting to the game's initial distribution. Ties go to the lowest
    action index and an action is only switched on strict improvement.
    """
    if game.num_states == 1:
        return _stateless_best_response(game, policy, i, mu)
    rewards, transition = induced_mdp(game, policy, i)
    gamma = game.discount
    states = np.arange(game.num_states)
    eye = np.eye(game.num_states)

    actions = np.argmax(rewards, axis=1)
    for _ in range(MAX_POLICY_ITERATIONS):
        v = solve(eye - gamma * transition[states, actions], rewards[states, actions])
        q = rewards + gamma * transition @ v
        best = np.argmax(q, axis=1)
        improves = q[states, best] > q[states, actions] + 1e-12 * max(1.0, float(np.max(np.abs(q))))
        if not np.any(improves):
            break
        actions = np.where(improves, best, actions)
    else:
        raise SolverError(f"Policy iteration for player {i} did not terminate.")

    residual = float(np.max(np.abs(q.max(axis=1) - v)))
    if residual > OPTIMALITY_TOLERANCE * max(1.0, float(np.max(np.abs(q)))):
        raise SolverError(f"Best response for player {i} has optimality residual {residual:.3e}")

    table = np.zeros((game.num_states, game.action_counts[i]))
    table[states, actions] = 1.0
    mu = game.initial_dist if mu is None else np.asarray(mu, dtype=float)
    return table, float(mu @ v)


@dataclass(frozen=True, eq=False)
class NashGap:
    gaps: np.ndarray
    best_values: np.ndarray
    values: np.ndarray

    @property
    def worst(self) -> float:
        return float(np.max(self.gaps))


def _clamp_gaps(gaps: np.ndarray) -> np.ndarray:
    worst = float(np.min(gaps))
    if worst < -GAP_TOLERANCE:
        raise SolverError(f"Nash gap {worst:.3e} is below -{GAP_TOLERANCE:.0e}; best response is inconsistent.")
    if worst < 0:
        logger.warning(f"Clamping slightly negative Nash gap {worst:.3e} to 0")
        gaps = np.maximum(gaps, 0.0)
    return gaps


def nash_gap(game: MarkovGame, policy: JointPolicy, values=None) -> NashGap:
    """
    gap_i = max_{pi_i'} V_i^{pi_i', pi_-i}(rho) - V_i^pi(rho). ``values`` may
    pass in V_i^pi(rho) when the caller already has them.
    """
    if values is None:
        values = evaluate(game, policy).values()
    values = np.asarray(values, dtype=float)
    best = np.array([best_response(game, policy, i)[1] for i in range(game.num_players)])
    return NashGap(gaps=_clamp_gaps(best - values), best_values=best, values=values)


def running_nash_regret(worst_gaps) -> np.ndarray:
    """Nash-regret(t) for t = 1 .. T: prefix averages of the worst gaps."""
    worst_gaps = np.asarray(worst_gaps, dtype=float)
    return np.cumsum(worst_gaps) / np.arange(1, len(worst_gaps) + 1)


def nash_regret(policies, game: MarkovGame) -> float:
    policies = list(policies)
    if not policies:
        raise ValueError("Nash regret needs at least one policy.")
    return float(np.mean([nash_gap(game, p).worst for p in policies]))


def greedy_mass(policy: JointPolicy, avg_q) -> float:
    """
    min over players and states of the mass pi_i(.|s) puts on the argmax set
    of avg_q[i][s, .], with ties resolved at ARGMAX_TOLERANCE.
    """
    smallest = 1.0
    for table, q in zip(policy.rows, avg_q):
        greedy = q >= q.max(axis=1, keepdims=True) - ARGMAX_TOLERANCE
        smallest = min(smallest, float(np.min((table * greedy).sum(axis=1))))
    return smallest


def constant_c(trace: PmdTrace) -> float:
    """Empirical c over the observed iterates; an upper bound on the infinite-horizon constant."""
    if not trace.records:
        raise ValueError("constant_c needs at least one iteration.")
    return float(min(greedy_mass(r.policy, r.avg_q) for r in trace.records))


@dataclass(frozen=True, eq=False)
class RegretTrace:
    """
    Per-iteration metrics for t = 1 .. T; row t describes pi^(t).

    ``update_magnitude`` is sum_{i,s} log Z_t^{i,s} (advantage scale) for KL
    and sum_{i,s} ||pi^(t+1) - pi^(t)||^2 for Euclidean.
    """

    regularizer: str
    step_size: float
    gaps: np.ndarray
    worst_gaps: np.ndarray
    running_regret: np.ndarray
    c_contributions: np.ndarray
    potentials: np.ndarray
    update_magnitude: np.ndarray
    config: dict

    @property
    def num_iterations(self) -> int:
        return len(self.worst_gaps)

    @property
    def regret(self) -> float:
        return float(self.running_regret[-1])

    @property
    def c(self) -> float:
        return float(np.min(self.c_contributions))

    def iterations_to(self, epsilon: float) -> float:
        """Smallest T with Nash-regret(T) <= epsilon, or inf."""
        hits = np.nonzero(self.running_regret <= epsilon)[0]
        return float(hits[0] + 1) if len(hits) else float("inf")

    def to_dict(self) -> dict:
        return {
            "regularizer": self.regularizer,
            "step_size": self.step_size,
            "gaps": self.gaps.tolist(),
            "worst_gaps": self.worst_gaps.tolist(),
            "running_regret": self.running_regret.tolist(),
            "c_contributions": self.c_contributions.tolist(),
            "potentials": self.potentials.tolist(),
            "update_magnitude": self.update_magnitude.tolist(),
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, document: dict) -> "RegretTrace":
        arrays = ("gaps", "worst_gaps", "running_regret", "c_contributions", "potentials", "update_magnitude")
        fields = {k: np.asarray(document[k], dtype=float) for k in arrays}
        return cls(
            regularizer=document["regularizer"],
            step_size=float(document["step_size"]),
            config=document["config"],
            **fields,
        )


def build_regret_trace(game: MarkovGame, trace: PmdTrace) -> RegretTrace:
    records = trace.records
    gaps = np.stack([nash_gap(game, r.policy, values=r.values).gaps for r in records])
    worst = gaps.max(axis=1)
    if trace.config.regularizer is Regularizer.KL:
        magnitude = np.array([float(r.log_z_adv.sum()) for r in records])
    else:
        magnitude = np.array([float(r.sq_displacement.sum()) for r in records])
    potentials = np.array(
        [np.nan if r.potential is None else r.potential for r in records]
    )
    return RegretTrace(
        regularizer=trace.config.regularizer.value,
        step_size=trace.step_size,
        gaps=gaps,
        worst_gaps=worst,
        running_regret=running_nash_regret(worst),
        c_contributions=np.array([greedy_mass(r.policy, r.avg_q) for r in records]),
        potentials=potentials,
        update_magnitude=magnitude,
        config=trace.config.to_dict(),
    )


@dataclass(frozen=True, eq=False)
class MismatchReport:
    """
    kappa_rho = sup_pi ||d_rho^pi / rho||_inf; kappa_tilde_upper =
    min(kappa_rho, |S|) and kappa_uniform = sup_pi ||d_rho^pi / u||_inf are
    upper bounds on the minimax coefficient. m_coefficient is
    sup_pi max_s 1 / d_rho^pi(s), None when not enumerated.
    """

    kappa_rho: float
    kappa_tilde_upper: float
    kappa_uniform: float
    m_coefficient: float
    method: str

    def to_dict(self) -> dict:
        return {
            "kappa_rho": self.kappa_rho,
            "kappa_tilde_upper": self.kappa_tilde_upper,
            "kappa_uniform": self.kappa_uniform,
            "m_coefficient": self.m_coefficient,
            "method": self.method,
        }

    @classmethod
    def from_dict(cls, document: dict) -> "MismatchReport":
        return cls(**document)


def _report_from_occupancies(game: MarkovGame, occupancies: np.ndarray, method: str) -> MismatchReport:
    rho = game.initial_dist
    num_states = game.num_states
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(rho > 0, occupancies / rho, np.where(occupancies > 0, np.inf, 0.0))
        inverse = np.where(occupancies > 0, 1.0 / occupancies, np.inf)
    kappa_rho = float(np.max(ratios))
    return MismatchReport(
        kappa_rho=kappa_rho,
        kappa_tilde_upper=min(kappa_rho, float(num_states)),
        kappa_uniform=float(num_states * np.max(occupancies)),
        m_coefficient=float(np.max(inverse)),
        method=method,
    )


def mismatch_coefficients(game: MarkovGame, cap: int = None) -> MismatchReport:
    """
    Occupancy measures of stochastic policies lie in the convex hull of the
    deterministic ones, so every supremum here is attained at a deterministic
    joint policy. Falls back to bounds when enumeration would exceed ``cap``.
    """
    if game.num_states == 1:
        return MismatchReport(1.0, 1.0, 1.0, 1.0, "exact-enumeration")
    if game.has_action_independent_transitions():
        d = occupancy_measure(game, JointPolicy.uniform(game), game.initial_dist)
        return _report_from_occupancies(game, d[None], "exact-enumeration")
    try:
        choices = joint_choice_table(game, cap=cap)
    except EnumerationCapExceeded as e:
        logger.warning(f"Falling back to bound-only mismatch coefficients: {e}")
        rho = game.initial_dist
        kappa_rho = float(np.max(np.where(rho > 0, 1.0 / np.where(rho > 0, rho, 1.0), np.inf)))
        return MismatchReport(
            kappa_rho=kappa_rho,
            kappa_tilde_upper=min(kappa_rho, float(game.num_states)),
            kappa_uniform=float(game.num_states),
            m_coefficient=None,
            method="bound-only",
        )
    occupancies = deterministic_occupancies(game, joint_action_table(game, choices), game.initial_dist)
    return _report_from_occupancies(game, occupancies, "exact-enumeration")


def _check_bound_inputs(regularizer, horizon_or_eps, c, what):
    if regularizer is not Regularizer.EUCLIDEAN and (c is None or c <= 0):
        raise ValueError(f"The KL bound needs a positive constant c, got {c}")
    if what == "T" and horizon_or_eps < 1:
        raise ValueError(f"T must be at least 1, got {horizon_or_eps}")
    if what == "epsilon" and horizon_or_eps <= 0:
        raise ValueError(f"epsilon must be positive, got {horizon_or_eps}")


def regret_bound(regularizer, phi_max: float, kappa: float, total_actions: int, num_players: int, discount: float, T: int, c: float = None, variant: str = "theorem") -> float:
    """
    Closed-form Nash-regret bounds.

    euclidean: 12 sqrt(2 phi^2 kappa sum|A_i| / ((1-gamma)^4 T))
    kl:        sqrt(12 phi^2 kappa sqrt(N) / ((1-gamma)^4 c T))
    kl with ``variant="kl_m"``: sqrt(12 phi^2 M sqrt(N) / ((1-gamma)^3 c T)), ``kappa`` holding M.
    """
    regularizer = Regularizer(regularizer)
    _check_bound_inputs(regularizer, T, c, "T")
    one_minus = 1.0 - discount
    if regularizer is Regularizer.EUCLIDEAN:
        return float(12.0 * np.sqrt(2.0 * phi_max**2 * kappa * total_actions / (one_minus**4 * T)))
    power = 3 if variant == "kl_m" else 4
    return float(np.sqrt(12.0 * phi_max**2 * kappa * np.sqrt(num_players) / (one_minus**power * c * T)))


def iteration_bound(regularizer, phi_max: float, kappa: float, total_actions: int, num_players: int, discount: float, epsilon: float, c: float = None, variant: str = "theorem") -> float:
    """Smallest T the regret bound certifies for epsilon-Nash regret."""
    regularizer = Regularizer(regularizer)
    _check_bound_inputs(regularizer, epsilon, c, "epsilon")
    one_minus = 1.0 - discount
    if regularizer is Regularizer.EUCLIDEAN:
        return float(288.0 * phi_max**2 * kappa * total_actions / (one_minus**4 * epsilon**2))
    power = 3 if variant == "kl_m" else 4
    return float(12.0 * phi_max**2 * kappa * np.sqrt(num_players) / (one_minus**power * c * epsilon**2))


def bound_kappa(mismatch: MismatchReport, nu: str = "rho", variant: str = "theorem") -> float:
    if variant == "kl_m":
        if mismatch.m_coefficient is None:
            raise ValueError("The M-variant bound needs an enumerated mismatch report.")
        return mismatch.m_coefficient
    if nu == "rho":
        return mismatch.kappa_tilde_upper
    if nu == "uniform":
        return mismatch.kappa_uniform
    raise ValueError(f"Unknown reference distribution '{nu}'")


def theorem_bound(regularizer, game: MarkovGame, potential: PotentialSpec, mismatch: MismatchReport, T: int, c: float = None, nu: str = "rho", variant: str = "theorem") -> float:
    """Regret bound at T using the chosen upper bound on the minimax mismatch coefficient."""
    return regret_bound(
        regularizer,
        potential.phi_max,
        bound_kappa(mismatch, nu, variant),
        game.total_actions,
        game.num_players,
        game.discount,
        T,
        c=c,
        variant=variant,
    )
