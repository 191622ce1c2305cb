"""Exact tabular machinery: evaluation, visitation, representation-conditioned values.

Visitation is episodic: ``d(s)`` is the expected number of visits to ``s`` per
episode (truncated at the horizon), normalised over non-terminal states.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .fmdp import FactoredState, PolicyTable, StateRepresentation, TabularFMDP, project
from .kernels import TabularSim


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class UnvisitedClassError(ValueError):
    """Raised when conditioning on an abstraction class with zero visitation mass."""


class DegenerateClassError(ValueError):
    """Raised when the decomposed pair carries all of its class's probability mass."""


class NotMarkovError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ValueTables:
    q: np.ndarray  # (S, A)
    v: np.ndarray  # (S,)
    gamma: float
    mdp: TabularFMDP
    policy: PolicyTable | None = None
    residual: float = 0.0
    iterations: int = 0


@dataclass(frozen=True, eq=False)
class VisitationDist:
    d: np.ndarray
    mode: str
    mdp: TabularFMDP

    def __getitem__(self, s):
        return self.d[s]


@dataclass(frozen=True)
class AdvantageDecomposition:
    a_phi: float
    p_sa_given_phi: float
    q_sa: float
    q_tilde: float
    v_phi: float
    state: int = -1
    action: int = -1
    degenerate: bool = False


def _state_idx(mdp: TabularFMDP, s) -> int:
    if isinstance(s, FactoredState):
        return mdp.index(s)
    if isinstance(s, tuple):
        return mdp.index(s)
    s = int(s)
    if not 0 <= s < mdp.sink:
        raise IndexError(f"state index {s} is not a factored state of {mdp.name}")
    return s


def _policy_matrix(mdp: TabularFMDP, policy: PolicyTable) -> np.ndarray:
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {policy.probs.shape} does not match {mdp.name}")
    return np.einsum("sa,sat->st", policy.probs, mdp.transition)


def _check_absorbing(mdp: TabularFMDP, policy: PolicyTable):
    P = _policy_matrix(mdp, policy)
    live = ~mdp.terminal
    sub = P[np.ix_(live, live)]
    radius = max(abs(np.linalg.eigvals(sub))) if sub.size else 0.0
    if radius >= 1.0 - 1e-12:
        raise ValueError("gamma = 1 requires the policy to reach a terminal state with probability 1")


def policy_evaluation(mdp: TabularFMDP, policy: PolicyTable, gamma: float = 0.99,
                      tol: float = 1e-12, max_iter: int = 200_000) -> ValueTables:
    """Iterate the Bellman expectation operator to sup-norm ``tol``."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if gamma == 1.0:
        _check_absorbing(mdp, policy)
    pi = policy.probs
    T, R = mdp.transition, mdp.reward
    v = np.zeros(mdp.n_states)
    residual = np.inf
    for it in range(1, max_iter + 1):
        q = R + gamma * (T @ v)
        v_new = (pi * q).sum(axis=1)
        residual = float(np.abs(v_new - v).max())
        v = v_new
        if residual < tol:
            break
    else:
        raise ConvergenceError("policy evaluation did not converge", residual)
    q = R + gamma * (T @ v)
    v = (pi * q).sum(axis=1)
    return ValueTables(q=q, v=v, gamma=gamma, mdp=mdp, policy=policy, residual=residual, iterations=it)


def greedy_policy(q: np.ndarray, tie_tol: float = 1e-12) -> PolicyTable:
    """Deterministic argmax policy, ties broken toward the lowest action index."""
    best = q.max(axis=1, keepdims=True)
    actions = np.argmax(q >= best - tie_tol, axis=1)
    return PolicyTable.deterministic(actions, q.shape[1])


def optimal_values(mdp: TabularFMDP, gamma: float = 0.99, tol: float = 1e-12,
                   max_iter: int = 200_000) -> tuple[ValueTables, PolicyTable]:
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    T, R = mdp.transition, mdp.reward
    v = np.zeros(mdp.n_states)
    residual = np.inf
    for it in range(1, max_iter + 1):
        v_new = (R + gamma * (T @ v)).max(axis=1)
        residual = float(np.abs(v_new - v).max())
        v = v_new
        if residual < tol:
            break
    else:
        raise ConvergenceError("value iteration did not converge", residual)
    q = R + gamma * (T @ v)
    greedy = greedy_policy(q)
    tables = ValueTables(q=q, v=q.max(axis=1), gamma=gamma, mdp=mdp, policy=greedy,
                         residual=residual, iterations=it)
    return tables, greedy


def epsilon_optimal_policy(greedy: PolicyTable, p_star: float) -> PolicyTable:
    """Put ``p_star`` on each row's greedy action and spread the rest uniformly."""
    n_actions = greedy.n_actions
    if not 1.0 / n_actions - 1e-12 <= p_star <= 1.0:
        raise ValueError(f"p_star must lie in [1/{n_actions}, 1], got {p_star}")
    best = np.argmax(greedy.probs, axis=1)
    probs = np.full(greedy.probs.shape, (1.0 - p_star) / (n_actions - 1) if n_actions > 1 else 0.0)
    probs[np.arange(len(best)), best] = p_star
    return PolicyTable(probs)


def visitation_exact(mdp: TabularFMDP, policy: PolicyTable, horizon: int | None = None) -> VisitationDist:
    """Expected per-episode visit counts, propagated forward for ``horizon`` steps."""
    P = _policy_matrix(mdp, policy)
    live = (~mdp.terminal).astype(float)
    mass = mdp.initial_dist * live
    counts = np.zeros(mdp.n_states)
    for _ in range(horizon or mdp.horizon):
        counts += mass
        mass = (mass @ P) * live
    return VisitationDist(d=counts / counts.sum(), mode="exact_episodic", mdp=mdp)


def visitation_monte_carlo(mdp: TabularFMDP, policy: PolicyTable, episodes: int,
                           seed: int = 0, horizon: int | None = None) -> VisitationDist:
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    _, _, visits = TabularSim(mdp, horizon=horizon).episodes(policy.probs, episodes, rng)
    visits[mdp.terminal] = 0.0
    return VisitationDist(d=visits / visits.sum(), mode="monte_carlo", mdp=mdp)


def _class_members(mdp: TabularFMDP, phi: StateRepresentation, s: int) -> np.ndarray:
    key = project(phi, mdp.state(s))
    keys = mdp.class_keys(phi)
    return np.array([i for i, k in enumerate(keys) if k == key], dtype=int)


def _class_weights(dist: VisitationDist, phi: StateRepresentation, s: int):
    members = _class_members(dist.mdp, phi, s)
    mass = dist.d[members]
    total = mass.sum()
    if total <= 0.0:
        raise UnvisitedClassError(
            f"unvisited abstraction class {project(phi, dist.mdp.state(s))} under {phi.kept_factors}")
    return members, mass / total


def cond_state_dist(dist: VisitationDist, phi: StateRepresentation, s) -> dict[int, float]:
    """P(s' | phi(s)) over the members of the class of ``s``."""
    s = _state_idx(dist.mdp, s)
    members, w = _class_weights(dist, phi, s)
    return {int(m): float(p) for m, p in zip(members, w)}


def v_under_phi(values: ValueTables, dist: VisitationDist, phi: StateRepresentation, s) -> float:
    s = _state_idx(dist.mdp, s)
    members, w = _class_weights(dist, phi, s)
    return float(w @ values.v[members])


def q_under_phi(values: ValueTables, dist: VisitationDist, phi: StateRepresentation, s, a: int) -> float:
    s = _state_idx(dist.mdp, s)
    members, w = _class_weights(dist, phi, s)
    return float(w @ values.q[members, a])


def advantage_under_phi(values: ValueTables, dist: VisitationDist, phi: StateRepresentation,
                        s, a: int, policy: PolicyTable | None = None) -> AdvantageDecomposition:
    """Representation-conditioned advantage and the terms of its scaling decomposition."""
    policy = policy or values.policy
    if policy is None:
        raise ValueError("a policy is required to weight actions")
    s = _state_idx(dist.mdp, s)
    members, w = _class_weights(dist, phi, s)
    pi = policy.probs[members]  # (m, A)
    q = values.q[members]
    joint = w[:, None] * pi  # P(s', a' | phi(s))
    v_phi = float(w @ values.v[members])
    q_sa = float(values.q[s, a])
    pos = int(np.flatnonzero(members == s)[0])
    p_sa = float(joint[pos, a])
    mask = np.ones_like(joint, dtype=bool)
    mask[pos, a] = False
    rest = float(joint[mask].sum())
    if rest <= 1e-15:
        return AdvantageDecomposition(a_phi=0.0, p_sa_given_phi=p_sa, q_sa=q_sa, q_tilde=float("nan"),
                                      v_phi=v_phi, state=s, action=a, degenerate=True)
    q_tilde = float((joint[mask] * q[mask]).sum() / rest)
    return AdvantageDecomposition(a_phi=q_sa - v_phi, p_sa_given_phi=p_sa, q_sa=q_sa, q_tilde=q_tilde,
                                  v_phi=v_phi, state=s, action=a)


def theorem1_decompose(decomp: AdvantageDecomposition) -> float:
    """Residual of A = (1 - P(s,a|phi)) (Q(s,a) - Q~(not <s,a>))."""
    if decomp.degenerate or decomp.p_sa_given_phi >= 1.0:
        raise DegenerateClassError("the pair holds all class mass; the scaling identity is vacuous")
    lhs = decomp.q_sa - decomp.v_phi
    rhs = (1.0 - decomp.p_sa_given_phi) * (decomp.q_sa - decomp.q_tilde)
    return abs(lhs - rhs)


def class_action_prob(policy: PolicyTable, dist: VisitationDist, phi: StateRepresentation, s) -> np.ndarray:
    """pi(. | phi(s)): the visitation-weighted action distribution over the class."""
    s = _state_idx(dist.mdp, s)
    members, w = _class_weights(dist, phi, s)
    return w @ policy.probs[members]


def corollary_decompose(values: ValueTables, dist: VisitationDist, phi: StateRepresentation,
                        s, a: int, policy: PolicyTable | None = None, tol: float = 1e-9) -> float:
    """Residual of A = (1 - pi(a|phi(s))) (Q(s,a) - Q~(s, not a)) for a Markov ``phi``."""
    policy = policy or values.policy
    report = markov_check(values.mdp, phi, tol)
    if not report.is_markov:
        raise NotMarkovError(f"representation {phi.kept_factors} is not Markov")
    s = _state_idx(dist.mdp, s)
    decomp = advantage_under_phi(values, dist, phi, s, a, policy)
    pi_phi = class_action_prob(policy, dist, phi, s)
    others = np.arange(len(pi_phi)) != a
    rest = pi_phi[others].sum()
    if rest <= 1e-15:
        rhs = 0.0
    else:
        q_tilde = float(pi_phi[others] @ values.q[s, others] / rest)
        rhs = (1.0 - pi_phi[a]) * (values.q[s, a] - q_tilde)
    lhs = values.q[s, a] - decomp.v_phi
    return abs(lhs - rhs)


# ---------------------------------------------------------------------------
# Markov and confounding checks

class Violation(NamedTuple):
    class_key: tuple
    action: int
    kind: str  # "reward" | "transition"
    deviation: float


class MarkovReport(NamedTuple):
    is_markov: bool
    violations: list


class Witness(NamedTuple):
    class_key: tuple
    action: int
    kind: str
    on_policy: object
    intervened: object
    deviation: float


class ConfoundingReport(NamedTuple):
    confounded: bool
    witnesses: list


def class_transition_tensor(mdp: TabularFMDP, phi: StateRepresentation):
    """(S, A, C+1) probabilities of landing in each class; the last column is the sink."""
    partition = mdp.partition(phi)
    keys = list(partition)
    M = np.zeros((mdp.n_states, mdp.n_actions, len(keys) + 1))
    for c, key in enumerate(keys):
        M[:, :, c] = mdp.transition[:, :, partition[key]].sum(axis=2)
    M[:, :, -1] = mdp.transition[:, :, mdp.terminal].sum(axis=2)
    return keys, partition, M


def markov_check(mdp: TabularFMDP, phi: StateRepresentation, tol: float = 1e-12) -> MarkovReport:
    if tol < 0:
        raise ValueError("tol must be >= 0")
    keys, partition, M = class_transition_tensor(mdp, phi)
    violations = []
    for key in keys:
        members = partition[key]
        for a in range(mdp.n_actions):
            r = mdp.reward[members, a]
            dev = float(r.max() - r.min())
            if dev > tol:
                violations.append(Violation(key, a, "reward", dev))
            rows = M[members, a]
            dev = float((rows.max(axis=0) - rows.min(axis=0)).max())
            if dev > tol:
                violations.append(Violation(key, a, "transition", dev))
    return MarkovReport(not violations, violations)


def confounding_check(mdp: TabularFMDP, policy: PolicyTable, phi: StateRepresentation,
                      tol: float = 1e-9, intervention: str = "uniform",
                      dist: VisitationDist | None = None) -> ConfoundingReport:
    """Compare on-policy class rewards/transitions with their do-intervened versions.

    On-policy quantities weight the visited members of a class by visitation;
    the intervention weights every member of the class uniformly.
    """
    if intervention != "uniform":
        raise ValueError(f"unsupported intervention weighting {intervention!r}")
    dist = dist or visitation_exact(mdp, policy)
    keys, partition, M = class_transition_tensor(mdp, phi)
    witnesses = []
    for key in keys:
        members = np.array(partition[key])
        mass = dist.d[members]
        if mass.sum() <= 0.0:
            continue
        w_on = mass / mass.sum()
        w_do = np.full(len(members), 1.0 / len(members))
        for a in range(mdp.n_actions):
            r = mdp.reward[members, a]
            r_on, r_do = float(w_on @ r), float(w_do @ r)
            if abs(r_on - r_do) > tol:
                witnesses.append(Witness(key, a, "reward", r_on, r_do, abs(r_on - r_do)))
            p_on, p_do = w_on @ M[members, a], w_do @ M[members, a]
            dev = float(np.abs(p_on - p_do).max())
            if dev > tol:
                witnesses.append(Witness(key, a, "transition", p_on, p_do, dev))
    return ConfoundingReport(bool(witnesses), witnesses)
