"""Small random and hand-built MDPs shared by the test modules."""
from __future__ import annotations

import numpy as np

from advlab.fmdp import PolicyTable, TabularFMDP, enumerate_states


def random_mdp(seed: int, domains=(2, 3), n_actions: int = 2, p_end: float = 0.2, horizon: int = 30,
               sparsity: float = 0.5) -> TabularFMDP:
    """Random factored MDP whose every non-sink state ends the episode with probability >= p_end."""
    rng = np.random.default_rng(seed)
    states = enumerate_states(domains)
    S = len(states) + 1
    T = np.zeros((S, n_actions, S))
    for s in range(S - 1):
        for a in range(n_actions):
            w = rng.random(S - 1) * (rng.random(S - 1) > sparsity)
            if w.sum() == 0:
                w[rng.integers(S - 1)] = 1.0
            T[s, a, :-1] = (1.0 - p_end) * w / w.sum()
            T[s, a, -1] = p_end
    T[-1, :, -1] = 1.0
    R = rng.normal(size=(S, n_actions))
    R[-1] = 0.0
    term = np.zeros(S, dtype=bool)
    term[-1] = True
    init = np.zeros(S)
    init[:-1] = rng.dirichlet(np.ones(S - 1))
    return TabularFMDP(tuple(domains), tuple(states), n_actions, T, R, term, init, horizon, name=f"random{seed}")


def random_policy(mdp: TabularFMDP, seed: int, floor: float = 0.0) -> PolicyTable:
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)
    p = (1 - floor * mdp.n_actions) * p + floor
    return PolicyTable(p)


def chain(n: int, reward_at_end: float = 1.0, horizon: int = 50) -> TabularFMDP:
    """Deterministic chain 0 -> 1 -> ... -> n-1 -> sink; the last step pays ``reward_at_end``."""
    states = enumerate_states((n,))
    S = n + 1
    T = np.zeros((S, 1, S))
    R = np.zeros((S, 1))
    for s in range(n):
        T[s, 0, s + 1 if s + 1 < n else n] = 1.0
    R[n - 1, 0] = reward_at_end
    T[n, 0, n] = 1.0
    term = np.zeros(S, dtype=bool)
    term[n] = True
    init = np.zeros(S)
    init[0] = 1.0
    return TabularFMDP((n,), tuple(states), 1, T, R, term, init, horizon, name=f"chain{n}")


# one "[PASS]/[FAIL] criterion N (...)" line per acceptance criterion run in this session
CRITERION_LINES: list = []
