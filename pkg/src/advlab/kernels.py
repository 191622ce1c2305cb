"""Backend selection for the tabular simulation and return kernels.

The compiled extension is used when it imports; setting ``ADVLAB_PURE_PYTHON=1``
forces the pure-Python implementation. Both produce identical results for the
same uniforms.
"""
from __future__ import annotations

import os

import numpy as np

from . import _pykernels

FLAG_NONE = _pykernels.FLAG_NONE
FLAG_TERMINAL = _pykernels.FLAG_TERMINAL
FLAG_TRUNCATED = _pykernels.FLAG_TRUNCATED

try:
    if os.environ.get("ADVLAB_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _ckernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"


def backends() -> dict:
    """Every importable backend module keyed by name (used by tests and the benchmark)."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels
        found["cython"] = _ckernels
    except ImportError:
        pass
    return found


def cumulative(p: np.ndarray) -> np.ndarray:
    c = np.cumsum(np.asarray(p, dtype=np.float64), axis=-1)
    return np.ascontiguousarray(c)


class TabularSim:
    """Cumulative tables of an MDP, ready for the sampling kernels."""

    def __init__(self, mdp, impl=None, horizon: int | None = None):
        self.mdp = mdp
        self.impl = impl or _impl
        self.cum_trans = cumulative(mdp.transition)
        self.reward = np.ascontiguousarray(mdp.reward, dtype=np.float64)
        self.terminal = np.ascontiguousarray(mdp.terminal, dtype=np.uint8)
        self.init_cum = cumulative(mdp.initial_dist)
        self.horizon = int(horizon or mdp.horizon)

    def rollout(self, policy_probs, state, t, uniforms):
        """Run ``len(uniforms)`` steps with auto-reset; ``state=-1`` forces a reset."""
        return self.impl.rollout(self.cum_trans, self.reward, self.terminal, self.init_cum,
                                 cumulative(policy_probs), self.horizon, int(state), int(t),
                                 np.ascontiguousarray(uniforms, dtype=np.float64))

    def episodes(self, policy_probs, n_episodes, rng, chunk=4096):
        """Returns, lengths and raw visit counts of ``n_episodes`` fresh episodes."""
        cum_pol = cumulative(policy_probs)
        width = 1 + 2 * self.horizon
        returns, lengths = [], []
        visits = np.zeros(self.mdp.n_states)
        done = 0
        while done < n_episodes:
            k = min(chunk, n_episodes - done)
            u = rng.random((k, width))
            r, n, v = self.impl.episodes(self.cum_trans, self.reward, self.terminal, self.init_cum,
                                         cum_pol, self.horizon, u)
            returns.append(r)
            lengths.append(n)
            visits += v
            done += k
        return np.concatenate(returns), np.concatenate(lengths), visits


def discounted_returns(rewards, flags, next_values, gamma, impl=None):
    return (impl or _impl).discounted_returns(
        np.ascontiguousarray(rewards, dtype=np.float64), np.ascontiguousarray(flags, dtype=np.int8),
        np.ascontiguousarray(next_values, dtype=np.float64), float(gamma))


def gae(rewards, values, next_values, flags, gamma, lam, impl=None):
    return (impl or _impl).gae(
        np.ascontiguousarray(rewards, dtype=np.float64), np.ascontiguousarray(values, dtype=np.float64),
        np.ascontiguousarray(next_values, dtype=np.float64), np.ascontiguousarray(flags, dtype=np.int8),
        float(gamma), float(lam))
