"""Pure-Python twins of the compiled kernels in ``_ckernels.pyx``."""
from __future__ import annotations

import numpy as np

FLAG_NONE, FLAG_TERMINAL, FLAG_TRUNCATED = 0, 1, 2


def _sample(cum, u):
    j = 0
    n = len(cum)
    while j < n - 1 and u >= cum[j]:
        j += 1
    return j


def rollout(cum_trans, reward, terminal, init_cum, cum_policy, horizon, state, t, uniforms):
    ct = cum_trans.tolist()
    rw = reward.tolist()
    term = [bool(x) for x in terminal]
    ic = init_cum.tolist()
    cp = cum_policy.tolist()
    us = uniforms.tolist()
    n = len(us)
    states = [0] * n
    actions = [0] * n
    nexts = [0] * n
    rewards = [0.0] * n
    flags = [0] * n
    state, t = int(state), int(t)
    for i in range(n):
        u = us[i]
        if state < 0:
            state = _sample(ic, u[0])
            t = 0
        a = _sample(cp[state], u[1])
        ns = _sample(ct[state][a], u[2])
        states[i], actions[i], nexts[i] = state, a, ns
        rewards[i] = rw[state][a]
        t += 1
        if term[ns]:
            flags[i] = FLAG_TERMINAL
            state = -1
        elif t >= horizon:
            flags[i] = FLAG_TRUNCATED
            state = -1
        else:
            state = ns
    return (np.array(states, dtype=np.int64), np.array(actions, dtype=np.int64),
            np.array(rewards, dtype=np.float64), np.array(nexts, dtype=np.int64),
            np.array(flags, dtype=np.int8), state, t)


def episodes(cum_trans, reward, terminal, init_cum, cum_policy, horizon, uniforms):
    ct = cum_trans.tolist()
    rw = reward.tolist()
    term = [bool(x) for x in terminal]
    ic = init_cum.tolist()
    cp = cum_policy.tolist()
    n_eps = uniforms.shape[0]
    returns = [0.0] * n_eps
    lengths = [0] * n_eps
    visits = [0.0] * cum_trans.shape[0]
    for e, u in enumerate(uniforms.tolist()):
        s = _sample(ic, u[0])
        total = 0.0
        k = 0
        while k < horizon:
            visits[s] += 1.0
            a = _sample(cp[s], u[1 + 2 * k])
            ns = _sample(ct[s][a], u[2 + 2 * k])
            total += rw[s][a]
            k += 1
            if term[ns]:
                break
            s = ns
        returns[e] = total
        lengths[e] = k
    return np.array(returns), np.array(lengths, dtype=np.int64), np.array(visits)


def discounted_returns(rewards, flags, next_values, gamma):
    n = len(rewards)
    out = np.empty(n)
    g = 0.0
    for i in range(n - 1, -1, -1):
        if flags[i] == FLAG_TERMINAL:
            g = rewards[i]
        elif flags[i] == FLAG_TRUNCATED or i == n - 1:
            g = rewards[i] + gamma * next_values[i]
        else:
            g = rewards[i] + gamma * g
        out[i] = g
    return out


def gae(rewards, values, next_values, flags, gamma, lam):
    n = len(rewards)
    out = np.empty(n)
    acc = 0.0
    for i in range(n - 1, -1, -1):
        if flags[i] == FLAG_TERMINAL:
            acc = rewards[i] - values[i]
        elif flags[i] == FLAG_TRUNCATED or i == n - 1:
            acc = rewards[i] + gamma * next_values[i] - values[i]
        else:
            delta = rewards[i] + gamma * next_values[i] - values[i]
            acc = delta + gamma * lam * acc
        out[i] = acc
    return out
