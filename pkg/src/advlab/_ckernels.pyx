# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tabular simulation and return recursions.

Must stay step-for-step identical to ``_pykernels``: every draw consumes the
same uniform slot, and categorical sampling picks the first index ``j`` with
``u < cum[j]`` (the last index if none).
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

DEF FLAG_NONE = 0
DEF FLAG_TERMINAL = 1
DEF FLAG_TRUNCATED = 2


cdef inline Py_ssize_t _sample(const double[::1] cum, double u) noexcept nogil:
    cdef Py_ssize_t j = 0
    cdef Py_ssize_t n = cum.shape[0]
    while j < n - 1 and u >= cum[j]:
        j += 1
    return j


def rollout(const double[:, :, ::1] cum_trans, const double[:, ::1] reward,
            const cnp.uint8_t[::1] terminal, const double[::1] init_cum,
            const double[:, ::1] cum_policy, int horizon, long state, long t,
            const double[:, ::1] uniforms):
    cdef Py_ssize_t n = uniforms.shape[0]
    states_arr = np.empty(n, dtype=np.int64)
    actions_arr = np.empty(n, dtype=np.int64)
    next_arr = np.empty(n, dtype=np.int64)
    rewards_arr = np.empty(n, dtype=np.float64)
    flags_arr = np.empty(n, dtype=np.int8)
    cdef cnp.int64_t[::1] states = states_arr
    cdef cnp.int64_t[::1] actions = actions_arr
    cdef cnp.int64_t[::1] nexts = next_arr
    cdef double[::1] rewards = rewards_arr
    cdef cnp.int8_t[::1] flags = flags_arr
    cdef Py_ssize_t i, a, ns
    with nogil:
        for i in range(n):
            if state < 0:
                state = _sample(init_cum, uniforms[i, 0])
                t = 0
            a = _sample(cum_policy[state], uniforms[i, 1])
            ns = _sample(cum_trans[state, a], uniforms[i, 2])
            states[i] = state
            actions[i] = a
            nexts[i] = ns
            rewards[i] = reward[state, a]
            t += 1
            if terminal[ns]:
                flags[i] = FLAG_TERMINAL
                state = -1
            elif t >= horizon:
                flags[i] = FLAG_TRUNCATED
                state = -1
            else:
                flags[i] = FLAG_NONE
                state = ns
    return states_arr, actions_arr, rewards_arr, next_arr, flags_arr, state, t


def episodes(const double[:, :, ::1] cum_trans, const double[:, ::1] reward,
             const cnp.uint8_t[::1] terminal, const double[::1] init_cum,
             const double[:, ::1] cum_policy, int horizon, const double[:, ::1] uniforms):
    cdef Py_ssize_t n_eps = uniforms.shape[0]
    cdef Py_ssize_t S = cum_trans.shape[0]
    returns_arr = np.zeros(n_eps, dtype=np.float64)
    lengths_arr = np.zeros(n_eps, dtype=np.int64)
    visits_arr = np.zeros(S, dtype=np.float64)
    cdef double[::1] returns = returns_arr
    cdef cnp.int64_t[::1] lengths = lengths_arr
    cdef double[::1] visits = visits_arr
    cdef Py_ssize_t e, k, s, a, ns
    cdef double total
    with nogil:
        for e in range(n_eps):
            s = _sample(init_cum, uniforms[e, 0])
            total = 0.0
            k = 0
            while k < horizon:
                visits[s] += 1.0
                a = _sample(cum_policy[s], uniforms[e, 1 + 2 * k])
                ns = _sample(cum_trans[s, a], uniforms[e, 2 + 2 * k])
                total += reward[s, a]
                k += 1
                if terminal[ns]:
                    break
                s = ns
            returns[e] = total
            lengths[e] = k
    return returns_arr, lengths_arr, visits_arr


def discounted_returns(const double[::1] rewards, const cnp.int8_t[::1] flags,
                       const double[::1] next_values, double gamma):
    cdef Py_ssize_t n = rewards.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double g = 0.0
    cdef Py_ssize_t i
    for i in range(n - 1, -1, -1):
        if flags[i] == FLAG_TERMINAL:
            g = rewards[i]
        elif flags[i] == FLAG_TRUNCATED or i == n - 1:
            g = rewards[i] + gamma * next_values[i]
        else:
            g = rewards[i] + gamma * g
        out[i] = g
    return out_arr


def gae(const double[::1] rewards, const double[::1] values, const double[::1] next_values,
        const cnp.int8_t[::1] flags, double gamma, double lam):
    cdef Py_ssize_t n = rewards.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double acc = 0.0
    cdef double delta
    cdef Py_ssize_t i
    for i in range(n - 1, -1, -1):
        if flags[i] == FLAG_TERMINAL:
            delta = rewards[i] - values[i]
            acc = delta
        elif flags[i] == FLAG_TRUNCATED or i == n - 1:
            delta = rewards[i] + gamma * next_values[i] - values[i]
            acc = delta
        else:
            delta = rewards[i] + gamma * next_values[i] - values[i]
            acc = delta + gamma * lam * acc
        out[i] = acc
    return out_arr
