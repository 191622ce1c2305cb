import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advlab import kernels
from advlab.envs import build
from advlab.kernels import FLAG_NONE, FLAG_TERMINAL, FLAG_TRUNCATED, TabularSim
from helpers import random_mdp, random_policy

BACKENDS = kernels.backends()


def returns_oracle(rewards, flags, next_values, gamma):
    """Forward definition: sum of discounted rewards until the segment ends."""
    n = len(rewards)
    out = np.zeros(n)
    for i in range(n):
        g, disc = 0.0, 1.0
        for j in range(i, n):
            g += disc * rewards[j]
            if flags[j] == FLAG_TERMINAL:
                break
            if flags[j] == FLAG_TRUNCATED or j == n - 1:
                g += disc * gamma * next_values[j]
                break
            disc *= gamma
        out[i] = g
    return out


def gae_oracle(rewards, values, next_values, flags, gamma, lam):
    n = len(rewards)
    delta = np.array([rewards[i] + (0.0 if flags[i] == FLAG_TERMINAL else gamma * next_values[i]) - values[i]
                      for i in range(n)])
    out = np.zeros(n)
    for i in range(n):
        w = 1.0
        for j in range(i, n):
            out[i] += w * delta[j]
            if flags[j] != FLAG_NONE:
                break
            w *= gamma * lam
    return out


segments = st.integers(1, 40).flatmap(lambda n: st.tuples(
    st.lists(st.floats(-1, 1), min_size=n, max_size=n),
    st.lists(st.sampled_from([0, 0, 0, 1, 2]), min_size=n, max_size=n),
    st.lists(st.floats(-2, 2), min_size=n, max_size=n),
    st.lists(st.floats(-2, 2), min_size=n, max_size=n),
))


@settings(max_examples=150, deadline=None)
@given(segments, st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_returns_and_gae_match_oracles_on_every_backend(seg, gamma, lam):
    r, f, v, nv = (np.array(x, dtype=float) for x in seg)
    f = f.astype(np.int8)
    for impl in BACKENDS.values():
        np.testing.assert_allclose(kernels.discounted_returns(r, f, nv, gamma, impl), returns_oracle(r, f, nv, gamma),
                                   atol=1e-10)
        np.testing.assert_allclose(kernels.gae(r, v, nv, f, gamma, lam, impl), gae_oracle(r, v, nv, f, gamma, lam),
                                   atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(segments, st.floats(0.0, 1.0))
def test_gae_with_unit_lambda_is_return_minus_value(seg, gamma):
    r, f, v, nv = (np.array(x, dtype=float) for x in seg)
    f = f.astype(np.int8)
    inside = f[:-1] == FLAG_NONE
    nv[:-1][inside] = v[1:][inside]  # the identity needs consistent bootstraps within a segment
    np.testing.assert_allclose(kernels.gae(r, v, nv, f, gamma, 1.0), kernels.discounted_returns(r, f, nv, gamma) - v,
                               atol=1e-9)


def test_returns_hand_example():
    r = np.array([-0.01, -0.01, 1.0, -0.01])
    f = np.array([0, 0, 1, 0], dtype=np.int8)
    got = kernels.discounted_returns(r, f, np.array([0, 0, 0, 0.5]), 0.9)
    np.testing.assert_allclose(got, [-0.01 - 0.009 + 0.81, -0.01 + 0.9, 1.0, -0.01 + 0.45])


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend not built")
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 300), st.integers(-1, 3))
def test_rollout_backends_agree(seed, steps, start):
    mdp = random_mdp(seed, p_end=0.2, horizon=7)
    pol = random_policy(mdp, seed + 1).probs
    u = np.random.default_rng(seed).random((steps, 3))
    state = start if start < mdp.n_states - 1 else -1
    outs = [TabularSim(mdp, impl).rollout(pol, state, 0, u) for impl in BACKENDS.values()]
    for a, b in zip(outs[0], outs[1]):
        np.testing.assert_array_equal(a, b)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend not built")
@pytest.mark.parametrize("name", ["key2door", "frozen_tmaze", "diversion"])
def test_episode_backends_agree(name):
    mdp = build(name, "eval")
    pol = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
    outs = [TabularSim(mdp, impl).episodes(pol, 300, np.random.default_rng(5)) for impl in BACKENDS.values()]
    for a, b in zip(outs[0], outs[1]):
        np.testing.assert_array_equal(a, b)


def test_rollout_flags_and_auto_reset():
    mdp = random_mdp(3, p_end=0.3, horizon=4)
    sim = TabularSim(mdp)
    states, actions, rewards, nexts, flags, _, _ = sim.rollout(random_policy(mdp, 0).probs, -1, 0,
                                                               np.random.default_rng(0).random((500, 3)))
    assert set(np.unique(flags)) <= {0, 1, 2}
    assert np.all(mdp.terminal[nexts[flags == FLAG_TERMINAL]])
    assert not np.any(mdp.terminal[states])
    np.testing.assert_array_equal(nexts[:-1][flags[:-1] == FLAG_NONE], states[1:][flags[:-1] == FLAG_NONE])
    np.testing.assert_allclose(rewards, mdp.reward[states, actions])
    # no segment runs longer than the horizon
    run = 0
    for f in flags:
        run += 1
        assert run <= 4
        if f != FLAG_NONE:
            run = 0


def test_sampling_matches_distribution():
    mdp = random_mdp(11, p_end=0.0, horizon=1)
    sim = TabularSim(mdp)
    pol = random_policy(mdp, 2).probs
    u = np.random.default_rng(1).random((40_000, 3))
    states, actions, _, nexts, _, _, _ = sim.rollout(pol, -1, 0, u)
    freq = np.bincount(states, minlength=mdp.n_states) / len(states)
    np.testing.assert_allclose(freq, mdp.initial_dist, atol=0.01)
    s0 = np.argmax(mdp.initial_dist)
    np.testing.assert_allclose(np.bincount(actions[states == s0], minlength=mdp.n_actions) / (states == s0).sum(),
                               pol[s0], atol=0.03)


def test_episode_counts_are_consistent():
    mdp = build("key2door")
    pol = np.full((mdp.n_states, mdp.n_actions), 0.5)
    returns, lengths, visits = TabularSim(mdp).episodes(pol, 1000, np.random.default_rng(0), chunk=128)
    assert returns.shape == (1000,) and visits.sum() == lengths.sum()
    assert lengths.max() <= mdp.horizon and visits[mdp.sink] == 0


def test_pure_python_fallback_is_selected_at_import():
    import os
    import subprocess
    import sys

    env = dict(os.environ, ADVLAB_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from advlab import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
