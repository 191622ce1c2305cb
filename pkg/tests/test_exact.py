import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advlab import exact
from advlab.envs import build
from advlab.fmdp import PolicyTable, StateRepresentation
from helpers import chain, random_mdp, random_policy

seeds = st.integers(0, 100_000)


def linear_solve(mdp, policy, gamma):
    """Oracle: V = (I - gamma P_pi)^-1 r_pi on the live states."""
    live = ~mdp.terminal
    P = np.einsum("sa,sat->st", policy.probs, mdp.transition)[np.ix_(live, live)]
    r = (policy.probs * mdp.reward).sum(axis=1)[live]
    v = np.zeros(mdp.n_states)
    v[live] = np.linalg.solve(np.eye(live.sum()) - gamma * P, r)
    return v, mdp.reward + gamma * mdp.transition @ v


@settings(max_examples=30, deadline=None)
@given(seeds, st.sampled_from([0.5, 0.9, 0.99, 1.0]))
def test_policy_evaluation_matches_linear_solve(seed, gamma):
    mdp = random_mdp(seed)
    pol = random_policy(mdp, seed + 1)
    vals = exact.policy_evaluation(mdp, pol, gamma)
    v, q = linear_solve(mdp, pol, gamma)
    np.testing.assert_allclose(vals.v, v, atol=1e-9)
    np.testing.assert_allclose(vals.q, q, atol=1e-9)
    np.testing.assert_allclose(vals.v, (pol.probs * vals.q).sum(axis=1), atol=1e-12)


def test_chain_values():
    vals = exact.policy_evaluation(chain(4), PolicyTable.uniform(5, 1), 0.9)
    np.testing.assert_allclose(vals.v[:4], [0.9 ** 3, 0.9 ** 2, 0.9, 1.0])
    assert vals.v[4] == 0.0


def test_policy_evaluation_argument_checks():
    mdp = random_mdp(0)
    with pytest.raises(ValueError):
        exact.policy_evaluation(mdp, random_policy(mdp, 0), gamma=0.0)
    with pytest.raises(ValueError):
        exact.policy_evaluation(mdp, random_policy(mdp, 0), tol=0.0)
    with pytest.raises(exact.ConvergenceError):
        exact.policy_evaluation(mdp, random_policy(mdp, 0), 0.99, max_iter=3)


def test_undiscounted_evaluation_needs_absorbing_policy():
    mdp = build("key2door")
    stay_left = PolicyTable.deterministic(np.zeros(mdp.n_states, dtype=int), 2)
    with pytest.raises(ValueError):
        exact.policy_evaluation(mdp, stay_left, gamma=1.0)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_optimal_values_satisfy_bellman_optimality(seed):
    mdp = random_mdp(seed)
    tables, greedy = exact.optimal_values(mdp, 0.9)
    np.testing.assert_allclose(tables.v, tables.q.max(axis=1), atol=1e-9)
    # no deterministic policy beats the greedy one
    for acts in itertools.islice(itertools.product(range(2), repeat=mdp.n_states), 16):
        other = exact.policy_evaluation(mdp, PolicyTable.deterministic(np.array(acts), 2), 0.9)
        assert np.all(other.v <= tables.v + 1e-9)


def test_epsilon_optimal_policy():
    greedy = PolicyTable.deterministic(np.array([1, 0, 1]), 3)
    pol = exact.epsilon_optimal_policy(greedy, 0.6)
    np.testing.assert_allclose(pol.probs[0], [0.2, 0.6, 0.2])
    with pytest.raises(ValueError):
        exact.epsilon_optimal_policy(greedy, 0.2)


def test_visitation_exact_matches_monte_carlo():
    mdp = random_mdp(4, horizon=10)
    pol = random_policy(mdp, 5)
    ex = exact.visitation_exact(mdp, pol)
    mc = exact.visitation_monte_carlo(mdp, pol, 40_000, seed=1)
    assert abs(ex.d.sum() - 1) < 1e-12 and ex.d[mdp.sink] == 0
    np.testing.assert_allclose(mc.d, ex.d, atol=0.01)


def test_visitation_of_chain_is_uniform():
    d = exact.visitation_exact(chain(5), PolicyTable.uniform(6, 1)).d
    np.testing.assert_allclose(d[:5], 0.2)


@settings(max_examples=40, deadline=None)
@given(seeds, st.sampled_from([(0,), (1,), ()]))
def test_scaling_identity_on_random_mdps(seed, kept):
    mdp = random_mdp(seed, domains=(2, 3), n_actions=3)
    pol = random_policy(mdp, seed + 7, floor=0.02)
    vals = exact.policy_evaluation(mdp, pol, 0.95)
    dist = exact.visitation_exact(mdp, pol)
    phi = StateRepresentation(kept)
    for s in range(mdp.n_states - 1):
        if dist.d[s] == 0:
            continue
        for a in range(3):
            dec = exact.advantage_under_phi(vals, dist, phi, s, a)
            assert exact.theorem1_decompose(dec) < 1e-10
        # advantages of every (member, action) pair average to zero under P(s', a' | phi)
        w = exact.cond_state_dist(dist, phi, s)
        total = sum(p * pol.probs[m, b] * exact.advantage_under_phi(vals, dist, phi, m, b).a_phi
                    for m, p in w.items() for b in range(3))
        assert abs(total) < 1e-10


def test_identity_phi_gives_ordinary_advantage():
    mdp = random_mdp(9)
    pol = random_policy(mdp, 1)
    vals = exact.policy_evaluation(mdp, pol, 0.9)
    dist = exact.visitation_exact(mdp, pol)
    phi = StateRepresentation.identity(2)
    for s in np.flatnonzero(dist.d > 0):
        dec = exact.advantage_under_phi(vals, dist, phi, int(s), 1)
        assert abs(dec.a_phi - (vals.q[s, 1] - vals.v[s])) < 1e-12


def test_degenerate_class_raises():
    mdp = chain(3)
    pol = PolicyTable.uniform(4, 1)
    vals = exact.policy_evaluation(mdp, pol, 0.9)
    dec = exact.advantage_under_phi(vals, exact.visitation_exact(mdp, pol), StateRepresentation.identity(1), 0, 0)
    assert dec.degenerate
    with pytest.raises(exact.DegenerateClassError):
        exact.theorem1_decompose(dec)


def test_unvisited_class_raises():
    mdp = build("key2door")
    _, greedy = exact.optimal_values(mdp)
    dist = exact.visitation_exact(mdp, greedy)
    with pytest.raises(exact.UnvisitedClassError):
        exact.v_under_phi(exact.policy_evaluation(mdp, greedy), dist, StateRepresentation.identity(2), (5, 0))


def test_markov_check_on_key2door():
    mdp = build("key2door")
    assert exact.markov_check(mdp, StateRepresentation.identity(2)).is_markov
    report = exact.markov_check(mdp, StateRepresentation((0,)))
    assert not report.is_markov
    kinds = {(v.class_key, v.action, v.kind) for v in report.violations}
    assert ((6,), 1, "reward") in kinds
    with pytest.raises(ValueError):
        exact.markov_check(mdp, StateRepresentation((0,)), tol=-1)


def test_corollary_for_markov_phi_and_refusal_otherwise():
    mdp = build("frozen_tmaze")
    markov = [StateRepresentation(k) for r in range(5) for k in itertools.combinations(range(4), r)
              if exact.markov_check(mdp, StateRepresentation(k)).is_markov]
    assert len(markov) >= 1
    rng = np.random.default_rng(0)
    for phi in markov:
        keys = mdp.class_keys(phi)
        table = {k: rng.dirichlet(np.ones(4)) for k in set(keys)}
        pol = PolicyTable(np.array([table[k] for k in keys] + [np.full(4, 0.25)]))
        vals = exact.policy_evaluation(mdp, pol, 0.99)
        dist = exact.visitation_exact(mdp, pol)
        for s in np.flatnonzero(dist.d > 0)[:20]:
            for a in range(4):
                assert exact.corollary_decompose(vals, dist, phi, int(s), a) < 1e-10
    pol = PolicyTable.uniform(mdp.n_states, 4)
    vals = exact.policy_evaluation(mdp, pol, 0.99)
    with pytest.raises(exact.NotMarkovError):
        exact.corollary_decompose(vals, exact.visitation_exact(mdp, pol), StateRepresentation((0,)), 0, 0)


def test_confounding_check():
    mdp = build("key2door")
    _, greedy = exact.optimal_values(mdp)
    rep = exact.confounding_check(mdp, greedy, StateRepresentation((0,)))
    assert rep.confounded
    assert any(w.class_key == (6,) and w.action == 1 and w.kind == "reward" and w.on_policy == pytest.approx(1.0)
               for w in rep.witnesses)
    assert not exact.confounding_check(mdp, greedy, StateRepresentation.identity(2)).confounded
    with pytest.raises(ValueError):
        exact.confounding_check(mdp, greedy, StateRepresentation((0,)), intervention="other")
