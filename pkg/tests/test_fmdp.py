import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advlab.fmdp import (FactoredState, PolicyTable, StateRepresentation, TabularFMDP, enumerate_states,
                         equivalence_class, project, state_index)
from helpers import chain, random_mdp

domains_st = st.lists(st.integers(1, 4), min_size=1, max_size=4)


def test_enumeration_order_last_factor_fastest():
    states = enumerate_states([2, 3])
    assert [s.values for s in states[:4]] == [(0, 0), (0, 1), (0, 2), (1, 0)]
    assert len(states) == 6


@pytest.mark.parametrize("bad", [[], [2, 0]])
def test_enumeration_rejects_empty_domains(bad):
    with pytest.raises(ValueError):
        enumerate_states(bad)


@given(domains_st)
def test_state_index_inverts_enumeration(domains):
    for i, s in enumerate(enumerate_states(domains)):
        assert state_index(domains, s.values) == i


def test_state_index_range_check():
    with pytest.raises(ValueError):
        state_index([2, 2], [0, 2])


def test_factored_state_behaves_like_a_tuple():
    s = FactoredState((3, 1))
    assert len(s) == 2 and s[0] == 3 and list(s) == [3, 1]
    assert repr(s) == "<3,1>"
    assert FactoredState([3, 1]) == s


def test_representation_validation():
    with pytest.raises(ValueError):
        StateRepresentation((0, 0))
    with pytest.raises(ValueError):
        StateRepresentation((-1,))
    with pytest.raises(ValueError):
        project(StateRepresentation((2,)), FactoredState((1, 1)))
    assert StateRepresentation.identity(3).is_identity(3)
    assert project(StateRepresentation.constant(), FactoredState((1, 2))) == ()
    assert project(StateRepresentation((1,)), FactoredState((4, 5))) == (5,)


@settings(max_examples=30)
@given(domains_st, st.data())
def test_partition_covers_states_exactly_once(domains, data):
    mdp = random_mdp(0, tuple(domains))
    kept = data.draw(st.lists(st.integers(0, len(domains) - 1), unique=True))
    phi = StateRepresentation(tuple(kept))
    part = mdp.partition(phi)
    members = sorted(i for group in part.values() for i in group)
    assert members == list(range(len(mdp.states)))
    for key, group in part.items():
        assert all(project(phi, mdp.states[i]) == key for i in group)
    assert len(part) == int(np.prod([domains[i] for i in kept])) if kept else len(part) == 1


def test_identity_classes_are_singletons_and_sink_is_excluded():
    mdp = random_mdp(1, (2, 2))
    assert all(len(g) == 1 for g in mdp.partition(StateRepresentation.identity(2)).values())
    assert mdp.sink not in equivalence_class(StateRepresentation.constant(), 0, mdp)
    with pytest.raises(IndexError):
        mdp.state(mdp.sink)


def test_mdp_validation_errors():
    good = chain(3)
    T = good.transition.copy()
    T[0, 0, 1] = 0.5
    with pytest.raises(ValueError, match="probability"):
        TabularFMDP(good.factor_domains, good.states, 1, T, good.reward, good.terminal, good.initial_dist, 10)
    R = good.reward.copy()
    R[0, 0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        TabularFMDP(good.factor_domains, good.states, 1, good.transition, R, good.terminal, good.initial_dist, 10)
    R = good.reward.copy()
    R[-1, 0] = 1.0
    with pytest.raises(ValueError, match="terminal"):
        TabularFMDP(good.factor_domains, good.states, 1, good.transition, R, good.terminal, good.initial_dist, 10)
    with pytest.raises(ValueError, match="initial"):
        TabularFMDP(good.factor_domains, good.states, 1, good.transition, good.reward, good.terminal,
                    good.initial_dist * 0.5, 10)
    with pytest.raises(ValueError, match="shape"):
        TabularFMDP(good.factor_domains, good.states, 2, good.transition, good.reward, good.terminal,
                    good.initial_dist, 10)


def test_mdp_arrays_are_read_only():
    mdp = chain(2)
    with pytest.raises(ValueError):
        mdp.transition[0, 0, 0] = 1.0


def test_two_constructions_share_index_maps():
    a, b = random_mdp(3, (2, 3)), random_mdp(3, (2, 3))
    assert [a.index(s) for s in a.states] == [b.index(s) for s in b.states]


def test_policy_table_validation():
    with pytest.raises(ValueError):
        PolicyTable([[0.5, 0.6]])
    with pytest.raises(ValueError):
        PolicyTable([0.5, 0.5])
    det = PolicyTable.deterministic([1, 0], 2)
    assert np.array_equal(det.probs, [[0, 1], [1, 0]])
    assert PolicyTable.uniform(3, 4)[2].sum() == pytest.approx(1.0)
