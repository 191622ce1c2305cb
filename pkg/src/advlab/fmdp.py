"""Factored tabular MDPs, policies and state representations.

States are integer-coded assignments to a fixed list of factors. Every
``TabularFMDP`` also carries one absorbing sink (the last index) that episodes
enter on termination; the sink is not a factored state and belongs to no
equivalence class.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

ROW_TOL = 1e-12


@dataclass(frozen=True)
class FactoredState:
    values: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def __iter__(self) -> Iterator[int]:
        return iter(self.values)

    def __repr__(self) -> str:
        return "<" + ",".join(str(v) for v in self.values) + ">"


def enumerate_states(factor_domains: Sequence[int]) -> list[FactoredState]:
    """All value combinations in lexicographic order (last factor fastest)."""
    if len(factor_domains) == 0:
        raise ValueError("factor_domains must not be empty")
    for size in factor_domains:
        if int(size) < 1:
            raise ValueError(f"factor domain sizes must be >= 1, got {size}")
    return [FactoredState(v) for v in itertools.product(*(range(int(n)) for n in factor_domains))]


def state_index(factor_domains: Sequence[int], values: Sequence[int]) -> int:
    """Mixed-radix index of ``values`` in :func:`enumerate_states` order."""
    idx = 0
    for size, v in zip(factor_domains, values):
        if not 0 <= v < size:
            raise ValueError(f"value {v} outside domain of size {size}")
        idx = idx * size + int(v)
    return idx


@dataclass(frozen=True)
class StateRepresentation:
    """Projection onto a subset of factor indices."""

    kept_factors: tuple[int, ...]

    def __post_init__(self):
        kept = tuple(int(i) for i in self.kept_factors)
        if len(set(kept)) != len(kept):
            raise ValueError(f"duplicate factor indices in {kept}")
        if any(i < 0 for i in kept):
            raise ValueError(f"negative factor index in {kept}")
        object.__setattr__(self, "kept_factors", kept)

    @classmethod
    def identity(cls, n_factors: int) -> "StateRepresentation":
        return cls(tuple(range(n_factors)))

    @classmethod
    def constant(cls) -> "StateRepresentation":
        return cls(())

    def validate(self, n_factors: int) -> None:
        for i in self.kept_factors:
            if i >= n_factors:
                raise ValueError(f"factor index {i} out of range for {n_factors} factors")

    def is_identity(self, n_factors: int) -> bool:
        return set(self.kept_factors) == set(range(n_factors))


def project(phi: StateRepresentation, s: FactoredState) -> tuple[int, ...]:
    phi.validate(len(s))
    return tuple(s.values[i] for i in phi.kept_factors)


@dataclass(frozen=True, eq=False)
class TabularFMDP:
    """Enumerated factored MDP.

    Arrays are indexed over ``n_states = len(states) + 1``; index ``sink`` is
    the absorbing terminal state.
    """

    factor_domains: tuple[int, ...]
    states: tuple[FactoredState, ...]
    n_actions: int
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    terminal: np.ndarray  # (S,) bool
    initial_dist: np.ndarray  # (S,)
    horizon: int
    name: str = "fmdp"
    factor_names: tuple[str, ...] = ()
    action_names: tuple[str, ...] = ()
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        S = len(self.states) + 1
        A = int(self.n_actions)
        for arr_name, shape in (("transition", (S, A, S)), ("reward", (S, A)),
                                ("terminal", (S,)), ("initial_dist", (S,))):
            arr = np.asarray(getattr(self, arr_name))
            if arr.shape != shape:
                raise ValueError(f"{arr_name} has shape {arr.shape}, expected {shape}")
        T = np.ascontiguousarray(self.transition, dtype=float)
        R = np.ascontiguousarray(self.reward, dtype=float)
        term = np.asarray(self.terminal, dtype=bool).copy()
        init = np.asarray(self.initial_dist, dtype=float).copy()
        if np.any(T < 0) or np.abs(T.sum(axis=2) - 1.0).max() > ROW_TOL:
            raise ValueError("transition rows must be probability vectors")
        if not np.all(np.isfinite(R)):
            raise ValueError("rewards must be finite")
        if np.any(init < 0) or abs(init.sum() - 1.0) > ROW_TOL:
            raise ValueError("initial_dist must sum to 1")
        for s in np.flatnonzero(term):
            if np.any(T[s, :, s] != 1.0) or np.any(R[s] != 0.0):
                raise ValueError(f"terminal state {s} must self-loop with reward 0")
        if not term[-1]:
            raise ValueError("the sink (last index) must be terminal")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for st in self.states:
            if len(st) != len(self.factor_domains):
                raise ValueError(f"state {st} has wrong number of factors")
            for v, n in zip(st, self.factor_domains):
                if not 0 <= v < n:
                    raise ValueError(f"state {st} outside factor domains")
        for arr in (T, R, term, init):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", T)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "terminal", term)
        object.__setattr__(self, "initial_dist", init)
        object.__setattr__(self, "_index", {st.values: i for i, st in enumerate(self.states)})

    @property
    def n_states(self) -> int:
        return len(self.states) + 1

    @property
    def n_factors(self) -> int:
        return len(self.factor_domains)

    @property
    def sink(self) -> int:
        return len(self.states)

    def index(self, s) -> int:
        values = s.values if isinstance(s, FactoredState) else tuple(s)
        try:
            return self._index[tuple(values)]
        except KeyError:
            raise KeyError(f"state {values} not in {self.name}") from None

    def state(self, i: int) -> FactoredState:
        if i == self.sink:
            raise IndexError("the sink has no factored state")
        return self.states[i]

    def class_keys(self, phi: StateRepresentation) -> list[tuple[int, ...]]:
        """Projection key of each factored state, in index order."""
        phi.validate(self.n_factors)
        return [project(phi, s) for s in self.states]

    def partition(self, phi: StateRepresentation) -> dict[tuple[int, ...], list[int]]:
        classes: dict[tuple[int, ...], list[int]] = {}
        for i, key in enumerate(self.class_keys(phi)):
            classes.setdefault(key, []).append(i)
        return classes


def equivalence_class(phi: StateRepresentation, s, mdp: TabularFMDP) -> list[int]:
    """Indices of every state agreeing with ``s`` on the kept factors."""
    if not isinstance(s, FactoredState):
        s = mdp.state(int(s))
    mdp.index(s)
    key = project(phi, s)
    return [i for i, k in enumerate(mdp.class_keys(phi)) if k == key]


class PolicyTable:
    """Row-stochastic action distribution per state index."""

    def __init__(self, probs):
        probs = np.array(probs, dtype=float)
        if probs.ndim != 2:
            raise ValueError("policy table must be 2-d (states x actions)")
        if np.any(probs < 0) or np.abs(probs.sum(axis=1) - 1.0).max() > ROW_TOL:
            raise ValueError("policy rows must be probability vectors")
        probs.setflags(write=False)
        self.probs = probs

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "PolicyTable":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "PolicyTable":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def __getitem__(self, s):
        return self.probs[s]

    def __repr__(self) -> str:
        return f"PolicyTable({self.n_states}x{self.n_actions})"
