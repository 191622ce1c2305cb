"""Key2Door, Frozen T-Maze and Diversion as tabular FMDPs, plus observation encoders.

Grid conventions: ``row`` 0 is the top row, actions are
``up=0, down=1, left=2, right=3`` on the 2x7 grids and ``left=0, right=1``
in the Key2Door corridor. Terminal transitions carry only the goal reward
(no step penalty) and lead to the sink.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .fmdp import FactoredState, TabularFMDP, enumerate_states

ENV_NAMES = ("key2door", "frozen_tmaze", "diversion")
VARIANTS = ("train", "eval")
STEP_PENALTY = -0.01

N_COLS = 7
UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
GRID_ACTIONS = ("up", "down", "left", "right")

# Key2Door corridor: cells 1..6 are walkable, value 0 is the wall beyond the key.
K2D_KEY_CELL = 1
K2D_DOOR_CELL = 6
K2D_TRAIN_START = 2
HORIZONS = {"key2door": 50, "frozen_tmaze": 100, "diversion": 50}
DEFAULT_OBS_STACK = {"key2door": 1, "frozen_tmaze": 30, "diversion": 1}
ICE_COLUMN = 3
DIVERSION_COLUMN = 3


@dataclass(frozen=True)
class EnvSpec:
    name: str
    variant: str = "train"
    obs_stack: int | None = None

    def __post_init__(self):
        if self.name not in ENV_NAMES:
            raise ValueError(f"unknown env {self.name!r}; expected one of {ENV_NAMES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.obs_stack is None:
            object.__setattr__(self, "obs_stack", DEFAULT_OBS_STACK[self.name])
        if self.obs_stack < 1:
            raise ValueError("obs_stack must be >= 1")

    def with_variant(self, variant: str) -> "EnvSpec":
        return EnvSpec(self.name, variant, self.obs_stack)


def _check_variant(variant):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected 'train' or 'eval'")


def _assemble(name, domains, n_actions, step_fn, start_probs, horizon, factor_names, action_names):
    """Build arrays from ``step_fn(state) -> list of (prob, next_values | None, reward)`` per action."""
    states = enumerate_states(domains)
    index = {s.values: i for i, s in enumerate(states)}
    S = len(states) + 1
    sink = S - 1
    T = np.zeros((S, n_actions, S))
    R = np.zeros((S, n_actions))
    for i, s in enumerate(states):
        for a in range(n_actions):
            for prob, nxt, rew in step_fn(s.values, a):
                j = sink if nxt is None else index[tuple(nxt)]
                T[i, a, j] += prob
                R[i, a] += prob * rew
    T[sink, :, sink] = 1.0
    terminal = np.zeros(S, dtype=bool)
    terminal[sink] = True
    init = np.zeros(S)
    for values, p in start_probs:
        init[index[tuple(values)]] += p
    return TabularFMDP(
        factor_domains=tuple(domains), states=tuple(states), n_actions=n_actions,
        transition=T, reward=R, terminal=terminal, initial_dist=init, horizon=horizon,
        name=name, factor_names=factor_names, action_names=action_names,
    )


@lru_cache(maxsize=None)
def build_key2door(variant: str = "train") -> TabularFMDP:
    """Corridor with a key at cell 1 and a door opened by moving right at cell 6."""
    _check_variant(variant)

    def step(values, a):
        loc, key = values
        if a == 1 and loc == K2D_DOOR_CELL:
            return [(1.0, None, 1.0 if key else 0.0)]
        nloc = max(K2D_KEY_CELL, loc - 1) if a == 0 else min(K2D_DOOR_CELL, loc + 1)
        nkey = 1 if nloc == K2D_KEY_CELL else key
        return [(1.0, (nloc, nkey), STEP_PENALTY)]

    start = (K2D_TRAIN_START, 0) if variant == "train" else (K2D_DOOR_CELL, 0)
    return _assemble(f"key2door/{variant}", (7, 2), 2, step, [(start, 1.0)],
                     HORIZONS["key2door"], ("L", "X"), ("left", "right"))


def _grid_move(col, row, a):
    if a == UP:
        row = max(0, row - 1)
    elif a == DOWN:
        row = min(1, row + 1)
    elif a == LEFT:
        col = max(0, col - 1)
    else:
        col = min(N_COLS - 1, col + 1)
    return col, row


@lru_cache(maxsize=None)
def build_frozen_tmaze(variant: str = "train", ice_flip_prob: float = 1.0) -> TabularFMDP:
    """2x7 maze; signal 0 (green) pays at the top-right goal, 1 (purple) at bottom-right.

    ``at_start`` is 1 only in the initial state; the signal bit is observable
    only there. The eval variant makes column 3 icy: entering it flips the row
    with probability ``ice_flip_prob``.
    """
    _check_variant(variant)
    if not 0.0 <= ice_flip_prob <= 1.0:
        raise ValueError("ice_flip_prob must lie in [0, 1]")

    def step(values, a):
        col, row, signal, _ = values
        ncol, nrow = _grid_move(col, row, a)
        outcomes = [(1.0, ncol, nrow)]
        if variant == "eval" and ncol == ICE_COLUMN and (ncol, nrow) != (col, row):
            outcomes = [(ice_flip_prob, ncol, 1 - nrow), (1.0 - ice_flip_prob, ncol, nrow)]
        result = []
        for p, c, r in outcomes:
            if p == 0.0:
                continue
            if c == N_COLS - 1:
                result.append((p, None, 1.0 if r == signal else -1.0))
            else:
                result.append((p, (c, r, signal, 0), STEP_PENALTY))
        return result

    return _assemble(f"frozen_tmaze/{variant}", (N_COLS, 2, 2, 2), 4, step,
                     [((0, 0, 0, 1), 0.5), ((0, 0, 1, 1), 0.5)],
                     HORIZONS["frozen_tmaze"], ("column", "row", "signal", "at_start"), GRID_ACTIONS)


@lru_cache(maxsize=None)
def build_diversion(variant: str = "train") -> TabularFMDP:
    """2x7 grid from top-left to the top-right goal; bottom-right is the red cell.

    The eval variant sends the agent to the bottom row whenever it enters
    column 3 in the top row.
    """
    _check_variant(variant)

    def step(values, a):
        col, row = values
        ncol, nrow = _grid_move(col, row, a)
        if variant == "eval" and (ncol, nrow) == (DIVERSION_COLUMN, 0) and (ncol, nrow) != (col, row):
            nrow = 1
        if ncol == N_COLS - 1:
            return [(1.0, None, 1.0 if nrow == 0 else -1.0)]
        return [(1.0, (ncol, nrow), STEP_PENALTY)]

    return _assemble(f"diversion/{variant}", (N_COLS, 2), 4, step, [((0, 0), 1.0)],
                     HORIZONS["diversion"], ("column", "row"), GRID_ACTIONS)


BUILDERS = {
    "key2door": build_key2door,
    "frozen_tmaze": build_frozen_tmaze,
    "diversion": build_diversion,
}


def build(name: str, variant: str = "train") -> TabularFMDP:
    if name not in BUILDERS:
        raise ValueError(f"unknown env {name!r}")
    return BUILDERS[name](variant)


# ---------------------------------------------------------------------------
# observations

STEP_DIMS = {"key2door": 8, "frozen_tmaze": 15, "diversion": 8}
# (factor index, per-step observation slot) flipped by the representation probe
FLIP_FACTOR = {"key2door": (1, 7), "frozen_tmaze": (2, 14), "diversion": (1, 7)}


def step_encoding(name: str, s: FactoredState) -> np.ndarray:
    """Binary per-step observation of a single state."""
    v = s.values
    out = np.zeros(STEP_DIMS[name])
    if name == "key2door":
        out[v[0]] = 1.0
        out[7] = v[1]
    elif name == "frozen_tmaze":
        col, row, signal, at_start = v
        out[row * N_COLS + col] = 1.0
        out[14] = signal if at_start else 0
    elif name == "diversion":
        out[v[0]] = 1.0
        out[7] = v[1]
    else:
        raise ValueError(f"unknown env {name!r}")
    return out


@lru_cache(maxsize=None)
def _encoding_table(name: str) -> np.ndarray:
    mdp = build(name, "train")
    table = np.zeros((mdp.n_states, STEP_DIMS[name]))
    for i, s in enumerate(mdp.states):
        table[i] = step_encoding(name, s)
    table.setflags(write=False)
    return table


def encoding_table(name: str) -> np.ndarray:
    """Per-step encodings indexed by state index; the sink row is all zeros."""
    return _encoding_table(name)


def obs_dim(spec: EnvSpec) -> int:
    return spec.obs_stack * STEP_DIMS[spec.name]


def encode_observation(spec: EnvSpec, state, history=None) -> np.ndarray:
    """Stack ``history`` (oldest first, ``obs_stack - 1`` per-step encodings) with ``state``."""
    if not isinstance(state, FactoredState):
        state = FactoredState(state)
    n_hist = spec.obs_stack - 1
    dim = STEP_DIMS[spec.name]
    if history is None:
        history = np.zeros((n_hist, dim))
    history = np.asarray(history, dtype=float).reshape(-1, dim) if n_hist else np.zeros((0, dim))
    if history.shape[0] != n_hist:
        raise ValueError(f"history holds {history.shape[0]} frames, expected {n_hist}")
    return np.concatenate([history.ravel(), step_encoding(spec.name, state)])


class FrameStack:
    """Rolling window of per-step encodings; zero-padded at episode start."""

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.table = encoding_table(spec.name)
        self.frames = np.zeros((spec.obs_stack, self.table.shape[1]))

    def reset(self, s: int) -> np.ndarray:
        self.frames[:] = 0.0
        self.frames[-1] = self.table[s]
        return self.frames.ravel().copy()

    def push(self, s: int) -> np.ndarray:
        self.frames[:-1] = self.frames[1:]
        self.frames[-1] = self.table[s]
        return self.frames.ravel().copy()


def flip_observation(spec: EnvSpec, obs: np.ndarray, t: int = 0) -> np.ndarray:
    """Flip the probed factor's bit in every stacked frame that carries it.

    ``t`` is the number of steps taken since reset. In the T-Maze the signal is
    only present in the episode's first frame, which sits ``t`` slots before the
    newest frame (and has scrolled out once ``t >= obs_stack``).
    """
    _, slot = FLIP_FACTOR[spec.name]
    dim = STEP_DIMS[spec.name]
    frames = np.array(obs, dtype=float).reshape(-1, dim)
    if spec.name == "frozen_tmaze":
        pos = spec.obs_stack - 1 - int(t)
        if pos >= 0:
            frames[pos, slot] = 1.0 - frames[pos, slot]
    else:
        occupied = frames.sum(axis=1) > 0  # zero padding stays zero
        frames[occupied, slot] = 1.0 - frames[occupied, slot]
    return frames.ravel()
