"""Representation probes and multi-seed curve statistics.

KL divergences are reported as KL(original || flipped) in nats.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from .envs import EnvSpec, build, flip_observation
from .trainers import CURVE_COLUMNS, agent_from_snapshot, run_policy_episodes

KL_DIRECTION = "KL(original||flipped)"


def kl_divergence(p, q) -> float:
    """sum_i p_i ln(p_i / q_i); raises if q has a zero where p has mass."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("probabilities must be non-negative")
    support = p > 0
    if np.any(q[support] == 0):
        raise ValueError("q has zero mass where p is positive")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL for strictly positive batches (softmax outputs)."""
    if np.any(q <= 0) or np.any(p <= 0):
        raise ValueError("row-wise KL expects strictly positive distributions")
    return np.sum(p * (np.log(p) - np.log(q)), axis=1)


# ---------------------------------------------------------------------------
# factor-flip probes

def probe_cells(name: str) -> list:
    """Cell labels of the heatmap: locations 1..6, T-Maze (column,row) cells, or columns."""
    if name == "key2door":
        return list(range(1, 7))
    if name == "frozen_tmaze":
        return [(c, r) for r in range(2) for c in range(6)]
    if name == "diversion":
        return list(range(6))
    raise ValueError(f"unknown env {name!r}")


def cell_of(name: str, values: tuple):
    if name == "key2door":
        return values[0]
    if name == "frozen_tmaze":
        return (values[0], values[1])
    return values[0]


def flippable_factor(name: str) -> str:
    return {"key2door": "X", "frozen_tmaze": "signal", "diversion": "row"}[name]


@dataclass
class KlHeatmap:
    env: str
    factor: str
    cells: list
    steps: list
    values: np.ndarray  # (len(cells), len(steps)) mean KL in nats; nan where never visited
    counts: np.ndarray  # visits contributing to each entry
    direction: str = KL_DIRECTION

    def at(self, cell, step) -> float:
        return float(self.values[self.cells.index(cell), self.steps.index(step)])

    def rows(self, config: str = "", seed="") -> list:
        out = []
        for j, step in enumerate(self.steps):
            for i, cell in enumerate(self.cells):
                out.append((config, seed, step, _cell_label(cell), self.values[i, j]))
        return out


def _cell_label(cell) -> str:
    return "-".join(str(c) for c in cell) if isinstance(cell, tuple) else str(cell)


def probe_factor_flip(agent, env: EnvSpec, factor: str | None = None, n_episodes: int = 100,
                      seed: int = 0, greedy: bool = False) -> dict:
    """Per-cell mean KL between the policy on visited observations and on their flipped copies.

    Episodes run in the train variant with the agent's stochastic policy.
    Returns ``{cell: (mean_kl, count)}`` for visited cells only.
    """
    expected = flippable_factor(env.name)
    if factor is not None and factor != expected:
        raise ValueError(f"factor {factor!r} is not flippable in {env.name}; use {expected!r}")
    env = env.with_variant("train")
    mdp_states = _states(env)
    sums: dict = {}
    counts: dict = {}

    def record(t, states, obs, _idx):
        flipped = np.stack([flip_observation(env, o, t) for o in obs])
        kl = kl_rows(agent.probs(obs), agent.probs(flipped))
        for s, k in zip(states, kl):
            cell = cell_of(env.name, mdp_states[s].values)
            sums[cell] = sums.get(cell, 0.0) + float(k)
            counts[cell] = counts.get(cell, 0) + 1

    run_policy_episodes(agent, env, n_episodes, np.random.default_rng(seed), greedy, record=record)
    return {c: (sums[c] / counts[c], counts[c]) for c in sums}


def _states(env: EnvSpec):
    return build(env.name, env.variant).states


def kl_heatmap(snapshots: dict, env: EnvSpec, n_actions: int, n_episodes: int = 100, seed: int = 0) -> KlHeatmap:
    """Probe each checkpoint in ``snapshots`` (step -> stored networks)."""
    cells = probe_cells(env.name)
    steps = sorted(snapshots)
    values = np.full((len(cells), len(steps)), np.nan)
    counts = np.zeros((len(cells), len(steps)), dtype=np.int64)
    for j, step in enumerate(steps):
        agent = agent_from_snapshot(snapshots[step], n_actions)
        for cell, (kl, n) in probe_factor_flip(agent, env, None, n_episodes, seed).items():
            if cell in cells:
                i = cells.index(cell)
                values[i, j], counts[i, j] = kl, n
    return KlHeatmap(env.name, flippable_factor(env.name), cells, steps, values, counts)


def mean_heatmap(maps: list[KlHeatmap]) -> KlHeatmap:
    """Seed average, ignoring seeds that never visited a cell."""
    if not maps:
        raise ValueError("no heatmaps to average")
    first = maps[0]
    for m in maps[1:]:
        if m.cells != first.cells or m.steps != first.steps:
            raise ValueError("heatmaps are not aligned")
    stack = np.stack([m.values for m in maps])
    with np.errstate(invalid="ignore"):
        visited = ~np.isnan(stack)
        total = np.where(visited, stack, 0.0).sum(axis=0)
        n = visited.sum(axis=0)
        values = np.where(n > 0, total / np.maximum(n, 1), np.nan)
    counts = np.stack([m.counts for m in maps]).sum(axis=0)
    return KlHeatmap(first.env, first.factor, first.cells, first.steps, values, counts, first.direction)


# ---------------------------------------------------------------------------
# curves

@dataclass
class CurveBundle:
    steps: np.ndarray
    columns: tuple
    per_seed: dict = field(default_factory=dict)  # column -> (n_seeds, n_steps)
    seeds: tuple = ()

    def mean(self, column: str) -> np.ndarray:
        return self.per_seed[column].mean(axis=0)

    def se(self, column: str) -> np.ndarray:
        x = self.per_seed[column]
        return x.std(axis=0, ddof=1) / np.sqrt(x.shape[0])

    def final(self, column: str) -> float:
        return float(self.mean(column)[-1])


def aggregate_curves(runs, columns=("train_return_mean", "eval_return_mean"), seeds=None) -> CurveBundle:
    """Mean and standard error across runs; every run must share the same checkpoints.

    ``runs`` holds TrainingRun objects or plain sequences of curve rows.
    """
    curves = [np.asarray(getattr(r, "curve", r), dtype=float) for r in runs]
    if len(curves) < 2:
        raise ValueError("aggregate_curves needs at least two runs")
    steps = curves[0][:, 0]
    for c in curves[1:]:
        if c.shape != curves[0].shape or not np.array_equal(c[:, 0], steps):
            raise ValueError("runs have misaligned checkpoints")
    per_seed = {col: np.stack([c[:, CURVE_COLUMNS.index(col)] for c in curves]) for col in columns}
    seeds = tuple(seeds) if seeds is not None else tuple(range(len(curves)))
    return CurveBundle(steps.astype(np.int64), tuple(columns), per_seed, seeds)


def curve_rows(bundle: CurveBundle, config: str) -> list:
    """Long-format rows (config, seed, step, cell, value); seed 'mean'/'se' rows hold aggregates."""
    out = []
    for col in bundle.columns:
        for i, seed in enumerate(bundle.seeds):
            out += [(config, seed, int(s), col, v) for s, v in zip(bundle.steps, bundle.per_seed[col][i])]
        out += [(config, "mean", int(s), col, v) for s, v in zip(bundle.steps, bundle.mean(col))]
        out += [(config, "se", int(s), col, v) for s, v in zip(bundle.steps, bundle.se(col))]
    return out


def long_csv(rows, header: dict | None = None) -> str:
    buf = io.StringIO()
    for k, v in (header or {}).items():
        buf.write(f"# {k}={v}\n")
    buf.write("config,seed,step,cell,value\n")
    for config, seed, step, cell, value in rows:
        buf.write(f"{config},{seed},{step},{cell},{_fmt(value)}\n")
    return buf.getvalue()


def _fmt(v) -> str:
    v = float(v)
    return "nan" if np.isnan(v) else f"{v:.6f}"


# ---------------------------------------------------------------------------
# minimal SVG output

_PALETTE = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02")


def svg_curves(series: dict, title: str = "", width: int = 480, height: int = 300) -> str:
    """Line plot with shaded SE bands; ``series`` maps label -> (steps, mean, se)."""
    pad = 40
    xs = np.concatenate([np.asarray(s[0], float) for s in series.values()])
    lo = min(float(np.min(m - e)) for _, m, e in series.values())
    hi = max(float(np.max(m + e)) for _, m, e in series.values())
    x0, x1 = float(xs.min()), float(xs.max()) or 1.0
    hi = hi if hi > lo else lo + 1.0

    def px(x):
        return pad + (x - x0) / ((x1 - x0) or 1.0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - lo) / (hi - lo) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{width / 2}" y="16" text-anchor="middle" font-size="12">{escape(title)}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="4" y="{py(hi):.1f}" font-size="10">{hi:.2f}</text>',
             f'<text x="4" y="{py(lo):.1f}" font-size="10">{lo:.2f}</text>']
    for k, (label, (steps, mean, se)) in enumerate(series.items()):
        colour = _PALETTE[k % len(_PALETTE)]
        steps, mean, se = (np.asarray(a, float) for a in (steps, mean, se))
        upper = [f"{px(x):.1f},{py(y):.1f}" for x, y in zip(steps, mean + se)]
        lower = [f"{px(x):.1f},{py(y):.1f}" for x, y in zip(steps[::-1], (mean - se)[::-1])]
        parts.append(f'<polygon points="{" ".join(upper + lower)}" fill="{colour}" opacity="0.2"/>')
        line = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(steps, mean))
        parts.append(f'<polyline points="{line}" fill="none" stroke="{colour}"/>')
        parts.append(f'<text x="{width - pad + 2}" y="{pad + 12 * k}" font-size="10" fill="{colour}">'
                     f'{escape(str(label))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def svg_heatmap(heatmap: KlHeatmap, title: str = "", cell_px: int = 36) -> str:
    """Rows are checkpoints, columns are probe cells; darker means larger KL."""
    vals = heatmap.values.T
    finite = vals[np.isfinite(vals)]
    vmax = float(finite.max()) if finite.size and finite.max() > 0 else 1.0
    n_rows, n_cols = vals.shape
    left, top = 60, 24
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + n_cols * cell_px + 10}" '
             f'height="{top + n_rows * cell_px + 24}">',
             f'<text x="4" y="14" font-size="12">{escape(title)}</text>']
    for r in range(n_rows):
        parts.append(f'<text x="4" y="{top + r * cell_px + cell_px / 2:.0f}" font-size="10">'
                     f'{heatmap.steps[r]}</text>')
        for c in range(n_cols):
            v = vals[r, c]
            shade = 255 if not np.isfinite(v) else int(255 * (1.0 - v / vmax))
            parts.append(f'<rect x="{left + c * cell_px}" y="{top + r * cell_px}" width="{cell_px}" '
                         f'height="{cell_px}" fill="rgb(255,{shade},{shade})" stroke="grey"/>')
    for c, cell in enumerate(heatmap.cells):
        parts.append(f'<text x="{left + c * cell_px + 4}" y="{top + n_rows * cell_px + 14}" font-size="10">'
                     f'{escape(_cell_label(cell))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
