import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advlab.analysis import (KL_DIRECTION, KlHeatmap, aggregate_curves, curve_rows, kl_divergence, kl_heatmap,
                             kl_rows, long_csv, mean_heatmap, probe_cells, probe_factor_flip, svg_curves,
                             svg_heatmap)
from advlab.envs import EnvSpec
from advlab.trainers import ActorCritic, TrainerConfig, train

dists = st.integers(2, 6).flatmap(
    lambda n: st.tuples(*[st.lists(st.floats(0.01, 1.0), min_size=n, max_size=n)] * 2))


@given(dists)
def test_kl_is_nonnegative_and_zero_on_equal(pq):
    p, q = (np.array(x) / sum(x) for x in pq)
    assert kl_divergence(p, q) >= -1e-12
    assert kl_divergence(p, p) == 0.0
    assert kl_rows(p[None], q[None])[0] == pytest.approx(kl_divergence(p, q))


def test_kl_hand_value_and_errors():
    assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.5 * np.log(2) + 0.5 * np.log(2 / 3))
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2))
    for p, q in (([1.0], [0.5, 0.5]), ([0.5, 0.5], [1.0, 0.0]), ([-0.1, 1.1], [0.5, 0.5])):
        with pytest.raises(ValueError):
            kl_divergence(p, q)


class FixedAgent:
    """Policy that reads one observation coordinate; KL under a flip of that bit is known."""

    n_actions = 2

    def __init__(self, coord, strength):
        self.coord, self.strength = coord, strength

    def probs(self, obs):
        obs = np.atleast_2d(obs)
        z = self.strength * obs[:, self.coord]
        p1 = 1 / (1 + np.exp(-z))
        return np.stack([1 - p1, p1], axis=1)


def test_probe_on_key2door_recovers_known_kl():
    agent = FixedAgent(coord=7, strength=2.0)  # depends only on the key bit
    probe = probe_factor_flip(agent, EnvSpec("key2door"), "X", n_episodes=30, seed=0)
    p = np.array([0.5, 0.5])
    q = np.array([1 - 1 / (1 + np.exp(-2.0)), 1 / (1 + np.exp(-2.0))])
    # each visit contributes KL(p||q) without the key or KL(q||p) with it
    lo, hi = sorted((kl_divergence(p, q), kl_divergence(q, p)))
    assert set(probe) <= set(probe_cells("key2door")) and 1 in probe
    for kl, n in probe.values():
        assert n > 0 and lo - 1e-12 <= kl <= hi + 1e-12
    assert probe[1][0] == pytest.approx(kl_divergence(q, p))  # the key cell is only seen holding the key
    blind = probe_factor_flip(FixedAgent(coord=3, strength=2.0), EnvSpec("key2door"), n_episodes=10)
    assert all(kl == 0.0 for kl, _ in blind.values())


def test_probe_rejects_wrong_factor():
    with pytest.raises(ValueError):
        probe_factor_flip(FixedAgent(0, 1.0), EnvSpec("diversion"), "X")


def test_tmaze_probe_only_moves_signal_reader():
    signal_slot = 29 * 15 + 14  # newest frame's signal bit at the start cell
    probe = probe_factor_flip(FixedAgent(signal_slot, 3.0), EnvSpec("frozen_tmaze"), n_episodes=20)
    assert probe[(0, 0)][0] > 0
    assert all(kl == 0.0 for cell, (kl, _) in probe.items() if cell != (0, 0))


def test_heatmap_from_snapshots_and_mean():
    run = train(EnvSpec("diversion"), TrainerConfig(total_steps=256, eval_interval=256, eval_episodes=2),
                snapshot_steps=(128, 256))
    hm = kl_heatmap(run.snapshots, EnvSpec("diversion"), 4, n_episodes=10)
    assert hm.steps == [128, 256] and hm.cells == list(range(6)) and hm.direction == KL_DIRECTION
    assert np.nanmin(hm.values) >= 0 and hm.counts.sum() > 0
    other = KlHeatmap(hm.env, hm.factor, hm.cells, hm.steps, np.full_like(hm.values, np.nan), hm.counts * 0)
    avg = mean_heatmap([hm, other])
    np.testing.assert_array_equal(np.isnan(avg.values), np.isnan(hm.values))
    np.testing.assert_allclose(np.nan_to_num(avg.values), np.nan_to_num(hm.values))
    assert len(hm.rows("cfg", 0)) == 12
    assert svg_heatmap(hm, "t").startswith("<svg")


def test_aggregate_curves_statistics():
    runs = [[(0, 0.0, 0, 1.0, 0), (10, 1.0, 0, 2.0, 0)], [(0, 2.0, 0, 3.0, 0), (10, 3.0, 0, 4.0, 0)]]
    b = aggregate_curves(runs)
    np.testing.assert_allclose(b.mean("eval_return_mean"), [2.0, 3.0])
    np.testing.assert_allclose(b.se("eval_return_mean"), [1.0, 1.0])  # std(ddof=1) = sqrt(2), / sqrt(2)
    assert b.final("train_return_mean") == 2.0
    with pytest.raises(ValueError):
        aggregate_curves(runs[:1])
    with pytest.raises(ValueError):
        aggregate_curves([runs[0], [(0, 0, 0, 0, 0), (20, 0, 0, 0, 0)]])
    rows = curve_rows(b, "c")
    assert ("c", "mean", 10, "eval_return_mean", 3.0) in rows
    text = long_csv(rows, {"a": 1})
    assert text.splitlines()[:2] == ["# a=1", "config,seed,step,cell,value"]
    assert svg_curves({"x": (b.steps, b.mean("eval_return_mean"), b.se("eval_return_mean"))}).startswith("<svg")


def test_untrained_agent_probe_is_small():
    rng = np.random.default_rng(0)
    agent = ActorCritic(8, 2, rng)
    probe = probe_factor_flip(agent, EnvSpec("key2door"), n_episodes=10)
    assert all(kl < 1e-3 for kl, _ in probe.values())
