"""On-policy trainers (REINFORCE, minimal PPO) with a switchable learning signal.

``signal="q_value"`` scales the score function by the Monte Carlo return-to-go;
``signal="advantage"`` uses the GAE advantage. The value network is trained in
both modes.

Random streams: one ``SeedSequence(seed)`` is split into init, rollout and eval
generators so evaluation never perturbs training. Every environment step draws
three uniforms (reset, action, transition) whether or not it resets.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .envs import EnvSpec, FrameStack, build, encoding_table, obs_dim
from .kernels import FLAG_NONE, FLAG_TERMINAL, FLAG_TRUNCATED, TabularSim
from .neural import (GradientBundle, clip_grad_norm, forward, backward, init_mlp, log_softmax,
                     make_optimizer)

ALGOS = ("reinforce", "ppo")
SIGNALS = ("q_value", "advantage")


@dataclass
class TrainerConfig:
    algo: str = "ppo"
    signal: str = "advantage"
    normalize_advantage: bool = False
    rollout_steps: int = 128
    batch_size: int = 32
    epochs: int = 3
    lr: float = 1e-3
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 1e-2
    clip_range: float = 0.1
    value_coef: float = 1.0
    max_grad_norm: float | None = 0.5
    total_steps: int = 100_000
    eval_interval: int = 5_000
    eval_episodes: int = 100
    eval_greedy: bool = False
    optimizer: str = "adam"
    shared_trunk: bool = False
    init: str = "uniform"
    bootstrap: str = "value_net"
    seed: int = 0

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ValueError(f"algo must be one of {ALGOS}")
        if self.signal not in SIGNALS:
            raise ValueError(f"signal must be one of {SIGNALS}")
        if self.bootstrap not in ("value_net", "zero"):
            raise ValueError("bootstrap must be 'value_net' or 'zero'")
        for name in ("rollout_steps", "batch_size", "epochs", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.total_steps < 0 or self.eval_interval < 1:
            raise ValueError("total_steps must be >= 0 and eval_interval >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    @classmethod
    def defaults(cls, algo: str = "ppo", **overrides) -> "TrainerConfig":
        """PPO uses the full table of defaults; REINFORCE only shares lr, gamma and entropy."""
        if algo == "reinforce":
            base = dict(algo="reinforce", epochs=1, max_grad_norm=None)
        else:
            base = dict(algo="ppo")
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# actor-critic container

class ActorCritic:
    """Policy and value networks (separate by default, or one trunk with two heads)."""

    def __init__(self, n_in: int, n_actions: int, rng: np.random.Generator, shared_trunk=False,
                 optimizer="adam", lr=1e-3, init="uniform"):
        self.n_actions = n_actions
        self.shared = shared_trunk
        if shared_trunk:
            net = init_mlp(n_in, n_actions + 1, rng, scheme=init)
            net.weights[-1][:, :n_actions] *= 0.01
            self.nets = [net]
        else:
            self.nets = [init_mlp(n_in, n_actions, rng, out_scale=0.01, scheme=init),
                         init_mlp(n_in, 1, rng, scheme=init)]
        self.optimizers = [make_optimizer(optimizer, lr) for _ in self.nets]

    @property
    def policy_net(self):
        return self.nets[0]

    def forward(self, obs):
        """Logits (n, A), values (n,) and caches for :meth:`gradients`."""
        if self.shared:
            out, cache = forward(self.nets[0], obs)
            return out[:, :self.n_actions], out[:, self.n_actions], [cache]
        logits, c_pi = forward(self.nets[0], obs)
        values, c_v = forward(self.nets[1], obs)
        return logits, values[:, 0], [c_pi, c_v]

    def probs(self, obs) -> np.ndarray:
        logits, _ = forward(self.nets[0], obs)
        return np.exp(log_softmax(logits[:, :self.n_actions]))

    def values(self, obs) -> np.ndarray:
        if self.shared:
            out, _ = forward(self.nets[0], obs)
            return out[:, self.n_actions]
        out, _ = forward(self.nets[1], obs)
        return out[:, 0]

    def gradients(self, caches, d_logits, d_values) -> list[GradientBundle]:
        if self.shared:
            return [backward(self.nets[0], caches[0], np.concatenate([d_logits, d_values[:, None]], axis=1))]
        return [backward(self.nets[0], caches[0], d_logits), backward(self.nets[1], caches[1], d_values[:, None])]

    def apply(self, grads: list[GradientBundle], max_grad_norm=None) -> float:
        total = float(np.sqrt(sum(g.norm() ** 2 for g in grads)))
        if max_grad_norm is not None and max_grad_norm > 0 and total > max_grad_norm:
            grads = [g.scale(max_grad_norm / (total + 1e-6)) for g in grads]
        for net, opt, g in zip(self.nets, self.optimizers, grads):
            opt.step(net, g)
        return total

    def snapshot(self):
        return [n.copy() for n in self.nets]


# ---------------------------------------------------------------------------
# rollouts

@dataclass
class RolloutBuffer:
    obs: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    flags: np.ndarray  # 0 running, 1 terminal, 2 truncated at the horizon
    log_probs: np.ndarray
    values: np.ndarray
    next_values: np.ndarray  # V(s_{t+1}); 0 after a terminal step
    q_targets: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    gamma: float | None = None

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def dones(self) -> np.ndarray:
        return self.flags == FLAG_TERMINAL

    def finish(self, gamma: float, lam: float) -> "RolloutBuffer":
        self.gamma = gamma
        self.q_targets = compute_q_targets(self, gamma)
        self.advantages = compute_gae(self, gamma, lam)
        self.returns = self.advantages + self.values
        return self


def compute_q_targets(buffer: RolloutBuffer, gamma: float) -> np.ndarray:
    """Discounted return-to-go, bootstrapped with ``next_values`` at truncations."""
    return kernels.discounted_returns(buffer.rewards, buffer.flags, buffer.next_values, gamma)


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float) -> np.ndarray:
    return kernels.gae(buffer.rewards, buffer.values, buffer.next_values, buffer.flags, gamma, lam)


class EnvRunner:
    """Persistent single-environment stepping state shared across rollouts."""

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.mdp = build(spec.name, spec.variant)
        self.sim = TabularSim(self.mdp)
        self.table = encoding_table(spec.name)
        self.tabular = spec.obs_stack == 1
        self.frames = FrameStack(spec)
        self.state = -1
        self.t = 0
        self.obs = None


def _sample(cum, u):
    j = int(np.searchsorted(cum, u, side="right"))
    return min(j, len(cum) - 1)


def collect_rollout(runner: EnvRunner, agent: ActorCritic, steps: int, rng: np.random.Generator,
                    bootstrap: str = "value_net") -> RolloutBuffer:
    """Collect ``steps`` transitions, auto-resetting after terminal or truncated steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    uniforms = rng.random((steps, 3))
    if runner.tabular:
        return _rollout_tabular(runner, agent, uniforms, bootstrap)
    return _rollout_stacked(runner, agent, uniforms, bootstrap)


def _rollout_tabular(runner, agent, uniforms, bootstrap):
    table = runner.table
    probs = agent.probs(table)
    v_table = agent.values(table)
    v_table[runner.mdp.terminal] = 0.0
    states, actions, rewards, nexts, flags, state, t = runner.sim.rollout(
        probs, runner.state, runner.t, uniforms)
    runner.state, runner.t = state, t
    next_values = v_table[nexts]
    boundary = flags == FLAG_TRUNCATED
    boundary[-1] |= flags[-1] == FLAG_NONE
    if bootstrap == "zero":
        next_values = np.where(boundary, 0.0, next_values)
    next_values[flags == FLAG_TERMINAL] = 0.0
    return RolloutBuffer(obs=table[states], states=states, actions=actions, rewards=rewards, flags=flags,
                         log_probs=np.log(probs[states, actions]), values=v_table[states],
                         next_values=next_values)


def _rollout_stacked(runner, agent, uniforms, bootstrap):
    mdp, sim = runner.mdp, runner.sim
    n = len(uniforms)
    obs = np.zeros((n, obs_dim(runner.spec)))
    states = np.zeros(n, dtype=np.int64)
    actions = np.zeros(n, dtype=np.int64)
    rewards = np.zeros(n)
    flags = np.zeros(n, dtype=np.int8)
    log_probs = np.zeros(n)
    boundary_obs = {}
    for i in range(n):
        u = uniforms[i]
        if runner.state < 0:
            runner.state = _sample(sim.init_cum, u[0])
            runner.t = 0
            runner.obs = runner.frames.reset(runner.state)
        s = runner.state
        p = agent.probs(runner.obs)[0]
        a = _sample(np.cumsum(p), u[1])
        ns = _sample(sim.cum_trans[s, a], u[2])
        obs[i], states[i], actions[i] = runner.obs, s, a
        rewards[i] = mdp.reward[s, a]
        log_probs[i] = np.log(p[a])
        runner.t += 1
        if mdp.terminal[ns]:
            flags[i] = FLAG_TERMINAL
            runner.state = -1
        else:
            next_obs = runner.frames.push(ns)
            if runner.t >= mdp.horizon:
                flags[i] = FLAG_TRUNCATED
                boundary_obs[i] = next_obs
                runner.state = -1
            else:
                runner.state, runner.obs = ns, next_obs
    if flags[-1] == FLAG_NONE:
        boundary_obs[n - 1] = runner.obs
    values = agent.values(obs)
    next_values = np.zeros(n)
    next_values[:-1] = values[1:]
    if boundary_obs:
        idx = sorted(boundary_obs)
        next_values[idx] = agent.values(np.stack([boundary_obs[i] for i in idx])) if bootstrap == "value_net" else 0.0
    next_values[flags == FLAG_TERMINAL] = 0.0
    return RolloutBuffer(obs=obs, states=states, actions=actions, rewards=rewards, flags=flags,
                         log_probs=log_probs, values=values, next_values=next_values)


# ---------------------------------------------------------------------------
# losses

def normalize_signal(x: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-std (population std); constant batches become all zeros."""
    centred = x - x.mean()
    std = x.std()
    return centred if std < 1e-8 else centred / std


def learning_signal(buffer: RolloutBuffer, cfg: TrainerConfig) -> np.ndarray:
    return buffer.q_targets if cfg.signal == "q_value" else buffer.advantages


def _entropy_terms(logp):
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1)
    # d(-H)/dz_j = p_j (log p_j + H)
    d_neg_ent = p * (logp + ent[:, None])
    return p, ent, d_neg_ent


def reinforce_update(agent: ActorCritic, buffer: RolloutBuffer, cfg: TrainerConfig) -> dict:
    """One gradient step on -mean(log pi * signal) - c_ent * H plus the value regression."""
    signal = learning_signal(buffer, cfg)
    if cfg.normalize_advantage:
        signal = normalize_signal(signal)
    n = len(buffer)
    logits, values, caches = agent.forward(buffer.obs)
    logp = log_softmax(logits)
    p, ent, d_neg_ent = _entropy_terms(logp)
    onehot = np.eye(agent.n_actions)[buffer.actions]
    d_logits = ((p - onehot) * signal[:, None] + cfg.entropy_coef * d_neg_ent) / n
    d_values = 2.0 * cfg.value_coef * (values - buffer.returns) / n
    grad_norm = agent.apply(agent.gradients(caches, d_logits, d_values), cfg.max_grad_norm)
    return {
        "policy_loss": float(-(logp[np.arange(n), buffer.actions] * signal).mean()),
        "value_loss": float(((values - buffer.returns) ** 2).mean()),
        "entropy": float(ent.mean()),
        "grad_norm": grad_norm,
    }


def ppo_minibatch_grads(agent: ActorCritic, buffer: RolloutBuffer, idx: np.ndarray, signal: np.ndarray,
                        cfg: TrainerConfig):
    """Gradients of the clipped surrogate + value + entropy loss on one minibatch."""
    n = len(idx)
    logits, values, caches = agent.forward(buffer.obs[idx])
    logp_all = log_softmax(logits)
    p, ent, d_neg_ent = _entropy_terms(logp_all)
    acts = buffer.actions[idx]
    logp = logp_all[np.arange(n), acts]
    ratio = np.exp(logp - buffer.log_probs[idx])
    clipped = np.clip(ratio, 1.0 - cfg.clip_range, 1.0 + cfg.clip_range)
    unclipped_term = ratio * signal
    use_unclipped = unclipped_term <= clipped * signal
    surrogate = np.where(use_unclipped, unclipped_term, clipped * signal)
    # d(-surrogate)/d logp = -ratio * signal on the active unclipped branch, 0 otherwise
    coef = np.where(use_unclipped, unclipped_term, 0.0)
    onehot = np.eye(agent.n_actions)[acts]
    d_logits = (-coef[:, None] * (onehot - p) + cfg.entropy_coef * d_neg_ent) / n
    returns = buffer.returns[idx]
    d_values = 2.0 * cfg.value_coef * (values - returns) / n
    stats = {
        "policy_loss": float(-surrogate.mean()),
        "value_loss": float(((values - returns) ** 2).mean()),
        "entropy": float(ent.mean()),
        "clip_fraction": float((np.abs(ratio - 1.0) > cfg.clip_range).mean()),
        "approx_kl": float(((ratio - 1.0) - np.log(ratio)).mean()),
    }
    return agent.gradients(caches, d_logits, d_values), stats


def ppo_update(agent: ActorCritic, buffer: RolloutBuffer, cfg: TrainerConfig,
               rng: np.random.Generator) -> dict:
    n = len(buffer)
    if cfg.batch_size > n:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds rollout length {n}")
    signal_all = learning_signal(buffer, cfg)
    totals: dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            signal = signal_all[idx]
            if cfg.normalize_advantage:
                signal = normalize_signal(signal)
            grads, stats = ppo_minibatch_grads(agent, buffer, idx, signal, cfg)
            stats["grad_norm"] = agent.apply(grads, cfg.max_grad_norm)
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            count += 1
    return {k: v / count for k, v in totals.items()}


# ---------------------------------------------------------------------------
# evaluation

def policy_table(agent: ActorCritic, name: str, greedy: bool = False) -> np.ndarray:
    probs = agent.probs(encoding_table(name))
    if greedy:
        probs = np.eye(probs.shape[1])[np.argmax(probs, axis=1)]
    return probs


def run_policy_episodes(agent: ActorCritic, spec: EnvSpec, n_episodes: int, rng: np.random.Generator,
                        greedy: bool = False, record=None):
    """Undiscounted returns of ``n_episodes`` run in lockstep.

    ``record(t, states, obs, active)`` is called before each action when given.
    """
    mdp = build(spec.name, spec.variant)
    sim = TabularSim(mdp)
    if spec.obs_stack == 1 and record is None:
        returns, _, _ = sim.episodes(policy_table(agent, spec.name, greedy), n_episodes, rng)
        return returns
    table = encoding_table(spec.name)
    dim = table.shape[1]
    H = mdp.horizon
    u = rng.random((n_episodes, 1 + 2 * H))
    states = np.array([_sample(sim.init_cum, x) for x in u[:, 0]])
    frames = np.zeros((n_episodes, spec.obs_stack, dim))
    frames[:, -1] = table[states]
    returns = np.zeros(n_episodes)
    active = np.ones(n_episodes, dtype=bool)
    for t in range(H):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        obs = frames[idx].reshape(idx.size, -1)
        if record is not None:
            record(t, states[idx], obs, idx)
        p = agent.probs(obs)
        if greedy:
            p = np.eye(p.shape[1])[np.argmax(p, axis=1)]
        cum = np.cumsum(p, axis=1)
        acts = np.minimum((u[idx, 1 + 2 * t][:, None] >= cum).sum(axis=1), p.shape[1] - 1)
        for j, a in zip(idx, acts):
            s = states[j]
            ns = _sample(sim.cum_trans[s, a], u[j, 2 + 2 * t])
            returns[j] += mdp.reward[s, a]
            if mdp.terminal[ns]:
                active[j] = False
            states[j] = ns
        frames[idx, :-1] = frames[idx, 1:]
        frames[idx, -1] = table[states[idx]]
    return returns


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    se = x.std(ddof=1) / np.sqrt(len(x)) if len(x) > 1 else 0.0
    return float(x.mean()), float(se)


# ---------------------------------------------------------------------------
# training loop

CURVE_COLUMNS = ("step", "train_return_mean", "train_return_se", "eval_return_mean", "eval_return_se")


@dataclass
class TrainingRun:
    env: EnvSpec
    config: TrainerConfig
    curve: list = field(default_factory=list)  # rows matching CURVE_COLUMNS
    agent: ActorCritic | None = None
    snapshots: dict = field(default_factory=dict)  # nominal step -> list of MlpParams
    stats: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = [f"# env={self.env.name}", f"# obs_stack={self.env.obs_stack}",
                 f"# config={json.dumps(self.config.to_dict(), sort_keys=True)}",
                 ",".join(CURVE_COLUMNS)]
        for row in self.curve:
            lines.append(f"{row[0]:d}," + ",".join(f"{v:.6f}" for v in row[1:]))
        return "\n".join(lines) + "\n"

    def final(self, column: str = "eval_return_mean") -> float:
        return self.curve[-1][CURVE_COLUMNS.index(column)] if self.curve else float("nan")


def evaluate(agent, env: EnvSpec, cfg: TrainerConfig, rng) -> tuple[float, float, float, float]:
    train = run_policy_episodes(agent, env.with_variant("train"), cfg.eval_episodes, rng, cfg.eval_greedy)
    ev = run_policy_episodes(agent, env.with_variant("eval"), cfg.eval_episodes, rng, cfg.eval_greedy)
    return (*_mean_se(train), *_mean_se(ev))


def train(env: EnvSpec, cfg: TrainerConfig, snapshot_steps=()) -> TrainingRun:
    """Train for ``cfg.total_steps`` steps, evaluating every ``cfg.eval_interval`` steps."""
    env = env.with_variant("train")
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_rng, roll_rng, eval_rng = (np.random.default_rng(s) for s in seeds)
    runner = EnvRunner(env)
    agent = ActorCritic(obs_dim(env), runner.mdp.n_actions, init_rng, cfg.shared_trunk, cfg.optimizer, cfg.lr,
                         cfg.init)
    run = TrainingRun(env=env, config=cfg, agent=agent)
    if cfg.total_steps == 0:
        return run
    pending = sorted(int(s) for s in snapshot_steps)
    run.curve.append((0, *evaluate(agent, env, cfg, eval_rng)))
    steps = 0
    next_eval = cfg.eval_interval
    while steps < cfg.total_steps:
        buffer = collect_rollout(runner, agent, cfg.rollout_steps, roll_rng, cfg.bootstrap)
        buffer.finish(cfg.gamma, cfg.gae_lambda)
        if cfg.algo == "ppo":
            stats = ppo_update(agent, buffer, cfg, roll_rng)
        else:
            stats = reinforce_update(agent, buffer, cfg)
        steps += len(buffer)
        run.stats.append(stats)
        while pending and steps >= pending[0]:
            run.snapshots[pending.pop(0)] = agent.snapshot()
        if steps >= next_eval or steps >= cfg.total_steps:
            run.curve.append((steps, *evaluate(agent, env, cfg, eval_rng)))
            while next_eval <= steps:
                next_eval += cfg.eval_interval
    return run


def agent_from_snapshot(snapshot, n_actions: int) -> ActorCritic:
    """Wrap stored networks in an ActorCritic usable for probing."""
    agent = ActorCritic.__new__(ActorCritic)
    agent.n_actions = n_actions
    agent.shared = len(snapshot) == 1
    agent.nets = [n.copy() for n in snapshot]
    agent.optimizers = []
    return agent


# ---------------------------------------------------------------------------
# exact gradients of a tabular softmax policy

def tabular_softmax(theta: np.ndarray):
    from .fmdp import PolicyTable

    return PolicyTable(np.exp(log_softmax(theta)))


def discounted_occupancy(mdp, policy, gamma: float, horizon: int | None = None) -> np.ndarray:
    """Sum over t of gamma^t P(s_t = s), truncated at the horizon; terminal mass removed."""
    P = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    live = (~mdp.terminal).astype(float)
    mass = mdp.initial_dist * live
    occ = np.zeros(mdp.n_states)
    disc = 1.0
    for _ in range(horizon or 10 * mdp.horizon):
        occ += disc * mass
        mass = (mass @ P) * live
        disc *= gamma
    return occ


def exact_policy_gradient(mdp, theta: np.ndarray, gamma: float, signal: str = "q_value",
                          tol: float = 1e-13) -> np.ndarray:
    """Exact gradient of the start-state value for a tabular softmax policy.

    ``signal="advantage"`` replaces Q(s,a) by Q(s,a) - V(s) inside the expectation.
    """
    from .exact import policy_evaluation

    policy = tabular_softmax(theta)
    values = policy_evaluation(mdp, policy, gamma, tol)
    occ = discounted_occupancy(mdp, policy, gamma)
    psi = values.q if signal == "q_value" else values.q - values.v[:, None]
    pi = policy.probs
    # d/dtheta[s,b] sum_a pi(a|s) psi(s,a) log pi(a|s) = pi(b|s) (psi(s,b) - sum_a pi(a|s) psi(s,a))
    inner = pi * (psi - (pi * psi).sum(axis=1, keepdims=True))
    return occ[:, None] * inner


def sampled_gradient_traces(mdp, policy, gamma: float, n_batches: int = 2000, batch_size: int = 32,
                            seed: int = 0, tol: float = 1e-12) -> dict:
    """Trace of the covariance of minibatch score-function gradients for Q and A signals.

    Pairs are drawn from the episodic visitation distribution and the policy;
    both signals see the same samples.
    """
    from .exact import policy_evaluation, visitation_exact

    values = policy_evaluation(mdp, policy, gamma, tol)
    d = visitation_exact(mdp, policy).d
    rng = np.random.default_rng(seed)
    S, A = policy.probs.shape
    s = rng.choice(S, size=(n_batches, batch_size), p=d)
    cum = np.cumsum(policy.probs, axis=1)
    u = rng.random((n_batches, batch_size))
    a = np.minimum((u[..., None] >= cum[s]).sum(axis=-1), A - 1)
    score = np.eye(A)[a] - policy.probs[s]  # gradient of log pi wrt the logits of row s
    out = {}
    for name, psi in (("q_value", values.q), ("advantage", values.q - values.v[:, None])):
        per_sample = score * psi[s, a][..., None]
        g = np.zeros((n_batches, S, A))
        for b in range(batch_size):
            np.add.at(g, (np.arange(n_batches), s[:, b]), per_sample[:, b] / batch_size)
        flat = g.reshape(n_batches, -1)
        out[name] = float(np.trace(np.cov(flat, rowvar=False)))
    return out
