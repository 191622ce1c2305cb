"""The acceptance suite: one function per criterion, each returning a :class:`Check`.

The exact-solver criteria run in seconds. The training criteria share one job
store, so running them together trains each (env, config, seed) only once.
"""
from __future__ import annotations

import io
import itertools
import tempfile
from pathlib import Path

import numpy as np

from . import exact, table1 as t1
from .envs import ENV_NAMES, EnvSpec, build, obs_dim
from .experiments import (Check, ExperimentConfig, output_root, run_experiment)
from .fmdp import PolicyTable, StateRepresentation
from .neural import backward, forward, init_mlp, log_softmax
from .trainers import exact_policy_gradient, sampled_gradient_traces

GAMMA = 0.99
THEOREM_TOL = 1e-10
COROLLARY_TOL = 1e-10
SPREAD_TOL = 1e-12
GRAD_REL_TOL = 1e-4


# ---------------------------------------------------------------------------
# exact-solver criteria

def table1_report(gamma=None, header=None) -> tuple[Check, str]:
    result = t1.calibrated_table1() if gamma is None else t1.table1(gamma)
    errs = t1.max_errors(result)
    verdicts = result.verdicts()
    detail = (f"gamma={result.gamma} max|err| Q={errs['q']:.4f} (<=1e-3) A={errs['a']:.4f} (<=2e-2) "
              f"P={errs['p']:.4f} (<=1e-2); {len(result.rows) * len(t1.COLUMNS)} cells")
    return Check("table1", all(verdicts.values()), detail), result.to_csv(header)


def _epsilon_greedy(greedy: PolicyTable, eps: float) -> PolicyTable:
    n_actions = greedy.n_actions
    return PolicyTable((1.0 - eps) * greedy.probs + eps / n_actions)


def _random_phi(rng, n_factors: int) -> StateRepresentation:
    return StateRepresentation(tuple(int(i) for i in np.flatnonzero(rng.random(n_factors) < 0.5)))


def theorem1_residuals(env: str, n_pairs: int = 100, seed: int = 0) -> dict:
    """Max |A_phi - (1 - P)(Q - Q~)| over visited pairs of random (eps-greedy policy, phi) draws."""
    mdp = build(env, "train")
    _, greedy = exact.optimal_values(mdp, GAMMA)
    rng = np.random.default_rng(seed)
    worst, pairs, skipped = 0.0, 0, 0
    for _ in range(n_pairs):
        pi = _epsilon_greedy(greedy, float(rng.uniform(0.05, 0.95)))
        phi = _random_phi(rng, mdp.n_factors)
        values = exact.policy_evaluation(mdp, pi, GAMMA)
        dist = exact.visitation_exact(mdp, pi)
        for s in np.flatnonzero(dist.d > 0):
            for a in range(mdp.n_actions):
                dec = exact.advantage_under_phi(values, dist, phi, s, a, pi)
                if dec.degenerate:
                    skipped += 1
                    continue
                worst = max(worst, exact.theorem1_decompose(dec))
                pairs += 1
    return {"max_residual": worst, "pairs": pairs, "degenerate": skipped}


def check_theorem1(n_pairs: int = 100) -> tuple[Check, list]:
    rows, worst = [], 0.0
    for i, env in enumerate(ENV_NAMES):
        r = theorem1_residuals(env, n_pairs, seed=i)
        rows.append(("theorem1", env, r["max_residual"], r["pairs"]))
        worst = max(worst, r["max_residual"])
    detail = " ".join(f"{env}={res:.1e}/{n}" for _, env, res, n in rows) + f" (<= {THEOREM_TOL:g})"
    return Check("theorem1 identity", worst <= THEOREM_TOL, detail), rows


def _class_constant_policy(mdp, phi: StateRepresentation, rng) -> PolicyTable:
    keys = mdp.class_keys(phi)
    logits = {k: rng.normal(scale=2.0, size=mdp.n_actions) for k in dict.fromkeys(keys)}
    probs = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
    for i, k in enumerate(keys):
        probs[i] = np.exp(log_softmax(logits[k]))
    return PolicyTable(probs)


def lemma_corollary(env: str, policies_per_phi: int = 3, seed: int = 0) -> dict:
    """Value spread within classes and corollary residuals for every Markov phi."""
    mdp = build(env, "train")
    rng = np.random.default_rng(seed)
    spread, residual, markov = 0.0, 0.0, []
    for r in range(mdp.n_factors + 1):
        for kept in itertools.combinations(range(mdp.n_factors), r):
            phi = StateRepresentation(kept)
            if not exact.markov_check(mdp, phi).is_markov:
                continue
            markov.append(kept)
            for _ in range(policies_per_phi):
                pi = _class_constant_policy(mdp, phi, rng)
                values = exact.policy_evaluation(mdp, pi, GAMMA)
                dist = exact.visitation_exact(mdp, pi)
                for members in mdp.partition(phi).values():
                    spread = max(spread, float(np.ptp(values.v[members])),
                                 float(np.ptp(values.q[members], axis=0).max()))
                for s in np.flatnonzero(dist.d > 0):
                    for a in range(mdp.n_actions):
                        residual = max(residual, exact.corollary_decompose(values, dist, phi, s, a, pi))
    return {"spread": spread, "residual": residual, "markov_phis": markov}


def check_lemma_corollary() -> tuple[Check, list]:
    rows, ok = [], True
    for i, env in enumerate(ENV_NAMES):
        r = lemma_corollary(env, seed=i)
        rows.append(("lemma_corollary", env, r["spread"], r["residual"], len(r["markov_phis"])))
        ok &= r["spread"] <= SPREAD_TOL and r["residual"] <= COROLLARY_TOL
    detail = " ".join(f"{env}: spread={sp:.1e} resid={res:.1e} markov_phis={n}" for _, env, sp, res, n in rows)
    return Check("lemma1 + corollary", ok, detail + f" (<= {SPREAD_TOL:g} / {COROLLARY_TOL:g})"), rows


def check_confounding(n_random: int = 5, seed: int = 0) -> tuple[Check, list]:
    mdp = build("key2door", "train")
    _, greedy = exact.optimal_values(mdp, GAMMA)
    report = exact.confounding_check(mdp, greedy, t1.LOCATION_ONLY)
    witness = next((w for w in report.witnesses
                    if w.class_key == (6,) and w.action == 1 and w.kind == "reward"), None)
    found = witness is not None and abs(witness.on_policy - 1.0) < 1e-12
    rng = np.random.default_rng(seed)
    identity_flags = 0
    for env in ENV_NAMES:
        m = build(env, "train")
        _, g = exact.optimal_values(m, GAMMA)
        policies = [g] + [PolicyTable(rng.dirichlet(np.ones(m.n_actions), size=m.n_states))
                          for _ in range(n_random)]
        for pi in policies:
            identity_flags += exact.confounding_check(m, pi, StateRepresentation.identity(m.n_factors)).confounded
    detail = (f"witness (L=6,right) on-policy R={witness.on_policy:+.3f} do(L=6) R={witness.intervened:+.3f}; "
              if witness else "no (L=6,right) witness; ") + f"identity flagged {identity_flags}x"
    rows = [("confounding", "key2door", float(found), identity_flags)]
    return Check("confounding witness", found and identity_flags == 0, detail), rows


def theory_report(header=None) -> tuple[list, str]:
    checks, rows = [], []
    for fn in (check_theorem1, check_lemma_corollary, check_confounding):
        c, r = fn()
        checks.append(c)
        rows += r
    buf = io.StringIO()
    for k, v in (header or {}).items():
        buf.write(f"# {k}={v}\n")
    buf.write("check,env,metric_1,metric_2,metric_3\n")
    for row in rows:
        vals = [f"{v:.3e}" if isinstance(v, float) else str(v) for v in row[2:]]
        vals += [""] * (3 - len(vals))
        buf.write(f"{row[0]},{row[1]}," + ",".join(vals) + "\n")
    buf.write("# verdicts: " + " ".join(f"{c.name}={'pass' if c.passed else 'fail'}" for c in checks) + "\n")
    return checks, buf.getvalue()


# ---------------------------------------------------------------------------
# gradients

def _policy_loss(params, x, actions, weights):
    out, cache = forward(params, x)
    logp = log_softmax(out)
    n = len(x)
    loss = -float((weights * logp[np.arange(n), actions]).sum())
    p = np.exp(logp)
    upstream = p * weights[:, None]
    upstream[np.arange(n), actions] -= weights
    return loss, cache, upstream


def _value_loss(params, x, targets):
    out, cache = forward(params, x)
    diff = out[:, 0] - targets
    return 0.5 * float((diff ** 2).sum()), cache, diff[:, None]


def gradient_check(width: int, head: str, draws: int = 100, seed: int = 0, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference directional derivatives."""
    rng = np.random.default_rng(seed)
    n_out = 4 if head == "policy" else 1
    worst = 0.0
    for _ in range(draws):
        params = init_mlp(width, n_out, rng)
        for w in params.weights:
            w += rng.normal(scale=0.1, size=w.shape)
        for b in params.biases:
            b += rng.normal(scale=0.1, size=b.shape)
        x = (rng.random((8, width)) < 0.3).astype(float)
        if head == "policy":
            actions = rng.integers(0, n_out, size=8)
            weights = rng.normal(size=8)
            loss_fn = lambda p: _policy_loss(p, x, actions, weights)  # noqa: E731
        else:
            targets = rng.normal(size=8)
            loss_fn = lambda p: _value_loss(p, x, targets)  # noqa: E731
        _, cache, upstream = loss_fn(params)
        grad = backward(params, cache, upstream).flat()
        direction = rng.normal(size=grad.shape)
        direction /= np.linalg.norm(direction)
        base = params.flat()
        params.set_flat(base + h * direction)
        plus = loss_fn(params)[0]
        params.set_flat(base - h * direction)
        minus = loss_fn(params)[0]
        params.set_flat(base)
        numeric = (plus - minus) / (2 * h)
        analytic = float(grad @ direction)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    return worst


def check_gradients(draws: int = 100) -> Check:
    widths = sorted({obs_dim(EnvSpec(name)) for name in ENV_NAMES})
    errs = {(w, head): gradient_check(w, head, draws, seed=w) for w in widths for head in ("policy", "value")}
    worst = max(errs.values())
    detail = " ".join(f"{head}@{w}={e:.1e}" for (w, head), e in errs.items()) + f" (<= {GRAD_REL_TOL:g})"
    return Check("gradient correctness", worst <= GRAD_REL_TOL, detail)


def check_exact_gradient(draws: int = 10, seed: int = 0) -> Check:
    mdp = build("key2door", "train")
    rng = np.random.default_rng(seed)
    diff = 0.0
    for _ in range(draws):
        theta = rng.normal(size=(mdp.n_states, mdp.n_actions))
        g_q = exact_policy_gradient(mdp, theta, GAMMA, "q_value")
        g_a = exact_policy_gradient(mdp, theta, GAMMA, "advantage")
        diff = max(diff, float(np.abs(g_q - g_a).max()))
    policy = PolicyTable.uniform(mdp.n_states, mdp.n_actions)
    traces = sampled_gradient_traces(mdp, policy, GAMMA, n_batches=2000, batch_size=32, seed=seed)
    ok = diff <= 1e-10 and traces["advantage"] < traces["q_value"]
    return Check("exact-gradient baseline invariance", ok,
                 f"max|g_Q - g_A|={diff:.1e} (<=1e-10); cov trace A={traces['advantage']:.3e} "
                 f"< Q={traces['q_value']:.3e}")


# ---------------------------------------------------------------------------
# training criteria

def suite_configs() -> dict:
    """The experiment configs backing criteria 7-10."""
    return {
        "qvsa_ppo": ExperimentConfig("qvsa_ppo", "qvsa", algo="ppo"),
        "qvsa_reinforce": ExperimentConfig("qvsa_reinforce", "qvsa", algo="reinforce"),
        "normalization": ExperimentConfig("normalization_key2door", "normalization", envs=("key2door",),
                                          signals=("advantage",)),
        "batchsize": ExperimentConfig("batchsize_key2door", "batchsize", envs=("key2door",),
                                      signals=("q_value",)),
        "kl_probe": ExperimentConfig("kl_probe", "kl_probe", envs=("key2door", "diversion")),
    }


def _combine(name: str, outcomes) -> Check:
    checks = [c for o in outcomes for c in o.checks]
    return Check(name, bool(checks) and all(c.passed for c in checks), "; ".join(c.line() for c in checks))


def check_qvsa(root=None, workers: int = 1, progress=None) -> Check:
    cfgs = suite_configs()
    outs = [run_experiment(cfgs[k], root, workers, progress) for k in ("qvsa_ppo", "qvsa_reinforce")]
    return _combine("q-value vs advantage (ppo + reinforce)", outs)


def check_normalization(root=None, workers: int = 1, progress=None) -> Check:
    return _combine("advantage normalization", [run_experiment(suite_configs()["normalization"], root, workers,
                                                               progress)])


def check_batchsize(root=None, workers: int = 1, progress=None) -> Check:
    return _combine("batch size", [run_experiment(suite_configs()["batchsize"], root, workers, progress)])


def check_kl(root=None, workers: int = 1, progress=None) -> Check:
    return _combine("kl probes", [run_experiment(suite_configs()["kl_probe"], root, workers, progress)])


def determinism_config() -> ExperimentConfig:
    return ExperimentConfig("determinism", "qvsa", envs=("diversion", "frozen_tmaze"), seeds=(0, 1),
                            overrides={"total_steps": 1_500, "eval_interval": 500, "eval_episodes": 20})


def _csv_bytes(directory: Path) -> dict:
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*.csv"))}


def check_determinism(workers: int = 1) -> Check:
    """Two fresh runs plus a resumed rerun of a small sweep must write identical CSV bytes."""
    cfg = determinism_config()
    with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
        run_experiment(cfg, a, workers)
        first = _csv_bytes(Path(a))
        run_experiment(cfg, b, workers)
        second = _csv_bytes(Path(b))
        run_experiment(cfg, a, workers)  # every job is marked done: pure resume
        resumed = _csv_bytes(Path(a))
        _, t_a = table1_report()
        _, t_b = table1_report()
    same = first == second == resumed and t_a == t_b
    return Check("determinism", same and len(first) > 0,
                 f"{len(first)} CSV files compared across 2 fresh runs + 1 resume; table1 rerun identical={t_a == t_b}")


# ---------------------------------------------------------------------------

CRITERIA = (
    ("1", "table1", lambda ctx: table1_report()[0]),
    ("2", "theorem1", lambda ctx: check_theorem1()[0]),
    ("3", "lemma_corollary", lambda ctx: check_lemma_corollary()[0]),
    ("4", "confounding", lambda ctx: check_confounding()[0]),
    ("5", "gradients", lambda ctx: check_gradients()),
    ("6", "exact_gradient", lambda ctx: check_exact_gradient()),
    ("7", "qvsa", lambda ctx: check_qvsa(**ctx)),
    ("8", "normalization", lambda ctx: check_normalization(**ctx)),
    ("9", "batchsize", lambda ctx: check_batchsize(**ctx)),
    ("10", "kl_probe", lambda ctx: check_kl(**ctx)),
    ("11", "determinism", lambda ctx: check_determinism(ctx.get("workers", 1))),
)


def run_suite(root=None, workers: int = 1, only=None, echo=print, progress=None) -> list[Check]:
    """Run the requested criteria (all by default), echoing one line per criterion."""
    ctx = {"root": output_root(root), "workers": workers, "progress": progress}
    results = []
    for number, key, fn in CRITERIA:
        if only and number not in only and key not in only:
            continue
        check = fn(ctx)
        check.name = f"criterion {number} ({check.name})"
        results.append(check)
        if echo:
            echo(check.line())
    return results
