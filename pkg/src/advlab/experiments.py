"""Experiment definitions, the resumable job store and result summaries.

Every training job is identified by (env, trainer config without seed, probe
steps). Its per-seed directory holds ``curve.csv``, ``config.json``, policy
checkpoints and a ``DONE`` marker written last, so interrupted sweeps resume
where they stopped. Summaries are always computed from the persisted CSVs,
which keeps fresh and resumed runs byte-identical.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .envs import ENV_NAMES, EnvSpec, build
from .neural import load_params, save_params
from .trainers import CURVE_COLUMNS, SIGNALS, TrainerConfig, agent_from_snapshot, train

OUTPUT_ENV_VAR = "ADVLAB_OUTPUT_ROOT"
DEFAULT_OUTPUT = "lab_output"
DEFAULT_SEEDS = tuple(range(10))
KINDS = ("table1", "qvsa", "normalization", "batchsize", "kl_probe", "theorem1_check")
BATCH_SIZES = (32, 128, 512)


@dataclass(frozen=True)
class Schedule:
    total_steps: int
    eval_interval: int
    probe_steps: tuple


SCHEDULES = {
    "key2door": Schedule(100_000, 5_000, (10_000, 50_000, 100_000)),
    "frozen_tmaze": Schedule(100_000, 5_000, (10_000, 50_000, 100_000)),
    "diversion": Schedule(20_000, 1_000, (3_000, 10_000, 20_000)),
}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


def output_root(explicit=None) -> Path:
    return Path(explicit or os.environ.get(OUTPUT_ENV_VAR) or DEFAULT_OUTPUT)


# ---------------------------------------------------------------------------
# jobs

@dataclass(frozen=True)
class Job:
    env: str
    cfg: TrainerConfig
    probe_steps: tuple = ()

    def group(self) -> str:
        body = {k: v for k, v in self.cfg.to_dict().items() if k != "seed"}
        blob = json.dumps({"env": self.env, "cfg": body, "probe": list(self.probe_steps)}, sort_keys=True)
        digest = hashlib.sha256(blob.encode()).hexdigest()[:10]
        return f"{self.env}-{self.cfg.algo}-{self.cfg.signal}-{digest}"

    def directory(self, root: Path) -> Path:
        return Path(root) / "jobs" / self.group() / f"seed_{self.cfg.seed}"


@dataclass
class JobResult:
    job: Job
    curve: np.ndarray  # rows of CURVE_COLUMNS as read back from disk
    snapshots: dict = field(default_factory=dict)  # step -> list of MlpParams

    def final(self, column: str = "eval_return_mean") -> float:
        return float(self.curve[-1, CURVE_COLUMNS.index(column)])


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def execute_job(job: Job, root: Path) -> Path:
    """Train one seed unless its completion marker already exists."""
    d = job.directory(root)
    if (d / "DONE").exists():
        return d
    d.mkdir(parents=True, exist_ok=True)
    run = train(EnvSpec(job.env), job.cfg, job.probe_steps)
    for step, nets in run.snapshots.items():
        for k, net in enumerate(nets):
            save_params(d / f"net{k}_step{step}.npz", net)
    _write_atomic(d / "config.json", json.dumps(
        {"env": job.env, "probe_steps": list(job.probe_steps), **job.cfg.to_dict()}, indent=1, sort_keys=True) + "\n")
    _write_atomic(d / "curve.csv", run.to_csv())
    _write_atomic(d / "DONE", "ok\n")
    return d


def load_job(job: Job, root: Path) -> JobResult:
    d = job.directory(root)
    if not (d / "DONE").exists():
        raise FileNotFoundError(f"job {d} has not completed")
    curve = read_curve(d / "curve.csv")
    snapshots = {}
    for step in job.probe_steps:
        nets, k = [], 0
        while (d / f"net{k}_step{step}.npz").exists():
            nets.append(load_params(d / f"net{k}_step{step}.npz"))
            k += 1
        if nets:
            snapshots[step] = nets
    return JobResult(job, curve, snapshots)


def read_curve(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or line.startswith(CURVE_COLUMNS[0]):
                continue
            rows.append([float(x) for x in line.strip().split(",")])
    return np.array(rows, dtype=float).reshape(-1, len(CURVE_COLUMNS))


def _worker(args):
    job, root = args
    execute_job(job, root)
    return job


def run_jobs(jobs: list[Job], root: Path, workers: int = 1, progress=None) -> list[JobResult]:
    """Run pending jobs (optionally in a process pool) and load every result in order."""
    pending = [j for j in jobs if not (j.directory(root) / "DONE").exists()]
    if workers > 1 and len(pending) > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(workers) as pool:
            for job in pool.imap_unordered(_worker, [(j, root) for j in pending]):
                if progress:
                    progress(job)
    else:
        for job in pending:
            execute_job(job, root)
            if progress:
                progress(job)
    return [load_job(j, root) for j in jobs]


# ---------------------------------------------------------------------------
# experiment configs

@dataclass
class ExperimentConfig:
    name: str
    experiment: str
    envs: tuple = ENV_NAMES
    algo: str = "ppo"
    signals: tuple = SIGNALS
    seeds: tuple = DEFAULT_SEEDS
    overrides: dict = field(default_factory=dict)
    batch_sizes: tuple = BATCH_SIZES
    gamma: float | None = None
    output_dir: str | None = None
    svg: bool = True

    def __post_init__(self):
        if self.experiment not in KINDS:
            raise ConfigError(f"[experiment] kind: unknown experiment {self.experiment!r}; expected one of {KINDS}")
        for env in self.envs:
            if env not in ENV_NAMES:
                raise ConfigError(f"[experiment] envs: unknown env {env!r}")
        for sig in self.signals:
            if sig not in SIGNALS:
                raise ConfigError(f"[experiment] signals: unknown signal {sig!r}")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ConfigError("[experiment] seeds: must be a non-empty list of distinct integers")
        if self.algo not in ("ppo", "reinforce"):
            raise ConfigError(f"[experiment] algo: unknown algorithm {self.algo!r}")
        if self.experiment in ("normalization", "batchsize") and self.algo != "ppo":
            raise ConfigError(f"[experiment] algo: {self.experiment} applies to ppo only")
        try:
            self.trainer_config("key2door", 0)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[trainer] {exc}") from None

    def directory(self, root: Path) -> Path:
        return Path(self.output_dir) if self.output_dir else Path(root) / self.name

    def trainer_config(self, env: str, seed: int, **extra) -> TrainerConfig:
        sched = SCHEDULES[env]
        base = dict(total_steps=sched.total_steps, eval_interval=sched.eval_interval)
        base.update(self.overrides)
        base.update(extra)
        base["seed"] = seed
        return TrainerConfig.defaults(self.algo, **base)

    def resolved(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("output_dir")
        return out


_TRAINER_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainerConfig)}


def _parse_value(field_name: str, raw: str):
    raw = raw.strip()
    kind = _TRAINER_FIELDS[field_name]
    if "bool" in kind:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[trainer] {field_name}: expected a boolean, got {raw!r}")
    if raw.lower() in ("none", "null", ""):
        if "None" in kind:
            return None
        raise ConfigError(f"[trainer] {field_name}: a value is required")
    try:
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[trainer] {field_name}: cannot parse {raw!r} as {kind}") from None
    return raw


def _split(raw: str) -> tuple:
    return tuple(x.strip() for x in raw.replace("\n", ",").split(",") if x.strip())


def parse_seeds(raw: str) -> tuple:
    seeds = []
    for part in _split(raw):
        try:
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError(f"[experiment] seeds: cannot parse {part!r}") from None
    return tuple(seeds)


def load_config(path) -> ExperimentConfig:
    """Read an INI experiment file: ``[experiment]`` plus optional ``[trainer]`` overrides."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not parser.has_section("experiment"):
        raise ConfigError(f"{path}: missing [experiment] section")
    sec = parser["experiment"]
    known = {"name", "kind", "envs", "algo", "signals", "seeds", "batch_sizes", "gamma", "output_dir", "svg"}
    for key in sec:
        if key not in known:
            raise ConfigError(f"[experiment] {key}: unknown field")
    if "kind" not in sec:
        raise ConfigError("[experiment] kind: required")
    kw = dict(name=sec.get("name", Path(path).stem), experiment=sec["kind"].strip())
    if "envs" in sec:
        kw["envs"] = _split(sec["envs"])
    if "algo" in sec:
        kw["algo"] = sec["algo"].strip()
    if "signals" in sec:
        kw["signals"] = _split(sec["signals"])
    if "seeds" in sec:
        kw["seeds"] = parse_seeds(sec["seeds"])
    if "batch_sizes" in sec:
        try:
            kw["batch_sizes"] = tuple(int(x) for x in _split(sec["batch_sizes"]))
        except ValueError:
            raise ConfigError("[experiment] batch_sizes: expected integers") from None
    if "gamma" in sec:
        try:
            kw["gamma"] = float(sec["gamma"])
        except ValueError:
            raise ConfigError("[experiment] gamma: expected a number") from None
    if "output_dir" in sec:
        kw["output_dir"] = sec["output_dir"].strip()
    if "svg" in sec:
        kw["svg"] = sec.getboolean("svg")
    overrides = {}
    if parser.has_section("trainer"):
        for key, raw in parser["trainer"].items():
            if key not in _TRAINER_FIELDS or key == "seed":
                raise ConfigError(f"[trainer] {key}: unknown field")
            overrides[key] = _parse_value(key, raw)
    kw["overrides"] = overrides
    return ExperimentConfig(**kw)


# ---------------------------------------------------------------------------
# outcomes

@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


@dataclass
class Outcome:
    config: ExperimentConfig
    checks: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)
    data: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _header(cfg: ExperimentConfig, **extra) -> dict:
    out = {"experiment": cfg.experiment, "name": cfg.name, "config": json.dumps(cfg.resolved(), sort_keys=True)}
    if cfg.experiment not in ("table1", "theorem1_check"):
        for env in cfg.envs:
            resolved = cfg.trainer_config(env, cfg.seeds[0]).to_dict()
            resolved.pop("seed")
            out[f"trainer.{env}"] = json.dumps(resolved, sort_keys=True)
    out.update(extra)
    return out


def _emit(outcome: Outcome, path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_atomic(path, text)
    outcome.artifacts.append(path)


# ---------------------------------------------------------------------------
# training sweeps

@dataclass
class Variant:
    """One curve family in a sweep: an env plus trainer overrides."""
    label: str
    env: str
    extra: dict


def _variants(cfg: ExperimentConfig) -> list[Variant]:
    out = []
    for env in cfg.envs:
        if cfg.experiment in ("qvsa", "kl_probe"):
            out += [Variant(f"{env}/{cfg.algo}/{s}", env, {"signal": s}) for s in cfg.signals]
        elif cfg.experiment == "normalization":
            out += [Variant(f"{env}/{cfg.algo}/{s}/norm_{'on' if n else 'off'}", env,
                            {"signal": s, "normalize_advantage": n})
                    for s in cfg.signals for n in (False, True)]
        elif cfg.experiment == "batchsize":
            # a minibatch may not exceed the rollout, so large batches lengthen the rollout
            for s in cfg.signals:
                for b in cfg.batch_sizes:
                    rollout = max(cfg.overrides.get("rollout_steps", 128), b)
                    out.append(Variant(f"{env}/{cfg.algo}/{s}/batch_{b}", env,
                                       {"signal": s, "batch_size": b, "rollout_steps": rollout}))
    return out


def sweep(cfg: ExperimentConfig, root: Path, workers: int = 1, progress=None) -> dict:
    """Run every (variant, seed) job; returns label -> list of JobResult in seed order."""
    jobs, index = [], []
    for v in _variants(cfg):
        probe = SCHEDULES[v.env].probe_steps
        for seed in cfg.seeds:
            jobs.append(Job(v.env, cfg.trainer_config(v.env, seed, **v.extra), probe))
            index.append(v.label)
    results = run_jobs(jobs, root, workers, progress)
    grouped: dict = {}
    for label, res in zip(index, results):
        grouped.setdefault(label, []).append(res)
    return grouped


def summarize_curves(cfg: ExperimentConfig, grouped: dict, outcome: Outcome, out_dir: Path) -> dict:
    rows, summary, bundles = [], [], {}
    for label, results in grouped.items():
        bundle = analysis.aggregate_curves([r.curve for r in results],
                                           columns=("train_return_mean", "eval_return_mean"), seeds=cfg.seeds)
        bundles[label] = bundle
        rows += analysis.curve_rows(bundle, label)
        summary.append((label, int(bundle.steps[-1]), bundle.final("train_return_mean"),
                        float(bundle.se("train_return_mean")[-1]), bundle.final("eval_return_mean"),
                        float(bundle.se("eval_return_mean")[-1]), len(results)))
    _emit(outcome, out_dir / "curves.csv", analysis.long_csv(rows, _header(cfg)))
    lines = [f"# {k}={v}" for k, v in _header(cfg).items()]
    lines.append("config,final_step,train_mean,train_se,eval_mean,eval_se,n_seeds")
    lines += [f"{l},{s},{a:.6f},{b:.6f},{c:.6f},{d:.6f},{n}" for l, s, a, b, c, d, n in summary]
    _emit(outcome, out_dir / "summary.csv", "\n".join(lines) + "\n")
    if cfg.svg:
        for env in cfg.envs:
            series = {}
            for label, b in bundles.items():
                if label.startswith(env + "/"):
                    tag = label[len(env) + 1:]
                    series[f"{tag} train"] = (b.steps, b.mean("train_return_mean"), b.se("train_return_mean"))
                    series[f"{tag} eval"] = (b.steps, b.mean("eval_return_mean"), b.se("eval_return_mean"))
            if series:
                _emit(outcome, out_dir / f"curves_{env}.svg", analysis.svg_curves(series, f"{cfg.name}: {env}"))
    outcome.data["bundles"] = bundles
    return bundles


def final_means(bundles: dict) -> dict:
    return {label: (b.final("train_return_mean"), b.final("eval_return_mean")) for label, b in bundles.items()}


def qvsa_checks(cfg: ExperimentConfig, bundles: dict) -> list[Check]:
    """Advantage generalises to the eval variant, q_value does not; both learn the train variant."""
    finals = final_means(bundles)
    checks = []
    for env in cfg.envs:
        adv = finals.get(f"{env}/{cfg.algo}/advantage")
        qv = finals.get(f"{env}/{cfg.algo}/q_value")
        if adv is None or qv is None:
            continue
        ok = adv[1] >= 0.5 and qv[1] <= 0.0 and adv[0] >= 0.5 and qv[0] >= 0.5
        checks.append(Check(f"qvsa {cfg.algo} {env}", ok,
                            f"eval adv={adv[1]:+.3f} (>=0.5) q={qv[1]:+.3f} (<=0.0); "
                            f"train adv={adv[0]:+.3f} q={qv[0]:+.3f} (>=0.5)"))
    return checks


def normalization_checks(cfg: ExperimentConfig, bundles: dict) -> list[Check]:
    finals = final_means(bundles)
    checks = []
    for env in cfg.envs:
        off = finals.get(f"{env}/{cfg.algo}/advantage/norm_off")
        on = finals.get(f"{env}/{cfg.algo}/advantage/norm_on")
        if off is None or on is None:
            continue
        ok = on[1] <= 0.0 and off[1] >= 0.5 and off[0] >= 0.5
        checks.append(Check(f"normalization {env}", ok,
                            f"eval on={on[1]:+.3f} (<=0.0) off={off[1]:+.3f} (>=0.5); train off={off[0]:+.3f}"))
    return checks


def batchsize_checks(cfg: ExperimentConfig, bundles: dict) -> list[Check]:
    finals = final_means(bundles)
    checks = []
    lo, hi = min(cfg.batch_sizes), max(cfg.batch_sizes)
    for env in cfg.envs:
        for s in cfg.signals:
            evals = {b: finals[f"{env}/{cfg.algo}/{s}/batch_{b}"][1] for b in cfg.batch_sizes}
            order = " ".join(f"{b}:{evals[b]:+.3f}" for b in sorted(evals))
            monotone = all(evals[a] <= evals[b] for a, b in zip(sorted(evals), sorted(evals)[1:]))
            checks.append(Check(f"batchsize {env} {s}", evals[hi] > evals[lo],
                                f"eval {order}; {hi} > {lo} required; monotone={monotone}"))
    return checks


# ---------------------------------------------------------------------------
# KL probes

DIVERSION_COLLAPSE_NATS = 0.1


def kl_maps(cfg: ExperimentConfig, grouped: dict) -> dict:
    """label -> list of per-seed KlHeatmap."""
    out = {}
    for label, results in grouped.items():
        env = EnvSpec(results[0].job.env)
        n_actions = build(env.name).n_actions
        out[label] = [analysis.kl_heatmap(r.snapshots, env, n_actions, 100, seed=r.job.cfg.seed)
                      for r in results]
    return out


def kl_probe_outcome(cfg: ExperimentConfig, grouped: dict, outcome: Outcome, out_dir: Path) -> dict:
    maps = kl_maps(cfg, grouped)
    rows = []
    means = {}
    for label, per_seed in maps.items():
        for seed, m in zip(cfg.seeds, per_seed):
            rows += m.rows(label, seed)
        means[label] = analysis.mean_heatmap(per_seed)
        rows += means[label].rows(label, "mean")
    _emit(outcome, out_dir / "kl_heatmaps.csv",
          analysis.long_csv(rows, _header(cfg, kl_direction=analysis.KL_DIRECTION, units="nats")))
    if cfg.svg:
        for label, m in means.items():
            _emit(outcome, out_dir / f"kl_{label.replace('/', '_')}.svg", analysis.svg_heatmap(m, label))
    outcome.data["kl_maps"] = maps
    outcome.data["kl_means"] = means
    return maps


def seed_mean_at(maps: list, cell, step) -> float:
    """Seed average of one heatmap entry; unvisited seeds count as zero divergence."""
    vals = [m.at(cell, step) for m in maps]
    return float(np.mean([0.0 if np.isnan(v) else v for v in vals]))


def cells_mean_at(maps: list, step) -> float:
    """Seed average of the mean over visited cells at one checkpoint."""
    per_seed = []
    for m in maps:
        col = m.values[:, m.steps.index(step)]
        per_seed.append(float(np.nanmean(col)) if np.any(~np.isnan(col)) else 0.0)
    return float(np.mean(per_seed))


def kl_checks(cfg: ExperimentConfig, maps: dict) -> list[Check]:
    checks = []
    if "key2door" in cfg.envs:
        last = SCHEDULES["key2door"].probe_steps[-1]
        adv = seed_mean_at(maps[f"key2door/{cfg.algo}/advantage"], 6, last)
        qv = seed_mean_at(maps[f"key2door/{cfg.algo}/q_value"], 6, last)
        checks.append(Check("kl key2door L=6", adv >= 5.0 * qv,
                            f"step {last}: adv={adv:.4f} q={qv:.4f} nats; ratio "
                            f"{adv / qv if qv > 0 else float('inf'):.2f} (>=5)"))
    if "diversion" in cfg.envs:
        steps = SCHEDULES["diversion"].probe_steps
        qm = maps[f"diversion/{cfg.algo}/q_value"]
        vals = {s: cells_mean_at(qm, s) for s in steps}
        later = [s for s in steps if s >= 10_000]
        ok = all(vals[s] <= DIVERSION_COLLAPSE_NATS for s in later)
        checks.append(Check("kl diversion q_value collapse", ok,
                            " ".join(f"{s}:{v:.4f}" for s, v in vals.items())
                            + f" nats; <= {DIVERSION_COLLAPSE_NATS} from 10k on"))
    return checks


# ---------------------------------------------------------------------------
# dispatch

def run_experiment(cfg: ExperimentConfig, root=None, workers: int = 1, progress=None) -> Outcome:
    from . import acceptance  # exact-solver checks live with the acceptance suite

    root = output_root(root)
    out_dir = cfg.directory(root)
    outcome = Outcome(cfg)
    if cfg.experiment == "table1":
        check, text = acceptance.table1_report(cfg.gamma, _header(cfg))
        _emit(outcome, out_dir / "table1.csv", text)
        outcome.checks.append(check)
        return outcome
    if cfg.experiment == "theorem1_check":
        checks, text = acceptance.theory_report(_header(cfg))
        _emit(outcome, out_dir / "theory_checks.csv", text)
        outcome.checks.extend(checks)
        return outcome
    grouped = sweep(cfg, root, workers, progress)
    bundles = summarize_curves(cfg, grouped, outcome, out_dir)
    if cfg.experiment == "qvsa":
        outcome.checks += qvsa_checks(cfg, bundles)
    elif cfg.experiment == "normalization":
        outcome.checks += normalization_checks(cfg, bundles)
    elif cfg.experiment == "batchsize":
        outcome.checks += batchsize_checks(cfg, bundles)
    elif cfg.experiment == "kl_probe":
        maps = kl_probe_outcome(cfg, grouped, outcome, out_dir)
        outcome.checks += kl_checks(cfg, maps)
    return outcome
