import json

import numpy as np
import pytest

from advlab import experiments
from advlab.experiments import (ConfigError, ExperimentConfig, Job, execute_job, load_config, load_job, parse_seeds,
                                read_curve, run_experiment)
from advlab.trainers import TrainerConfig


def write(tmp_path, text, name="exp.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


TINY = """[experiment]
kind = qvsa
name = tiny
envs = diversion
seeds = 0-1
[trainer]
total_steps = 384
eval_interval = 128
eval_episodes = 5
"""


def test_parse_seeds():
    assert parse_seeds("0-3, 7") == (0, 1, 2, 3, 7)
    with pytest.raises(ConfigError):
        parse_seeds("a")


def test_load_config_and_overrides(tmp_path):
    cfg = load_config(write(tmp_path, TINY + "normalize_advantage = on\nmax_grad_norm = none\n"))
    assert cfg.name == "tiny" and cfg.envs == ("diversion",) and cfg.seeds == (0, 1)
    tc = cfg.trainer_config("diversion", 1, signal="q_value")
    assert tc.total_steps == 384 and tc.normalize_advantage and tc.max_grad_norm is None and tc.seed == 1
    assert cfg.trainer_config("key2door", 0).eval_interval == 128


@pytest.mark.parametrize("text, field", [
    ("[experiment]\nkind = qvsa\n[trainer]\nlr = -1\n", "lr"),
    ("[experiment]\nkind = qvsa\n[trainer]\nlearning_rate = 1\n", "learning_rate"),
    ("[experiment]\nkind = qvsa\n[trainer]\nbatch_size = big\n", "batch_size"),
    ("[experiment]\nkind = qvsa\nenvs = pong\n", "envs"),
    ("[experiment]\nkind = dance\n", "kind"),
    ("[experiment]\nkind = qvsa\ncolour = red\n", "colour"),
    ("[experiment]\nkind = batchsize\nalgo = reinforce\n", "algo"),
    ("[experiment]\nkind = qvsa\nseeds = 1, 1\n", "seeds"),
    ("[trainer]\nlr = 1\n", "experiment"),
])
def test_invalid_configs_name_the_field(tmp_path, text, field):
    with pytest.raises(ConfigError, match=field):
        load_config(write(tmp_path, text))


def test_job_groups_ignore_seed_but_not_hyperparameters():
    a = Job("diversion", TrainerConfig(seed=0))
    assert a.group() == Job("diversion", TrainerConfig(seed=5)).group()
    assert a.group() != Job("diversion", TrainerConfig(lr=2e-3)).group()


def test_execute_job_writes_markers_and_resumes(tmp_path):
    job = Job("diversion", TrainerConfig(total_steps=256, eval_interval=128, eval_episodes=3), (128,))
    d = execute_job(job, tmp_path)
    assert (d / "DONE").exists() and (d / "net0_step128.npz").exists()
    assert json.loads((d / "config.json").read_text())["total_steps"] == 256
    stamp = (d / "curve.csv").stat().st_mtime_ns
    execute_job(job, tmp_path)
    assert (d / "curve.csv").stat().st_mtime_ns == stamp
    res = load_job(job, tmp_path)
    assert res.curve.shape == (3, 5) and list(res.snapshots) == [128]
    np.testing.assert_array_equal(read_curve(d / "curve.csv")[:, 0], [0, 128, 256])
    with pytest.raises(FileNotFoundError):
        load_job(Job("diversion", TrainerConfig(seed=9)), tmp_path)


def test_interrupted_seed_is_rerun(tmp_path):
    job = Job("diversion", TrainerConfig(total_steps=128, eval_interval=128, eval_episodes=3))
    d = execute_job(job, tmp_path)
    first = (d / "curve.csv").read_bytes()
    (d / "DONE").unlink()
    (d / "curve.csv").write_text("partial")
    execute_job(job, tmp_path)
    assert (d / "curve.csv").read_bytes() == first


def test_qvsa_run_outputs_and_byte_identical_rerun(tmp_path):
    cfg = load_config(write(tmp_path, TINY))
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    names = sorted(p.name for p in a.artifacts)
    assert names == ["curves.csv", "curves_diversion.svg", "summary.csv"]
    for pa, pb in zip(sorted(a.artifacts), sorted(b.artifacts)):
        assert pa.read_bytes() == pb.read_bytes()
    text = (tmp_path / "a" / "tiny" / "summary.csv").read_text()
    assert "# experiment=qvsa" in text and '"total_steps": 384' in text
    assert "diversion/ppo/advantage,384," in text
    assert len(a.checks) == 1 and a.checks[0].name == "qvsa ppo diversion"


def test_normalization_and_batchsize_variants(tmp_path):
    norm = ExperimentConfig("n", "normalization", envs=("diversion",), signals=("advantage",), seeds=(0, 1),
                            overrides=dict(total_steps=128, eval_interval=128, eval_episodes=3))
    out = run_experiment(norm, tmp_path)
    assert out.checks[0].name == "normalization diversion"
    assert set(out.data["bundles"]) == {"diversion/ppo/advantage/norm_off", "diversion/ppo/advantage/norm_on"}
    bs = ExperimentConfig("b", "batchsize", envs=("diversion",), signals=("q_value",), seeds=(0, 1),
                          batch_sizes=(32, 256), overrides=dict(total_steps=256, eval_interval=256, eval_episodes=3))
    out = run_experiment(bs, tmp_path)
    assert "256" in out.checks[0].detail and "monotone" in out.checks[0].detail
    assert experiments._variants(bs)[1].extra["rollout_steps"] == 256


def test_kl_probe_outputs(tmp_path):
    cfg = ExperimentConfig("k", "kl_probe", envs=("diversion",), seeds=(0, 1),
                           overrides=dict(eval_interval=10_000, eval_episodes=3))
    out = run_experiment(cfg, tmp_path)
    text = (tmp_path / "k" / "kl_heatmaps.csv").read_text()
    assert "# kl_direction=KL(original||flipped)" in text and "# units=nats" in text
    assert out.checks[0].name == "kl diversion q_value collapse"
    means = out.data["kl_means"]["diversion/ppo/q_value"]
    assert means.steps == [3_000, 10_000, 20_000]


def test_table1_and_theory_outputs(tmp_path):
    out = run_experiment(ExperimentConfig("t1", "table1"), tmp_path)
    assert out.passed and (tmp_path / "t1" / "table1.csv").read_text().startswith("# experiment=table1")
    out = run_experiment(ExperimentConfig("th", "theorem1_check"), tmp_path)
    assert out.passed and len(out.checks) == 3


def test_output_root_env_var(monkeypatch, tmp_path):
    monkeypatch.setenv(experiments.OUTPUT_ENV_VAR, str(tmp_path))
    assert experiments.output_root() == tmp_path
    assert experiments.output_root("x") == experiments.Path("x")
    monkeypatch.delenv(experiments.OUTPUT_ENV_VAR)
    assert str(experiments.output_root()) == experiments.DEFAULT_OUTPUT
