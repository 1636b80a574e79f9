import json
import logging
import math
import shutil

import numpy as np
import pytest

from pacbus.baselearn import adapt
from pacbus.bounds import BoundReport
from pacbus.cli import (EXIT_IO, EXIT_OK, EXIT_VALIDATION, REFERENCE_LINES, LockHeld, load_config, main,
                        parse_config, run_lock, validate_config, write_checkpoint)
from pacbus.core import PosteriorParams, RngStream
from pacbus.models import batch_loss_grad
from pacbus.tasks import load_pool

SMALL = """
[run]
seed = 1
[tasks]
prior_count = 10
train_count = 12
test_count = 10
m = 6
n = 10
test_n = 20
[model]
widths = 2, 8, 2
[prior]
iterations = 5
[meta]
meta_lr = 0.05
iterations = 8
checkpoint_every = 4
[bound]
N = 40
[eval]
draws = 3
"""


def write_config(tmp_path, text, name="c.ini", out="run"):
    path = tmp_path / name
    path.write_text(text.replace("[run]", f"[run]\nout = {tmp_path / out}", 1))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_tasks_counts_and_determinism(tmp_path):
    cfg_a = write_config(tmp_path, "[run]\nseed = 3\n", "a.ini", "a")
    cfg_b = write_config(tmp_path, "[run]\nseed = 3\n", "b.ini", "b")
    assert run("gen-tasks", "--config", cfg_a) == EXIT_OK
    assert run("gen-tasks", "--config", cfg_b) == EXIT_OK
    source = json.loads((tmp_path / "a" / "pools" / "source.json").read_text())
    assert source["counts"] == {"meta-test": 200, "meta-train": 500, "prior": 50}
    train = load_pool(tmp_path / "a" / "pools", "meta-train")
    assert (train.m, train.n) == (10, 50)
    files = sorted(p.name for p in (tmp_path / "a" / "pools").iterdir())
    for name in files:
        assert (tmp_path / "a" / "pools" / name).read_bytes() == (tmp_path / "b" / "pools" / name).read_bytes()


def test_invalid_field_is_named(tmp_path, caplog):
    cfg = write_config(tmp_path, "[run]\n[tasks]\nm = 0\n")
    with caplog.at_level(logging.ERROR, logger="pacbus"):
        assert run("gen-tasks", "--config", cfg) == EXIT_VALIDATION
    assert "tasks.m" in caplog.text
    assert not (tmp_path / "run" / "pools").exists()


@pytest.mark.parametrize("text,key", [
    ("[run]\n[tasks]\ntrain_count = 5\n", "tasks.train_count"),
    ("[run]\n[bound]\ndelta = 0.6\ndelta_prime = 0.5\n", "bound"),
    ("[run]\nmode = adam\n", "run.mode"),
    ("[run]\n[model]\nwidths = 3, 4, 2\n", "model.widths"),
])
def test_validation_errors(text, key):
    with pytest.raises(ValueError, match=key.replace(".", r"\.")):
        validate_config(parse_config(text))


def test_parse_errors_exit_as_io(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[run\nseed = 1\n")
    assert run("gen-tasks", "--config", bad) == EXIT_IO
    bad.write_text("[run]\nseed = 1\nnot a pair\n")
    with pytest.raises(ValueError, match=r"bad.ini:3"):
        load_config(bad)
    assert run("gen-tasks", "--config", tmp_path / "missing.ini") == EXIT_IO


def test_unknown_keys_are_rejected():
    with pytest.raises(ValueError, match="meta.iteration"):
        parse_config("[meta]\niteration = 3\n")


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp, SMALL)
    assert run("gen-tasks", "--config", cfg) == EXIT_OK
    assert run("train", "--config", cfg) == EXIT_OK
    assert run("certify", "--config", cfg) == EXIT_OK
    assert run("evaluate", "--config", cfg) == EXIT_OK
    return tmp, cfg


def test_train_writes_logs_and_learns(trained):
    tmp, _ = trained
    out = tmp / "run"
    prior = [json.loads(x) for x in (out / "prior.log.jsonl").read_text().splitlines()]
    assert len(prior) == 5 and prior[-1]["prior_loss"] < prior[0]["prior_loss"]
    logs = [json.loads(x) for x in (out / "train.log.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in logs] == list(range(8))
    assert all(math.isfinite(r["B"]) for r in logs)
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["iter-000004.json", "iter-000008.json"]


def test_report_obeys_sum_invariant(trained):
    tmp, cfg = trained
    doc = json.loads((tmp / "run" / "report.json").read_text())
    rep = BoundReport.from_dict(doc["report"])
    assert rep.total_bound == rep.empirical_term + rep.pac_bayes_regularizer + rep.stability_term
    assert 0 < rep.total_bound
    assert doc["config_hash"] == load_config(cfg).hash
    assert [r["value"] for r in doc["reference"]] == [v for _, v in REFERENCE_LINES]
    text = (tmp / "run" / "report.txt").read_text()
    assert "reference values at full scale" in text and "0.2213" in text and "0.5101" in text


def test_evaluation_records_bound(trained):
    tmp, _ = trained
    ev = json.loads((tmp / "run" / "evaluation.json").read_text())
    rep = json.loads((tmp / "run" / "report.json").read_text())["report"]
    assert ev["certified_bound"] == rep["total_bound"]
    assert ev["loss_below_bound"] == (ev["loss_mean"] <= rep["total_bound"])
    assert ev["tasks"] == 10 and ev["draws"] == 3


def test_resume_reproduces_log_and_checkpoint(trained, tmp_path):
    src, cfg = trained
    out = tmp_path / "resumed"
    shutil.copytree(src / "run", out)
    (out / "checkpoint.json").unlink()
    (out / "report.json").unlink()
    assert run("train", "--config", cfg, "--out", out, "--checkpoint", out / "checkpoints" / "iter-000004.json") == 0
    for name in ("train.log.jsonl", "checkpoint.json", "checkpoints/iter-000008.json"):
        assert (out / name).read_bytes() == (src / "run" / name).read_bytes()


def test_replay_is_bitwise(trained):
    _, cfg = trained
    assert run("replay", "--config", cfg) == EXIT_OK


def test_hash_mismatch_is_refused(trained, caplog):
    tmp, cfg = trained
    ck = tmp / "run" / "checkpoint.json"
    with caplog.at_level(logging.ERROR, logger="pacbus"):
        assert run("certify", "--config", cfg, "--seed", 2, "--out", tmp / "other", "--checkpoint", ck) \
            == EXIT_VALIDATION
    assert "config hash" in caplog.text


def test_alias_matches_heuristic_with_zero_weights(tmp_path):
    base = """
[run]
mode = {mode}
[tasks]
prior_count = 0
train_count = 10
test_count = 8
m = 5
n = 6
[model]
widths = 2, 6, 2
[base]
heuristic_lr = 0.5
[prior]
iterations = 0
[meta]
iterations = 4
{weights}
"""
    a = write_config(tmp_path, base.format(mode="maml-like", weights=""), "a.ini", "a")
    b = write_config(tmp_path, base.format(mode="pacbus-h", weights="lambda1 = 0\nlambda2 = 0"), "b.ini", "b")
    assert load_config(a).hash == load_config(b).hash
    for c in (a, b):
        assert run("train", "--config", c) == EXIT_OK
    for name in ("train.log.jsonl", "checkpoint.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_zero_variance_evaluation_is_the_mean(tmp_path):
    cfg_path = write_config(tmp_path, SMALL)
    assert run("gen-tasks", "--config", cfg_path) == EXIT_OK
    cfg = load_config(cfg_path)
    spec = cfg.spec()
    mean = np.random.default_rng(0).standard_normal(spec.param_count)
    mean *= 0.8 * spec.radius / np.linalg.norm(mean)
    psi = PosteriorParams(mean, np.full(spec.param_count, -200.0))
    write_checkpoint(cfg.out / "checkpoint.json", cfg, psi, psi, 0)
    assert run("evaluate", "--config", cfg_path) == EXIT_OK
    ev = json.loads((cfg.out / "evaluation.json").read_text())
    # adapt the mean itself, task by task, with the same SGD orders
    pool = load_pool(cfg.out / "pools", "meta-test")
    budget = cfg.budget(spec, pool.m, pool.n)
    order = RngStream(cfg["run.seed"]).child("evaluate").child("base")
    losses, accs = [], []
    for t in pool:
        theta = adapt(spec, mean, t.train, budget, order.child("order", t.task_id)).theta
        loss, acc, _ = batch_loss_grad(spec, theta[None], t.x_val[None], t.y_val[None], spec.scaling, False)
        losses.append(loss[0])
        accs.append(acc[0])
    assert ev["loss_mean"] == pytest.approx(float(np.mean(losses)), rel=1e-12)
    assert ev["accuracy_mean"] == pytest.approx(float(np.mean(accs)), rel=1e-12)


def test_random_init_is_at_chance(tmp_path):
    text = """
[run]
seed = 4
[tasks]
generator = cluster
way = 2
d = 8
classes = 40
per_class = 20
shots = 1
test_queries = 10
prior_count = 0
train_count = 8
test_count = 300
split = 0, 0.5, 0.5
[model]
widths = 8, 16, 2
[prior]
iterations = 0
[meta]
iterations = 0
[eval]
draws = 2
"""
    cfg = write_config(tmp_path, text)
    assert run("gen-tasks", "--config", cfg) == EXIT_OK
    assert run("train", "--config", cfg) == EXIT_OK
    assert run("evaluate", "--config", cfg) == EXIT_OK
    ev = json.loads((tmp_path / "run" / "evaluation.json").read_text())
    sigma = ev["accuracy_std"] / math.sqrt(ev["tasks"])
    assert abs(ev["accuracy_mean"] - 0.5) <= 3 * sigma


def test_lock_blocks_a_second_run(tmp_path):
    with run_lock(tmp_path):
        with pytest.raises(LockHeld):
            with run_lock(tmp_path):
                pass
    assert not (tmp_path / ".pacbus.lock").exists()
