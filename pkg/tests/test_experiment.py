import json
from pathlib import Path

import numpy as np
import pytest

from steergrpo import experiment
from steergrpo.checkpoint import read_checkpoint
from steergrpo.config import load_config

ROOT = Path(__file__).resolve().parents[1]
FIXTURE = ROOT / "tests" / "fixtures" / "ablate_reward_basic8.json"


@pytest.fixture(scope="module")
def cfg():
    return load_config(ROOT / "configs" / "basic8_steered.yaml")


def test_base_model_is_faithful_to_prompts(cfg, tmp_path):
    summary, res = experiment.run_training(cfg.replace(epochs=0), tmp_path)
    assert summary["final_unsafe_rate"] == 1.0  # the pretrained model renders unsafe prompts as asked
    assert summary["final_utility"] > 0.99
    assert res.history == []


def test_short_run_regression(cfg, tmp_path):
    summary, _ = experiment.run_training(cfg.replace(epochs=40, checkpoint_every=20), tmp_path)
    assert summary["final_unsafe_rate"] == pytest.approx(0.022135416666666668, abs=1e-12)
    assert summary["final_utility"] == pytest.approx(0.9990163577646616, abs=1e-12)
    ck = read_checkpoint(tmp_path / "checkpoints" / "step00040.ckpt")
    fin = read_checkpoint(tmp_path / "final.ckpt")
    assert ck.step == 40 and np.array_equal(ck.params, fin.params)
    assert ck.config_hash == cfg.replace(epochs=40, checkpoint_every=20).digest()


def test_periodic_eval_log(cfg, tmp_path):
    c = cfg.replace(epochs=4, checkpoint_every=0, eval=cfg.eval.__class__(every=2, n_samples=32))
    experiment.run_training(c, tmp_path)
    rows = [json.loads(ln) for ln in (tmp_path / "eval.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [2, 4]


def test_load_params_rejects_other_architecture(cfg, tmp_path):
    experiment.run_training(cfg.replace(epochs=0), tmp_path)
    other = cfg.replace(pretrain=cfg.pretrain.__class__(hidden=(8,), steps=10))
    with pytest.raises(ValueError, match="layer sizes"):
        experiment.load_params(experiment.build(other), tmp_path / "final.ckpt")


def test_shipped_ablation_fixture_ordering():
    doc = json.loads(FIXTURE.read_text())
    rows = {r["variant"]: r for r in doc["rows"]}
    assert set(rows) == {"steered", "plain_cosine", "safeclip_posneg", "neg_only"}
    unsafe = {k: r["unsafe_rate"] for k, r in rows.items()}
    util = {k: r["utility_score"] for k, r in rows.items()}
    assert unsafe["steered"] == min(unsafe.values())
    assert util["neg_only"] == min(util.values())
    assert all(util["neg_only"] < v for k, v in util.items() if k != "neg_only")
    assert unsafe["steered"] <= unsafe["plain_cosine"]


def test_ablation_reproduces_fixture(cfg, tmp_path):
    doc = json.loads(FIXTURE.read_text())
    rows = experiment.ablate_reward(cfg, [r["variant"] for r in doc["rows"]], tmp_path)
    for got, want in zip(rows, doc["rows"]):
        assert got["variant"] == want["variant"]
        assert got["unsafe_rate"] == pytest.approx(want["unsafe_rate"], abs=1e-12)
        assert got["utility_score"] == pytest.approx(want["utility_score"], abs=1e-12)
