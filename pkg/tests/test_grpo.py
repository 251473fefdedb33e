import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from steergrpo.diffnum import AdamState, fd_gradient
from steergrpo.diffuser import DenoiserModel, DiffusionPolicy, NoiseSchedule, sample_rollouts
from steergrpo.embedspace import SyntheticEncoder
from steergrpo.grpo import (
    METRIC_FIELDS,
    GrpoConfig,
    PolicyDivergedError,
    TransitionSet,
    group_advantages,
    grpo_loss_and_grad,
    kl_penalty,
    make_groups,
    rollout_seed,
    surrogate_loss,
    surrogate_terms,
    train_run,
    train_step,
)
from steergrpo.reward import RewardModel, RewardSpec
from steergrpo.synthlab import make_task

import oracles

rewards_st = st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=32)


# --- advantages ---------------------------------------------------------------

def test_advantages_equal_rewards_zero():
    np.testing.assert_array_equal(group_advantages([0.3] * 5), np.zeros(5))


def test_advantages_hand_case():
    a = group_advantages([1, 2, 3, 4], delta=0.0)
    np.testing.assert_allclose(a, [-1.3416407864998738, -0.4472135954999579, 0.4472135954999579, 1.3416407864998738], atol=1e-15)
    np.testing.assert_allclose(a, oracles.group_advantages([1, 2, 3, 4], 0.0), atol=1e-15)


def test_advantages_delta_dominates():
    a = group_advantages([0.0, 1e-9], delta=1e-4)
    np.testing.assert_allclose(np.abs(a), 5e-6, rtol=1e-4)


def test_advantages_need_two():
    with pytest.raises(ValueError):
        group_advantages([1.0])


@settings(max_examples=200, deadline=None)
@given(rewards_st)
def test_advantage_zscore_properties(r):
    pre = group_advantages(r, 1e-4, clip=None)
    assert abs(pre.mean()) <= 1e-9
    assert pre.std() <= 1 + 1e-9
    post = group_advantages(r, 1e-4, clip=5.0)
    assert np.all(np.abs(post) <= 5.0)


@settings(max_examples=200, deadline=None)
@given(rewards_st, st.floats(-50, 50))
def test_advantage_shift_invariance(r, c):
    r = np.asarray(r)
    if np.ptp(r) < 1e-3:
        return
    np.testing.assert_allclose(group_advantages(r + c), group_advantages(r), atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(rewards_st, st.floats(0.01, 100))
def test_advantage_scale_invariance_delta0(r, c):
    r = np.asarray(r)
    if np.ptp(r) < 1e-3:
        return
    np.testing.assert_allclose(group_advantages(c * r, 0.0), group_advantages(r, 0.0), atol=1e-9)


# --- surrogate and KL ---------------------------------------------------------

def test_surrogate_identity_at_rho1():
    assert surrogate_loss([0.3, -1.2], [0.3, -1.2], 0.7, 1e-4) == -0.7


def test_surrogate_clip_hand_cases():
    assert surrogate_loss([math.log(1.5)], [0.0], 1.0, 1e-4) == pytest.approx(-1.0001, abs=1e-12)
    assert surrogate_loss([math.log(0.5)], [0.0], -1.0, 1e-4) == pytest.approx(0.9999, abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(st.floats(0.01, 100), st.floats(-5, 5), st.floats(1e-5, 0.5))
def test_clip_activity(rho, adv, eps):
    loss, _ = surrogate_terms(np.array([rho]), adv, eps)
    assert loss[0] >= -adv * np.clip(rho, 1 - eps, 1 + eps)
    assert loss[0] >= -adv * rho


def test_kl_hand_values():
    assert kl_penalty([0.0], [0.0]) == 0.0
    assert kl_penalty([math.log(2)], [0.0]) == pytest.approx(1 - math.log(2), abs=1e-12)
    assert kl_penalty([math.log(2)], [0.0]) == pytest.approx(0.306853, abs=1e-6)
    assert kl_penalty([math.log(0.5)], [0.0]) == pytest.approx(0.193147, abs=1e-6)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=10), st.lists(st.floats(-20, 20), min_size=1, max_size=10))
def test_kl_nonnegative(new, old):
    n = min(len(new), len(old))
    k = kl_penalty(new[:n], old[:n])
    assert k >= 0
    if k == 0:
        assert np.allclose(np.exp(np.subtract(new[:n], old[:n])), 1.0)


def test_nonfinite_ratio_aborts():
    with pytest.raises(PolicyDivergedError):
        surrogate_loss([1000.0], [0.0], 1.0, 1e-4)
    with pytest.raises(PolicyDivergedError):
        kl_penalty([np.nan], [0.0])


# --- config -------------------------------------------------------------------

def test_config_defaults_and_validation():
    c = GrpoConfig()
    assert (c.K, c.clip_eps, c.kl_coef, c.inner_epochs, c.adv_clip, c.grad_clip) == (16, 1e-4, 0.5, 3, 5.0, 1.0)
    for bad in (dict(clip_eps=0), dict(delta=0), dict(inner_epochs=0), dict(adv_clip=0), dict(K=1)):
        with pytest.raises(ValueError):
            GrpoConfig(**bad)


def test_trained_steps_are_least_noisy():
    np.testing.assert_array_equal(GrpoConfig().trained_steps(50), np.arange(10, 50))
    np.testing.assert_array_equal(GrpoConfig().trained_steps(10), np.arange(2, 10))
    np.testing.assert_array_equal(GrpoConfig().trained_steps(3), np.arange(0, 3))


# --- loss gradient and train_step ---------------------------------------------

@pytest.fixture(scope="module")
def tiny():
    model = DenoiserModel.create(1, (12,), seed=3)
    assert model.params.size <= 200
    s = NoiseSchedule.log_linear(3, 1.0)
    batch = sample_rollouts(model, model.params, [0], 2, s, 1.0, 7)
    return model, s, batch


def _loss_fd_check(model, s, pairs, theta, step):
    _, g = grpo_loss_and_grad(model, theta, pairs, s, 1.0, 1e-4, 0.5)
    fd = fd_gradient(lambda q: grpo_loss_and_grad(model, q, pairs, s, 1.0, 1e-4, 0.5, need_grad=False)[0].loss, theta, step)
    mask = np.abs(fd) > 1e-8
    return np.max(np.abs(g[mask] - fd[mask]) / np.abs(fd[mask]))


def test_first_inner_epoch_ratio_identity(tiny):
    model, s, batch = tiny
    adv = group_advantages(batch.x0[:, 0])
    pairs = TransitionSet.from_batch(batch, adv, GrpoConfig(K=2).trained_steps(3))
    stats, _ = grpo_loss_and_grad(model, model.params, pairs, s, 1.0, 1e-4, 0.5)
    np.testing.assert_array_equal(stats.rho, 1.0)
    assert stats.kl == 0.0
    assert stats.surrogate == pytest.approx(-adv.mean(), abs=1e-15)


def test_zero_advantages_first_epoch_noop(tiny):
    model, s, batch = tiny
    cfg = GrpoConfig(K=2, inner_epochs=1)
    p, _, _ = train_step(model, model.params, AdamState.like(model.params), batch, np.zeros(2), cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(p, model.params)


def test_gradient_at_rollout_params(tiny):
    # the clip band is only 1e-4 wide around rho = 1, so the difference step
    # must keep every ratio inside it
    model, s, batch = tiny
    pairs = TransitionSet.from_batch(batch, np.array([1.0, -1.0]), GrpoConfig(K=2).trained_steps(3))
    assert _loss_fd_check(model, s, pairs, model.params, 1e-6) < 1e-4


def test_train_step_smoke_reward_increases():
    model = DenoiserModel.create(1, (16,), seed=0)
    s = NoiseSchedule.log_linear(3, 1.0)
    cfg = GrpoConfig(K=2, lr=2e-3)
    params, adam = model.params.copy(), AdamState.like(model.params)

    def expected_reward(p):
        x = DiffusionPolicy(model, p, s).sample(np.zeros(4000, dtype=int), np.random.default_rng(0))
        return x[:, 0].mean()

    vals = [expected_reward(params)]
    for step in range(10):
        batch = sample_rollouts(model, params, [0], 2, s, 1.0, rollout_seed(0, step))
        adv = group_advantages(batch.x0[:, 0])  # reward favors the +x direction
        params, adam, _ = train_step(model, params, adam, batch, adv, cfg, np.random.default_rng(step))
        vals.append(expected_reward(params))
    assert np.mean(vals[-3:]) > np.mean(vals[:3])
    assert vals[-1] > vals[0]


def test_kl_abort(tiny):
    model, s, batch = tiny
    cfg = GrpoConfig(K=2, lr=0.5, kl_abort=1e-6)
    with pytest.raises(PolicyDivergedError, match="abort"):
        train_step(model, model.params, AdamState.like(model.params), batch, np.array([1.0, -1.0]), cfg, np.random.default_rng(0))


def test_make_groups_per_prompt():
    model = DenoiserModel.create(3, (8,), seed=1)
    s = NoiseSchedule.log_linear(3)
    batch = sample_rollouts(model, model.params, [0, 1, 2], 4, s, 1.0, 0)
    r = np.random.default_rng(0).standard_normal(12)
    groups, adv = make_groups(batch, r, GrpoConfig(K=4))
    assert [g.prompt_id for g in groups] == [0, 1, 2]
    for g in groups:
        assert len(g.trajectories) == 4
        assert abs(g.advantages.mean()) < 1e-9


# --- train_run ------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_run_parts():
    task = make_task("basic8", 0)
    model = DenoiserModel.create(task.n_prompts, (16,), seed=0)
    enc = SyntheticEncoder.from_seed()
    reward = RewardModel(RewardSpec(), enc, task.centers, task.anchors())
    return task, model, reward, NoiseSchedule.log_linear(4, 1.0)


def test_train_run_zero_epochs(small_run_parts):
    task, model, reward, s = small_run_parts
    res = train_run(model, task, reward, s, GrpoConfig(), 0)
    assert res.history == []
    np.testing.assert_array_equal(res.params, model.params)


def test_train_run_deterministic_and_metrics(tmp_path, small_run_parts):
    task, model, reward, s = small_run_parts
    cfg = GrpoConfig(K=4, lr=1e-3)
    a = train_run(model, task, reward, s, cfg, 3, seed=5, metrics_path=tmp_path / "a.jsonl",
                  checkpoint_dir=tmp_path / "ck", checkpoint_every=2)
    b = train_run(model, task, reward, s, cfg, 3, seed=5, metrics_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    np.testing.assert_array_equal(a.params, b.params)
    lines = (tmp_path / "a.jsonl").read_text().splitlines()
    assert len(lines) == 3
    assert tuple(json.loads(lines[0])) == METRIC_FIELDS
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["step00002.ckpt"]


def test_train_run_rejects_deterministic_sampler(small_run_parts):
    task, model, reward, _ = small_run_parts
    with pytest.raises(ValueError):
        train_run(model, task, reward, NoiseSchedule.log_linear(4, 0.0), GrpoConfig(), 1)


@pytest.mark.parametrize("scale", [3e-3, 3e-2])
def test_gradient_at_perturbed_params(tiny, scale):
    model, s, batch = tiny
    pairs = TransitionSet.from_batch(batch, np.array([1.0, -1.0]), GrpoConfig(K=2).trained_steps(3))
    theta = model.params + scale * np.random.default_rng(1).standard_normal(model.params.size)
    assert _loss_fd_check(model, s, pairs, theta, 1e-5) < 1e-4
