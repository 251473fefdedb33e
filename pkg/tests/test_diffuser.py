import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from steergrpo.diffnum import MlpNetwork
from steergrpo.diffuser import (
    DegenerateDensityError,
    DenoiserModel,
    DiffusionPolicy,
    InvalidScheduleError,
    NoiseSchedule,
    ReplayError,
    RolloutConfigError,
    Trajectory,
    ddim_mean,
    ddim_step,
    gaussian_logpdf,
    guided_eps,
    logprob_under,
    rollout,
    sample_rollouts,
)

import oracles


def zero_model(n_prompts=2, latent_dim=2):
    return DenoiserModel(MlpNetwork.zeros((latent_dim + n_prompts + 1, 4, latent_dim)), n_prompts, latent_dim)


@pytest.fixture(scope="module")
def small_model():
    return DenoiserModel.create(3, (8,), seed=0)


# --- schedule ---------------------------------------------------------------

@pytest.mark.parametrize("T", [1, 3, 10, 50])
@pytest.mark.parametrize("eta", [0.0, 0.5, 1.0])
def test_schedule_sanity(T, eta):
    s = NoiseSchedule.log_linear(T, eta)
    ab = s.alpha_bar
    assert ab.size == T + 1
    assert np.all(np.diff(ab) < 0) and np.all((ab > 0) & (ab <= 1))
    assert np.all(s.sigma >= 0)
    assert np.all(s.sigma[1:] ** 2 <= 1 - ab[:-1] + 1e-15)
    assert np.all(s.sigma[1:] == 0) == (eta == 0)


def test_schedule_sigma_formula():
    # (1 - 0.5) / (1 - 0.25) * (1 - 0.25 / 0.5) = 1/3
    s = NoiseSchedule(np.array([0.5, 0.25]), eta=1.0)
    assert s.sigma[1] ** 2 == pytest.approx(1 / 3, abs=1e-15)
    assert s.sigma[1] == pytest.approx(oracles.ddim_sigma(0.5, 0.25, 1.0), abs=1e-15)


def test_schedule_rejects_bad_input():
    with pytest.raises(InvalidScheduleError):
        NoiseSchedule(np.array([0.5, 0.6]))
    with pytest.raises(InvalidScheduleError):
        NoiseSchedule(np.array([1.2, 0.5]))
    with pytest.raises(InvalidScheduleError):
        NoiseSchedule(np.array([0.9, 0.5]), eta=1.5)


# --- ddim mean ---------------------------------------------------------------

def test_ddim_mean_hand_case_eta0():
    s = NoiseSchedule(np.array([0.5, 0.25]), eta=0.0)
    mu = ddim_mean(zero_model(), np.array([1.0, 0.0]), 1, 0, 1.0, s)
    np.testing.assert_allclose(mu, [math.sqrt(0.5) * 2, 0.0], atol=1e-15)
    np.testing.assert_allclose(mu, [1.4142135623730951, 0.0], atol=1e-15)


def test_ddim_mean_eta1_direction_coefficient():
    # with eps = 1 in one coordinate the mean picks up sqrt(1 - 0.5 - 1/3) of it
    s = NoiseSchedule(np.array([0.5, 0.25]), eta=1.0)
    from steergrpo.diffuser import ddim_mean_from_eps

    mu = ddim_mean_from_eps(s, np.array([[0.0, 0.0]]), 1, np.array([[1.0, 0.0]]))
    x0 = -math.sqrt(0.75) / 0.5
    assert mu[0, 0] == pytest.approx(math.sqrt(0.5) * x0 + math.sqrt(1 / 6), abs=1e-15)


def test_guidance_one_is_conditional_branch(small_model):
    z = np.random.default_rng(0).standard_normal((5, 2))
    ids = np.array([0, 1, 2, 0, 1])
    e1, _ = guided_eps(small_model, small_model.params, z, 0.3, ids, 1.0)
    from steergrpo.diffnum import forward

    ec = forward(small_model.net, small_model.inputs(z, 0.3, ids))
    np.testing.assert_array_equal(e1, ec)


def test_guidance_combination(small_model):
    z = np.random.default_rng(1).standard_normal((3, 2))
    ids = np.array([0, 1, 2])
    from steergrpo.diffnum import forward

    ec = forward(small_model.net, small_model.inputs(z, 0.7, ids))
    eu = forward(small_model.net, small_model.inputs(z, 0.7, None))
    e, _ = guided_eps(small_model, small_model.params, z, 0.7, ids, 3.0)
    np.testing.assert_allclose(e, eu + 3.0 * (ec - eu), atol=1e-14)


# --- log-probabilities ------------------------------------------------------

def test_logpdf_at_mean_dim2():
    assert gaussian_logpdf(np.zeros(2), np.zeros(2), 1.0)[0] == pytest.approx(-math.log(2 * math.pi), abs=1e-15)
    assert gaussian_logpdf(np.zeros(2), np.zeros(2), 1.0)[0] == pytest.approx(-1.8378770664093453, abs=1e-12)


def test_logpdf_residual_one_dim1():
    assert gaussian_logpdf(np.array([1.0]), np.array([0.0]), 1.0)[0] == pytest.approx(-1.4189385332046727, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=2, max_size=2),
    st.lists(st.floats(-5, 5), min_size=2, max_size=2),
    st.floats(0.05, 3.0),
)
def test_logpdf_matches_closed_form(x, mu, sigma):
    got = gaussian_logpdf(np.array(x), np.array(mu), sigma)[0]
    assert abs(got - oracles.gaussian_logpdf(x, mu, sigma)) <= 1e-10


def test_ddim_step_eta0_logprob_rejected(small_model):
    s = NoiseSchedule.log_linear(5, 0.0)
    with pytest.raises(DegenerateDensityError):
        ddim_step(small_model, np.zeros(2), 3, 0, 1.0, s, np.random.default_rng(0))
    z, lp = ddim_step(small_model, np.zeros(2), 3, 0, 1.0, s, np.random.default_rng(0), with_logprob=False)
    assert lp is None and z.shape == (2,)


def test_ddim_step_logprob_consistent(small_model):
    s = NoiseSchedule.log_linear(5, 1.0)
    z_t = np.array([0.3, -0.4])
    z, lp = ddim_step(small_model, z_t, 4, 1, 1.0, s, np.random.default_rng(3))
    mu = ddim_mean(small_model, z_t, 4, 1, 1.0, s)
    assert lp == pytest.approx(oracles.gaussian_logpdf(z.tolist(), mu.tolist(), s.sigma[4]), abs=1e-12)


# --- rollouts and replay ----------------------------------------------------

def test_rollout_requires_group(small_model):
    with pytest.raises(RolloutConfigError):
        rollout(small_model, 0, 1, NoiseSchedule.log_linear(3))


def test_rollout_shared_start_and_eta0_identical(small_model):
    trajs = rollout(small_model, 2, 4, NoiseSchedule.log_linear(5, 0.0), seed=5)
    for tr in trajs:
        np.testing.assert_array_equal(tr.latents, trajs[0].latents)
    trajs = rollout(small_model, 2, 4, NoiseSchedule.log_linear(5, 1.0), seed=5)
    for tr in trajs:
        np.testing.assert_array_equal(tr.latents[0], trajs[0].latents[0])
    assert not np.array_equal(trajs[0].x0, trajs[1].x0)


def test_shared_noise_modes(small_model):
    s = NoiseSchedule.log_linear(3)
    g = sample_rollouts(small_model, small_model.params, [0, 1], 3, s, 1.0, 1, "group")
    assert np.array_equal(g.latents[0, 0], g.latents[2, 0])
    assert not np.array_equal(g.latents[0, 0], g.latents[3, 0])
    n = sample_rollouts(small_model, small_model.params, [0], 3, s, 1.0, 1, "none")
    assert not np.array_equal(n.latents[0, 0], n.latents[1, 0])


def test_eta0_determinism(small_model):
    s = NoiseSchedule.log_linear(10, 0.0)
    a = sample_rollouts(small_model, small_model.params, [0, 1, 2], 2, s, 1.0, 42)
    b = sample_rollouts(small_model, small_model.params, [0, 1, 2], 2, s, 1.0, 42)
    assert a.x0.tobytes() == b.x0.tobytes()
    p = DiffusionPolicy(small_model, small_model.params, s)
    assert p.sample(np.arange(3), np.random.default_rng(4)).tobytes() == p.sample(np.arange(3), np.random.default_rng(4)).tobytes()


def test_seeded_rollout_matches_replay_oracle(small_model):
    s = NoiseSchedule.log_linear(5, 1.0)
    trajs = rollout(small_model, 1, 4, s, seed=123)
    frozen = [-4.962636559612372, -7.6628711859027145, -5.39955162577002, -7.319949343390239]
    for tr, total in zip(trajs, frozen):
        ref = oracles.replay_logps(
            small_model.net.sizes, list(small_model.params), 3, list(s.alpha_bar), 1.0, tr.latents.tolist(), 1
        )
        np.testing.assert_allclose(tr.logps, ref, atol=1e-12)
        assert tr.total_logp == pytest.approx(total, abs=1e-12)
        assert tr.total_logp == float(np.sum(tr.logps))


@pytest.mark.parametrize("guidance", [1.0, 2.5])
def test_replay_at_old_params(small_model, guidance):
    s = NoiseSchedule.log_linear(6, 0.7)
    batch = sample_rollouts(small_model, small_model.params, [0, 1, 2], 3, s, guidance, 9)
    for tr in batch.trajectories():
        lp = logprob_under(small_model, small_model.params, tr, s)
        assert np.max(np.abs(lp - tr.logps)) <= 1e-12
        np.testing.assert_array_equal(np.exp(lp - tr.logps) == 1.0, np.abs(lp - tr.logps) == 0)


def test_replay_perturbed_params_finite(small_model):
    s = NoiseSchedule.log_linear(5, 1.0)
    tr = rollout(small_model, 0, 2, s, seed=2)[0]
    p = small_model.params.copy()
    p[0] += 1e-3
    rho = np.exp(logprob_under(small_model, p, tr, s) - tr.logps)
    assert np.all(np.isfinite(rho)) and np.any(rho != 1.0)


def test_replay_schedule_mismatch(small_model):
    tr = rollout(small_model, 0, 2, NoiseSchedule.log_linear(5, 1.0), seed=2)[0]
    with pytest.raises(ReplayError):
        logprob_under(small_model, small_model.params, tr, NoiseSchedule.log_linear(5, 0.5))


def test_one_step_one_dim_closed_form():
    model = DenoiserModel(MlpNetwork.zeros((1 + 1 + 1, 3, 1)), 1, 1)
    s = NoiseSchedule(np.array([0.5, 0.25]), eta=1.0)
    z_t, z_prev = 1.0, 0.9
    tr = Trajectory(0, np.array([[z_t], [z_prev]]), np.array([np.nan]), 0, s)
    mu = math.sqrt(0.5) * z_t / math.sqrt(0.25)  # eps = 0
    sigma = math.sqrt(1 / 3)
    expected = -((z_prev - mu) ** 2) / (2 * sigma**2) - 0.5 * math.log(2 * math.pi * sigma**2)
    assert logprob_under(model, model.params, tr, s)[0] == pytest.approx(expected, abs=1e-14)


def test_eta_positive_logps_finite(small_model):
    b = sample_rollouts(small_model, small_model.params, [0, 1], 2, NoiseSchedule.log_linear(4, 0.3), 1.0, 0)
    assert np.all(np.isfinite(b.logps))
