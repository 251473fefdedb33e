"""Toy conditional diffusion model with a stochastic DDIM sampler.

The denoiser is a small MLP predicting the noise from ``[z_t, onehot(prompt),
t/T]``. Each DDIM transition with ``sigma_t > 0`` is a Gaussian whose mean
depends on the network output, which is what makes the sampler a policy
with tractable per-step log-probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .diffnum import AdamState, MlpNetwork, adam_step, backward, forward_cached

SharedNoise = Literal["batch", "group", "none"]


class InvalidScheduleError(ValueError):
    pass


class DegenerateDensityError(ValueError):
    """A log-density was requested for a deterministic (sigma = 0) transition."""


class ReplayError(ValueError):
    pass


class RolloutConfigError(ValueError):
    pass


def alpha_bar_curve(tau: np.ndarray, alpha_bar_max: float = 0.995, alpha_bar_min: float = 0.01) -> np.ndarray:
    """Log-linear cumulative signal level on normalized time ``tau`` in [0, 1]."""
    tau = np.asarray(tau, dtype=np.float64)
    return alpha_bar_max * (alpha_bar_min / alpha_bar_max) ** tau


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """``alpha_bar[t]`` for t = 0..T and DDIM stochasticity ``eta``.

    ``sigma[t]`` (t >= 1) is the DDIM noise scale of the transition
    ``z_t -> z_{t-1}``; ``sigma[0]`` is unused and set to 0.
    """

    alpha_bar: np.ndarray
    eta: float = 1.0
    sigma: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2:
            raise InvalidScheduleError("alpha_bar needs at least two entries (T >= 1)")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise InvalidScheduleError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise InvalidScheduleError("alpha_bar must be strictly decreasing")
        if not 0.0 <= self.eta <= 1.0:
            raise InvalidScheduleError(f"eta must be in [0, 1], got {self.eta}")
        prev, cur = ab[:-1], ab[1:]
        sig = self.eta * np.sqrt((1.0 - prev) / (1.0 - cur)) * np.sqrt(1.0 - cur / prev)
        sigma = np.concatenate([[0.0], sig])
        if np.any(1.0 - prev - sig**2 < 0):
            raise InvalidScheduleError("1 - alpha_bar[t-1] - sigma_t^2 < 0")
        ab.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def log_linear(
        cls, T: int, eta: float = 1.0, alpha_bar_max: float = 0.995, alpha_bar_min: float = 0.01
    ) -> "NoiseSchedule":
        if T < 1:
            raise InvalidScheduleError("T must be >= 1")
        return cls(alpha_bar_curve(np.arange(T + 1) / T, alpha_bar_max, alpha_bar_min), eta)

    @property
    def T(self) -> int:
        return self.alpha_bar.size - 1

    def tau(self, t: np.ndarray | int) -> np.ndarray:
        return np.asarray(t, dtype=np.float64) / self.T

    def matches(self, other: "NoiseSchedule") -> bool:
        return (
            self.eta == other.eta
            and self.alpha_bar.shape == other.alpha_bar.shape
            and bool(np.all(self.alpha_bar == other.alpha_bar))
        )


@dataclass
class DenoiserModel:
    """Noise predictor ``eps(z_t, t, c)``; the unconditional branch uses a zero condition."""

    net: MlpNetwork
    n_prompts: int
    latent_dim: int = 2

    def __post_init__(self) -> None:
        if self.net.n_in != self.latent_dim + self.n_prompts + 1:
            raise ValueError("network input must be latent_dim + n_prompts + 1")
        if self.net.n_out != self.latent_dim:
            raise ValueError("network output must equal latent_dim")

    @classmethod
    def create(
        cls, n_prompts: int, hidden: Sequence[int] = (64, 64), latent_dim: int = 2, seed: int = 0
    ) -> "DenoiserModel":
        sizes = (latent_dim + n_prompts + 1, *hidden, latent_dim)
        return cls(MlpNetwork.init(sizes, np.random.default_rng(seed)), n_prompts, latent_dim)

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    def with_params(self, params: np.ndarray) -> "DenoiserModel":
        return DenoiserModel(self.net.with_params(params), self.n_prompts, self.latent_dim)

    def inputs(self, z: np.ndarray, tau: np.ndarray, prompt_ids: np.ndarray | None) -> np.ndarray:
        z = np.atleast_2d(z)
        n = z.shape[0]
        cond = np.zeros((n, self.n_prompts))
        if prompt_ids is not None:
            cond[np.arange(n), np.broadcast_to(prompt_ids, (n,))] = 1.0
        tau_col = np.broadcast_to(np.asarray(tau, dtype=np.float64), (n,))[:, None]
        return np.hstack([z, cond, tau_col])


@dataclass
class _EpsCache:
    x_cond: np.ndarray
    cache_cond: list
    x_uncond: np.ndarray | None = None
    cache_uncond: list | None = None


def guided_eps(
    model: DenoiserModel,
    params: np.ndarray,
    z: np.ndarray,
    tau: np.ndarray,
    prompt_ids: np.ndarray,
    guidance: float = 1.0,
) -> tuple[np.ndarray, _EpsCache]:
    """Classifier-free-guided noise estimate ``eps_u + w (eps_c - eps_u)``."""
    x_c = model.inputs(z, tau, prompt_ids)
    eps_c, cache_c = forward_cached(model.net, x_c, params)
    if guidance == 1.0:
        return eps_c, _EpsCache(x_c, cache_c)
    x_u = model.inputs(z, tau, None)
    eps_u, cache_u = forward_cached(model.net, x_u, params)
    return eps_u + guidance * (eps_c - eps_u), _EpsCache(x_c, cache_c, x_u, cache_u)


def guided_eps_vjp(
    model: DenoiserModel, params: np.ndarray, cache: _EpsCache, g_eps: np.ndarray, guidance: float = 1.0
) -> np.ndarray:
    if cache.x_uncond is None:
        return backward(model.net, cache.x_cond, g_eps, params, cache.cache_cond)[0]
    g_c = backward(model.net, cache.x_cond, guidance * g_eps, params, cache.cache_cond)[0]
    g_u = backward(model.net, cache.x_uncond, (1.0 - guidance) * g_eps, params, cache.cache_uncond)[0]
    return g_c + g_u


def _step_coeffs(schedule: NoiseSchedule, t: np.ndarray) -> tuple[np.ndarray, ...]:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"timesteps must lie in 1..{schedule.T}")
    ab_t = schedule.alpha_bar[t]
    ab_prev = schedule.alpha_bar[t - 1]
    sigma = schedule.sigma[t]
    dir_sq = 1.0 - ab_prev - sigma**2
    if np.any(dir_sq < 0):
        raise InvalidScheduleError("1 - alpha_bar[t-1] - sigma_t^2 < 0")
    return np.sqrt(ab_t), np.sqrt(1.0 - ab_t), np.sqrt(ab_prev), np.sqrt(dir_sq), sigma


def ddim_mean_from_eps(
    schedule: NoiseSchedule, z_t: np.ndarray, t: np.ndarray | int, eps: np.ndarray
) -> np.ndarray:
    """DDIM transition mean given a noise estimate (row-wise for batches)."""
    sab_t, s1m_t, sab_prev, dir_coef, _ = _step_coeffs(schedule, t)
    if np.ndim(sab_t) == 1:
        sab_t, s1m_t, sab_prev, dir_coef = (c[:, None] for c in (sab_t, s1m_t, sab_prev, dir_coef))
    x0_hat = (z_t - s1m_t * eps) / sab_t
    return sab_prev * x0_hat + dir_coef * eps


def ddim_mean(
    model: DenoiserModel,
    z_t: np.ndarray,
    t: int,
    prompt_id: int,
    guidance: float,
    schedule: NoiseSchedule,
    params: np.ndarray | None = None,
) -> np.ndarray:
    params = model.params if params is None else params
    z2 = np.atleast_2d(z_t)
    ids = np.full(z2.shape[0], prompt_id)
    eps, _ = guided_eps(model, params, z2, schedule.tau(t), ids, guidance)
    mu = ddim_mean_from_eps(schedule, z2, t, eps)
    return mu.reshape(np.shape(z_t))


def gaussian_logpdf(x: np.ndarray, mu: np.ndarray, sigma: np.ndarray | float) -> np.ndarray:
    """Isotropic Gaussian log-density with the full normalizing constant."""
    x = np.atleast_2d(x)
    mu = np.atleast_2d(mu)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise DegenerateDensityError("sigma must be positive for a log-density")
    dim = x.shape[-1]
    sq = np.sum((x - mu) ** 2, axis=-1)
    return -sq / (2.0 * sigma**2) - 0.5 * dim * np.log(2.0 * math.pi * sigma**2)


def ddim_step(
    model: DenoiserModel,
    z_t: np.ndarray,
    t: int,
    prompt_id: int,
    guidance: float,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    params: np.ndarray | None = None,
    with_logprob: bool = True,
) -> tuple[np.ndarray, float | None]:
    """Sample ``z_{t-1} = mu + sigma_t * noise``; optionally return its log-density."""
    sigma = float(schedule.sigma[t])
    if with_logprob and sigma == 0.0:
        raise DegenerateDensityError(f"sigma_{t} = 0 (eta = {schedule.eta}); no log-density")
    mu = ddim_mean(model, z_t, t, prompt_id, guidance, schedule, params)
    z_prev = mu + sigma * rng.standard_normal(mu.shape)
    if not with_logprob:
        return z_prev, None
    return z_prev, float(gaussian_logpdf(z_prev, mu, sigma)[0])


@dataclass(eq=False)
class Trajectory:
    prompt_id: int
    latents: np.ndarray  # (T + 1, D): z_T first, z_0 last
    logps: np.ndarray  # (T,): step s holds log p(z_{T-s-1} | z_{T-s}); NaN where sigma = 0
    noise_seed: int
    schedule: NoiseSchedule
    guidance: float = 1.0

    def __post_init__(self) -> None:
        if self.latents.shape[0] != self.logps.shape[0] + 1:
            raise ValueError("latents must have one more entry than logps")
        if self.latents.shape[0] != self.schedule.T + 1:
            raise ValueError("trajectory length does not match the schedule")

    @property
    def x0(self) -> np.ndarray:
        return self.latents[-1]

    @property
    def total_logp(self) -> float:
        return float(np.sum(self.logps))


@dataclass(eq=False)
class RolloutBatch:
    """Stacked trajectories; rows are grouped prompt by prompt, K rows each."""

    prompt_ids: np.ndarray  # (N,)
    latents: np.ndarray  # (N, T + 1, D)
    logps: np.ndarray  # (N, T)
    schedule: NoiseSchedule
    guidance: float
    noise_seed: int
    group_size: int

    @property
    def n(self) -> int:
        return self.prompt_ids.shape[0]

    @property
    def x0(self) -> np.ndarray:
        return self.latents[:, -1]

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(
            int(self.prompt_ids[i]),
            self.latents[i],
            self.logps[i],
            self.noise_seed,
            self.schedule,
            self.guidance,
        )

    def trajectories(self) -> list[Trajectory]:
        return [self.trajectory(i) for i in range(self.n)]


def step_timesteps(T: int) -> np.ndarray:
    """Timestep t of each sampling step s = 0..T-1 (s = 0 is the noisiest)."""
    return np.arange(T, 0, -1)


def sample_rollouts(
    model: DenoiserModel,
    params: np.ndarray,
    prompt_ids: Sequence[int],
    K: int,
    schedule: NoiseSchedule,
    guidance: float,
    seed: int,
    shared_noise: SharedNoise = "batch",
) -> RolloutBatch:
    """Generate K trajectories per prompt under a frozen parameter snapshot.

    ``shared_noise="batch"`` draws a single ``z_T`` reused by every
    trajectory in the batch; ``"group"`` draws one per prompt; ``"none"``
    draws one per trajectory.
    """
    if K < 2:
        raise RolloutConfigError(f"group size K must be >= 2, got {K}")
    ids = np.repeat(np.asarray(prompt_ids, dtype=np.int64), K)
    n, D, T = ids.size, model.latent_dim, schedule.T
    rng = np.random.default_rng(seed)
    if shared_noise == "batch":
        z = np.tile(rng.standard_normal(D), (n, 1))
    elif shared_noise == "group":
        z = np.repeat(rng.standard_normal((len(prompt_ids), D)), K, axis=0)
    elif shared_noise == "none":
        z = rng.standard_normal((n, D))
    else:
        raise RolloutConfigError(f"unknown shared_noise mode {shared_noise!r}")

    latents = np.empty((n, T + 1, D))
    logps = np.full((n, T), np.nan)
    latents[:, 0] = z
    for s, t in enumerate(step_timesteps(T)):
        eps, _ = guided_eps(model, params, z, schedule.tau(t), ids, guidance)
        mu = ddim_mean_from_eps(schedule, z, int(t), eps)
        sigma = float(schedule.sigma[t])
        if sigma > 0:
            z = mu + sigma * rng.standard_normal((n, D))
            logps[:, s] = gaussian_logpdf(z, mu, sigma)
        else:
            z = mu
        latents[:, s + 1] = z
    return RolloutBatch(ids, latents, logps, schedule, guidance, seed, K)


def rollout(
    model: DenoiserModel,
    prompt_id: int,
    K: int,
    schedule: NoiseSchedule,
    guidance: float = 1.0,
    seed: int = 0,
    shared_noise: SharedNoise = "batch",
    params: np.ndarray | None = None,
) -> list[Trajectory]:
    params = model.params if params is None else params
    batch = sample_rollouts(model, params, [prompt_id], K, schedule, guidance, seed, shared_noise)
    return batch.trajectories()


@dataclass
class TransitionCache:
    eps_cache: _EpsCache
    c_eps: np.ndarray  # d mu / d eps per row
    resid: np.ndarray  # z_prev - mu
    sigma: np.ndarray
    guidance: float


def transition_logprob(
    model: DenoiserModel,
    params: np.ndarray,
    schedule: NoiseSchedule,
    guidance: float,
    z_t: np.ndarray,
    z_prev: np.ndarray,
    t: np.ndarray,
    prompt_ids: np.ndarray,
) -> tuple[np.ndarray, TransitionCache]:
    """Log-density of a set of transitions ``z_t -> z_prev`` (one per row)."""
    t = np.asarray(t, dtype=np.int64)
    sigma = schedule.sigma[t]
    if np.any(sigma <= 0):
        raise DegenerateDensityError("log-probabilities need sigma_t > 0 (eta > 0)")
    eps, cache = guided_eps(model, params, z_t, schedule.tau(t), prompt_ids, guidance)
    mu = ddim_mean_from_eps(schedule, z_t, t, eps)
    logp = gaussian_logpdf(z_prev, mu, sigma)
    sab_t, s1m_t, sab_prev, dir_coef, _ = _step_coeffs(schedule, t)
    c_eps = dir_coef - sab_prev * s1m_t / sab_t
    return logp, TransitionCache(cache, c_eps, z_prev - mu, sigma, guidance)


def transition_logprob_vjp(
    model: DenoiserModel, params: np.ndarray, cache: TransitionCache, g_logp: np.ndarray
) -> np.ndarray:
    """Gradient of ``sum(g_logp * logp)`` with respect to the parameters."""
    scale = g_logp * cache.c_eps / cache.sigma**2
    g_eps = scale[:, None] * cache.resid
    return guided_eps_vjp(model, params, cache.eps_cache, g_eps, cache.guidance)


def logprob_under(
    model: DenoiserModel,
    params: np.ndarray,
    trajectory: Trajectory,
    schedule: NoiseSchedule,
    guidance: float | None = None,
    steps: Sequence[int] | None = None,
) -> np.ndarray:
    """Per-step log-probabilities of a stored trajectory under ``params``.

    ``steps`` selects sampling-step indices (default: all of them).
    """
    if not schedule.matches(trajectory.schedule):
        raise ReplayError("schedule differs from the one the trajectory was sampled with")
    w = trajectory.guidance if guidance is None else guidance
    s = np.arange(schedule.T) if steps is None else np.asarray(steps, dtype=np.int64)
    t = step_timesteps(schedule.T)[s]
    ids = np.full(s.size, trajectory.prompt_id)
    logp, _ = transition_logprob(
        model, params, schedule, w, trajectory.latents[s], trajectory.latents[s + 1], t, ids
    )
    return logp


@dataclass
class DiffusionPolicy:
    """Sampler view of a denoiser used for evaluation (independent noise per sample)."""

    model: DenoiserModel
    params: np.ndarray
    schedule: NoiseSchedule
    guidance: float = 1.0

    def sample(self, prompt_ids: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        ids = np.asarray(prompt_ids, dtype=np.int64)
        D = self.model.latent_dim
        z = rng.standard_normal((ids.size, D))
        for t in step_timesteps(self.schedule.T):
            eps, _ = guided_eps(self.model, self.params, z, self.schedule.tau(t), ids, self.guidance)
            z = ddim_mean_from_eps(self.schedule, z, int(t), eps) + self.schedule.sigma[t] * (
                rng.standard_normal((ids.size, D)) if self.schedule.sigma[t] > 0 else 0.0
            )
        return z


def pretrain_denoiser(
    model: DenoiserModel,
    centers: np.ndarray,
    mode_std: float,
    steps: int = 3000,
    batch_size: int = 256,
    lr: float = 3e-3,
    cond_dropout: float = 0.1,
    alpha_bar_max: float = 0.995,
    alpha_bar_min: float = 0.01,
    seed: int = 0,
) -> DenoiserModel:
    """Fit the base model by noise regression on per-prompt Gaussian modes.

    Time is sampled continuously, so the result can be sampled with any
    number of DDIM steps.
    """
    rng = np.random.default_rng([seed, 0xD1FF])
    params = model.params.copy()
    state = AdamState.like(params)
    n_prompts = centers.shape[0]
    for _ in range(steps):
        ids = rng.integers(0, n_prompts, size=batch_size)
        x0 = centers[ids] + mode_std * rng.standard_normal((batch_size, model.latent_dim))
        tau = rng.uniform(0.0, 1.0, size=batch_size)
        ab = alpha_bar_curve(tau, alpha_bar_max, alpha_bar_min)[:, None]
        noise = rng.standard_normal(x0.shape)
        z = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
        inp = model.inputs(z, tau, ids)
        drop = rng.uniform(size=batch_size) < cond_dropout
        inp[drop, model.latent_dim : model.latent_dim + n_prompts] = 0.0
        pred, cache = forward_cached(model.net, inp, params)
        g = 2.0 * (pred - noise) / batch_size
        grad, _ = backward(model.net, inp, g, params, cache)
        params, state = adam_step(params, grad, state, lr=lr)
    return model.with_params(params)
