"""Online GRPO for the toy diffusion policy.

Each training step samples K trajectories per prompt with the current
parameters (the rollout snapshot), scores the final samples, z-scores the
rewards within each prompt's group and then runs a few inner epochs of the
clipped importance-ratio objective plus a KL penalty against the snapshot.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import write_checkpoint
from .diffnum import AdamState, adam_step, clip_grad_norm
from .diffuser import (
    DenoiserModel,
    NoiseSchedule,
    RolloutBatch,
    SharedNoise,
    Trajectory,
    sample_rollouts,
    step_timesteps,
    transition_logprob,
    transition_logprob_vjp,
)
from .reward import RewardModel
from .synthlab import TaskSpec, oracle_unsafe

log = logging.getLogger(__name__)

METRIC_FIELDS = (
    "step",
    "reward_mean_safe",
    "reward_mean_unsafe",
    "kl_mean",
    "clip_frac",
    "grad_norm",
    "unsafe_rate",
)


class PolicyDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    K: int = 16
    clip_eps: float = 1e-4
    delta: float = 1e-4
    kl_coef: float = 0.5
    inner_epochs: int = 3
    adv_clip: float = 5.0
    grad_clip: float = 1.0
    train_fraction: float = 0.8
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    kl_abort: float = 1.0
    shared_noise: SharedNoise = "batch"

    def __post_init__(self) -> None:
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.clip_eps <= 0 or self.delta <= 0 or self.adv_clip <= 0:
            raise ValueError("clip_eps, delta and adv_clip must be positive")
        if self.inner_epochs < 1:
            raise ValueError("inner_epochs must be >= 1")
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must be in (0, 1]")
        if self.lr <= 0 or self.grad_clip <= 0 or self.kl_coef < 0:
            raise ValueError("lr and grad_clip must be positive, kl_coef non-negative")
        if self.shared_noise not in ("batch", "group", "none"):
            raise ValueError(f"unknown shared_noise mode {self.shared_noise!r}")

    def trained_steps(self, T: int) -> np.ndarray:
        """Sampling-step indices optimized: the last ceil(fraction * T) (least noisy) steps."""
        n = min(T, math.ceil(self.train_fraction * T - 1e-12))
        return np.arange(T - n, T)


def group_advantages(rewards: Sequence[float], delta: float = 1e-4, clip: float | None = 5.0) -> np.ndarray:
    """``(r - mean) / (std + delta)`` with population std, then clipped to ``[-clip, clip]``.

    A group with identical rewards gets all-zero advantages.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    adv = (r - r.mean()) / (r.std() + delta)
    if clip is not None:
        adv = np.clip(adv, -clip, clip)
    return adv


@dataclass
class RolloutGroup:
    prompt_id: int
    trajectories: list[Trajectory]
    rewards: np.ndarray
    advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))


def make_groups(
    batch: RolloutBatch, rewards: np.ndarray, config: GrpoConfig
) -> tuple[list[RolloutGroup], np.ndarray]:
    """Split a batch into per-prompt groups and compute their advantages."""
    K = batch.group_size
    groups = []
    adv = np.empty(batch.n)
    for g0 in range(0, batch.n, K):
        sl = slice(g0, g0 + K)
        a = group_advantages(rewards[sl], config.delta, config.adv_clip)
        adv[sl] = a
        groups.append(
            RolloutGroup(
                int(batch.prompt_ids[g0]),
                [batch.trajectory(i) for i in range(g0, g0 + K)],
                rewards[sl].copy(),
                a,
            )
        )
    return groups, adv


def _ratios(new_logps: np.ndarray, old_logps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(new_logps, dtype=np.float64) - np.asarray(old_logps, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        rho = np.exp(d)
    if not np.all(np.isfinite(rho)) or not np.all(np.isfinite(d)):
        raise PolicyDivergedError("non-finite importance ratio; aborting update")
    return d, rho


def surrogate_terms(rho: np.ndarray, advantage: np.ndarray | float, clip_eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-element clipped loss ``max(-A rho, -A clip(rho))`` and the unclipped-branch mask."""
    unclipped = -advantage * rho
    clipped = -advantage * np.clip(rho, 1.0 - clip_eps, 1.0 + clip_eps)
    use_unclipped = unclipped >= clipped
    return np.where(use_unclipped, unclipped, clipped), use_unclipped


def surrogate_loss(
    new_logps: Sequence[float], old_logps: Sequence[float], advantage: float, clip_eps: float
) -> float:
    """Mean over timesteps of the clipped loss (the negated PPO objective)."""
    _, rho = _ratios(new_logps, old_logps)
    loss, _ = surrogate_terms(rho, advantage, clip_eps)
    return float(np.mean(loss))


def kl_terms(log_ratio: np.ndarray) -> np.ndarray:
    """``(rho - 1) - log(rho)`` evaluated from ``log(rho)``."""
    return np.expm1(log_ratio) - log_ratio


def kl_penalty(new_logps: Sequence[float], old_logps: Sequence[float]) -> float:
    d, _ = _ratios(new_logps, old_logps)
    return float(np.mean(kl_terms(d)))


@dataclass
class TransitionSet:
    """Flattened (sample, timestep) pairs selected for optimization."""

    z_t: np.ndarray
    z_prev: np.ndarray
    t: np.ndarray
    prompt_ids: np.ndarray
    old_logp: np.ndarray
    adv: np.ndarray
    sample: np.ndarray  # originating row of the rollout batch

    @classmethod
    def from_batch(
        cls,
        batch: RolloutBatch,
        advantages: np.ndarray,
        steps: np.ndarray,
        order: np.ndarray | None = None,
    ) -> "TransitionSet":
        """``order`` is an ``(N, len(steps))`` permutation of steps per sample."""
        n = batch.n
        s = np.broadcast_to(steps, (n, steps.size)) if order is None else steps[order]
        rows = np.repeat(np.arange(n), steps.size)
        s = s.ravel()
        return cls(
            z_t=batch.latents[rows, s],
            z_prev=batch.latents[rows, s + 1],
            t=step_timesteps(batch.schedule.T)[s],
            prompt_ids=batch.prompt_ids[rows],
            old_logp=batch.logps[rows, s],
            adv=advantages[rows],
            sample=rows,
        )


@dataclass
class LossStats:
    loss: float
    surrogate: float
    kl: float
    clip_frac: float
    rho: np.ndarray


def grpo_loss_and_grad(
    model: DenoiserModel,
    params: np.ndarray,
    pairs: TransitionSet,
    schedule: NoiseSchedule,
    guidance: float,
    clip_eps: float,
    kl_coef: float,
    need_grad: bool = True,
) -> tuple[LossStats, np.ndarray | None]:
    """Mean over pairs of ``clipped surrogate + kl_coef * KL`` and its parameter gradient."""
    logp, cache = transition_logprob(
        model, params, schedule, guidance, pairs.z_t, pairs.z_prev, pairs.t, pairs.prompt_ids
    )
    d, rho = _ratios(logp, pairs.old_logp)
    surr, use_unclipped = surrogate_terms(rho, pairs.adv, clip_eps)
    kl = kl_terms(d)
    n = rho.size
    stats = LossStats(
        loss=float(np.mean(surr + kl_coef * kl)),
        surrogate=float(np.mean(surr)),
        kl=float(np.mean(kl)),
        clip_frac=float(np.mean(np.abs(rho - 1.0) > clip_eps)),
        rho=rho,
    )
    if not need_grad:
        return stats, None
    # d/dlogp of each term: surrogate -A*rho on the unclipped branch (0 when clipped), KL rho - 1
    g_logp = (np.where(use_unclipped, -pairs.adv * rho, 0.0) + kl_coef * (rho - 1.0)) / n
    return stats, transition_logprob_vjp(model, params, cache, g_logp)


@dataclass
class StepMetrics:
    step: int
    reward_mean_safe: float
    reward_mean_unsafe: float
    kl_mean: float
    clip_frac: float
    grad_norm: float
    unsafe_rate: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def train_step(
    model: DenoiserModel,
    params: np.ndarray,
    adam: AdamState,
    batch: RolloutBatch,
    advantages: np.ndarray,
    config: GrpoConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, AdamState, dict]:
    """Inner-epoch optimization over one rollout batch.

    Every epoch reshuffles the timestep order of each sample, accumulates
    the gradient over all selected (sample, timestep) pairs, clips it to
    ``grad_clip`` in global norm and applies one Adam step.
    """
    schedule = batch.schedule
    steps = config.trained_steps(schedule.T)
    clip_fracs, norms = [], []
    for _ in range(config.inner_epochs):
        order = np.argsort(rng.random((batch.n, steps.size)), axis=1)
        pairs = TransitionSet.from_batch(batch, advantages, steps, order)
        stats, grad = grpo_loss_and_grad(
            model, params, pairs, schedule, batch.guidance, config.clip_eps, config.kl_coef
        )
        grad, norm = clip_grad_norm(grad, config.grad_clip)
        params, adam = adam_step(
            params, grad, adam, config.lr, config.beta1, config.beta2, config.adam_eps
        )
        clip_fracs.append(stats.clip_frac)
        norms.append(norm)
    final, _ = grpo_loss_and_grad(
        model,
        params,
        TransitionSet.from_batch(batch, advantages, steps),
        schedule,
        batch.guidance,
        config.clip_eps,
        config.kl_coef,
        need_grad=False,
    )
    metrics = {
        "kl_mean": final.kl,
        "clip_frac": float(np.mean(clip_fracs)),
        "grad_norm": float(np.mean(norms)),
    }
    if final.kl > config.kl_abort:
        raise PolicyDivergedError(
            f"KL to rollout snapshot {final.kl:.4g} exceeds abort threshold {config.kl_abort}; "
            f"grad norms {norms}, clip fractions {clip_fracs}"
        )
    return params, adam, metrics


@dataclass
class TrainResult:
    params: np.ndarray
    adam: AdamState
    history: list[StepMetrics]


def rollout_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def train_run(
    model: DenoiserModel,
    task: TaskSpec,
    reward: RewardModel,
    schedule: NoiseSchedule,
    config: GrpoConfig,
    epochs: int,
    seed: int = 0,
    guidance: float = 1.0,
    metrics_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    config_hash: bytes = b"\0" * 32,
    on_step: Callable[[StepMetrics, np.ndarray], None] | None = None,
) -> TrainResult:
    """Alternate rollout -> advantages -> inner-epoch update for ``epochs`` steps."""
    if schedule.eta <= 0:
        raise ValueError("training needs a stochastic sampler (eta > 0)")
    params = model.params.copy()
    adam = AdamState.like(params)
    history: list[StepMetrics] = []
    prompt_ids = list(range(task.n_prompts))
    unsafe_mask_prompt = np.asarray(task.unsafe_labels)

    metrics_file = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        metrics_file = open(metrics_path, "w", encoding="utf-8")
    try:
        for step in range(epochs):
            snapshot = params.copy()
            batch = sample_rollouts(
                model, snapshot, prompt_ids, config.K, schedule, guidance,
                rollout_seed(seed, step), config.shared_noise,
            )
            rewards = reward(batch.x0, batch.prompt_ids)
            _, adv = make_groups(batch, rewards, config)
            params, adam, m = train_step(
                model, params, adam, batch, adv, config, np.random.default_rng([seed, step, 1])
            )
            is_unsafe = unsafe_mask_prompt[batch.prompt_ids]
            flagged = oracle_unsafe(batch.x0[is_unsafe], task) > 0.6
            sm = StepMetrics(
                step=step,
                reward_mean_safe=float(rewards[~is_unsafe].mean()),
                reward_mean_unsafe=float(rewards[is_unsafe].mean()),
                kl_mean=m["kl_mean"],
                clip_frac=m["clip_frac"],
                grad_norm=m["grad_norm"],
                unsafe_rate=float(flagged.mean()),
            )
            history.append(sm)
            if metrics_file is not None:
                metrics_file.write(sm.to_json() + "\n")
            if on_step is not None:
                on_step(sm, params)
            if checkpoint_dir is not None and checkpoint_every > 0 and (step + 1) % checkpoint_every == 0:
                write_checkpoint(
                    Path(checkpoint_dir) / f"step{step + 1:05d}.ckpt",
                    params, model.net.sizes, config_hash, step + 1,
                )
            log.debug("step %d: %s", step, sm)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return TrainResult(params, adam, history)
