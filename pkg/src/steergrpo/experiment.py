"""Wiring between a RunConfig and the numeric modules: build, train, evaluate."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from .config import RunConfig, dump_config
from .diffuser import DenoiserModel, DiffusionPolicy, NoiseSchedule, pretrain_denoiser
from .embedspace import SyntheticEncoder, steer, text_safety_score
from .grpo import TrainResult, train_run
from .reward import RewardModel, RewardSpec
from .synthlab import TaskSpec, make_task, unsafe_rate, utility_score

log = logging.getLogger(__name__)

# Base models are deterministic in their inputs, so repeated runs in one
# process (ablations, tests) share them.
_BASE_CACHE: dict[tuple, DenoiserModel] = {}


@dataclass
class Setup:
    cfg: RunConfig
    task: TaskSpec
    enc: SyntheticEncoder
    reward: RewardModel
    schedule: NoiseSchedule
    base: DenoiserModel


def make_schedule(cfg: RunConfig, T: int | None = None, eta: float | None = None) -> NoiseSchedule:
    s = cfg.schedule
    return NoiseSchedule.log_linear(
        s.T if T is None else T,
        s.eta if eta is None else eta,
        alpha_bar_max=s.alpha_bar_max,
        alpha_bar_min=s.alpha_bar_min,
    )


def base_model(cfg: RunConfig, task: TaskSpec) -> DenoiserModel:
    p = cfg.pretrain
    s = cfg.schedule
    key = (
        task.preset, task.seed, cfg.seed, p, s.alpha_bar_max, s.alpha_bar_min,
    )
    if key not in _BASE_CACHE:
        model = DenoiserModel.create(task.n_prompts, p.hidden, latent_dim=task.data_dim, seed=cfg.seed)
        _BASE_CACHE[key] = pretrain_denoiser(
            model, task.centers, task.mode_std,
            steps=p.steps, batch_size=p.batch_size, lr=p.lr, cond_dropout=p.cond_dropout,
            alpha_bar_max=s.alpha_bar_max, alpha_bar_min=s.alpha_bar_min, seed=cfg.seed,
        )
    return _BASE_CACHE[key]


def build(cfg: RunConfig) -> Setup:
    task = make_task(cfg.task.preset, cfg.task.seed)
    enc = SyntheticEncoder.from_seed(cfg.encoder.dim, task.data_dim, cfg.encoder.seed, cfg.encoder.scale)
    reward = RewardModel(cfg.reward, enc, task.centers, task.anchors())
    return Setup(cfg, task, enc, reward, make_schedule(cfg), base_model(cfg, task))


def evaluate(setup: Setup, params: np.ndarray, schedule: NoiseSchedule | None = None) -> dict:
    """Held-fixed Monte-Carlo metrics of a parameter vector."""
    cfg = setup.cfg
    policy = DiffusionPolicy(setup.base, params, schedule or setup.schedule, cfg.guidance)
    n = cfg.eval.n_samples
    return {
        "unsafe_rate": unsafe_rate(
            policy, setup.task.unsafe_ids, setup.task, n, rng=np.random.default_rng([cfg.eval.seed, 0])
        ),
        "utility_score": utility_score(
            policy, setup.task.safe_ids, setup.task, setup.enc, n,
            rng=np.random.default_rng([cfg.eval.seed, 1]),
        ),
    }


def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def run_training(cfg: RunConfig, out_dir: str | Path) -> tuple[dict, TrainResult]:
    """Train one configuration and write its artifacts under ``out_dir``.

    Files: ``config.yaml`` (effective config), ``metrics.jsonl`` (one line per
    step), ``eval.jsonl`` (when ``eval.every > 0``), ``checkpoints/`` and
    ``final.ckpt``, and ``summary.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    setup = build(cfg)
    digest = cfg.digest()
    eval_rows: list[dict] = []

    def on_step(m, params: np.ndarray) -> None:
        if cfg.eval.every and (m.step + 1) % cfg.eval.every == 0:
            eval_rows.append({"step": m.step + 1, **evaluate(setup, params)})

    result = train_run(
        setup.base, setup.task, setup.reward, setup.schedule, cfg.grpo, cfg.epochs,
        seed=cfg.seed, guidance=cfg.guidance, metrics_path=out / "metrics.jsonl",
        checkpoint_dir=out / "checkpoints", checkpoint_every=cfg.checkpoint_every,
        config_hash=digest, on_step=on_step,
    )
    write_checkpoint(out / "final.ckpt", result.params, setup.base.net.sizes, digest, cfg.epochs)
    if eval_rows:
        with open(out / "eval.jsonl", "w", encoding="utf-8") as fh:
            for row in eval_rows:
                fh.write(json.dumps(row) + "\n")
    final = evaluate(setup, result.params)
    summary = {
        "final_unsafe_rate": final["unsafe_rate"],
        "final_utility": final["utility_score"],
        "epochs": cfg.epochs,
    }
    _write_json(out / "summary.json", summary)
    return summary, result


def load_params(setup: Setup, path: str | Path) -> Checkpoint:
    ck = read_checkpoint(path)
    if tuple(ck.sizes) != tuple(setup.base.net.sizes):
        raise ValueError(
            f"{path}: layer sizes {ck.sizes} do not match the configured model {setup.base.net.sizes}"
        )
    if ck.config_hash != setup.cfg.digest():
        log.warning("%s was written under a different configuration", path)
    return ck


def steer_sweep(setup: Setup, alphas: Sequence[float]) -> list[dict]:
    """Safety score of every prompt embedding before and after steering by each alpha."""
    rows = []
    v = setup.reward.v_safe
    for i, name in enumerate(setup.task.names):
        z = setup.reward.z_text[i]
        before = text_safety_score(z, v)
        for a in alphas:
            rows.append({
                "prompt_id": name,
                "label": "unsafe" if setup.task.unsafe_labels[i] else "safe",
                "alpha": float(a),
                "score_before": before,
                "score_after": text_safety_score(steer(z, v, a), v),
            })
    return rows


def ablate_reward(cfg: RunConfig, variants: Sequence[str], out_dir: str | Path, workers: int = 1) -> list[dict]:
    """Train each reward variant from the same seed; one row per variant."""
    out = Path(out_dir)
    jobs = [
        (cfg.replace(reward=RewardSpec(v, cfg.reward.alpha, cfg.reward.lambda_neg)), out / v)
        for v in variants
    ]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            summaries = list(pool.map(_summary_only, jobs))
    else:
        summaries = [_summary_only(job) for job in jobs]
    return [
        {"variant": v, "unsafe_rate": s["final_unsafe_rate"], "utility_score": s["final_utility"]}
        for v, s in zip(variants, summaries)
    ]


def _summary_only(job: tuple[RunConfig, Path]) -> dict:
    return run_training(*job)[0]


def ablate_sampler(
    setup: Setup, params: np.ndarray, etas: Sequence[float], steps: Sequence[int]
) -> list[dict]:
    rows = []
    for eta in etas:
        for T in steps:
            m = evaluate(setup, params, make_schedule(setup.cfg, T=int(T), eta=float(eta)))
            rows.append({"eta": float(eta), "T": int(T), **m})
    return rows
