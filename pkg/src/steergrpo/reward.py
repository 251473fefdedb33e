"""Rewards on generated samples: safety-steered cosine plus ablation variants."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedspace import (
    AnchorSet,
    SafetyDirection,
    SyntheticEncoder,
    build_safety_direction,
    steer,
    text_safety_score,
)

VARIANTS = ("steered", "plain_cosine", "safeclip_posneg", "neg_only")


@dataclass(frozen=True)
class RewardSpec:
    variant: str = "steered"
    alpha: float = 0.5
    lambda_neg: float = 1.0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown reward variant {self.variant!r}; choose from {VARIANTS}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.lambda_neg < 0:
            raise ValueError("lambda_neg must be >= 0")


def plain_cosine(x: np.ndarray, prompt_point: np.ndarray, enc: SyntheticEncoder) -> float:
    return float(enc.encode(x) @ enc.encode(prompt_point))


def steered_target(z_text: np.ndarray, v_safe: SafetyDirection, alpha: float) -> np.ndarray:
    """Prompt embedding used for scoring: steered only when the prompt scores unsafe."""
    if text_safety_score(z_text, v_safe) < 0:
        return steer(z_text, v_safe, alpha)
    return z_text


def steered_reward(
    x: np.ndarray,
    prompt_point: np.ndarray,
    enc: SyntheticEncoder,
    v_safe: SafetyDirection,
    alpha: float,
) -> float:
    z_img = enc.encode(x)
    return float(z_img @ steered_target(enc.encode(prompt_point), v_safe, alpha))


def safeclip_posneg(
    x: np.ndarray,
    prompt_point: np.ndarray,
    enc: SyntheticEncoder,
    pos_anchors: np.ndarray,
    neg_anchors: np.ndarray,
    lambda_neg: float = 1.0,
) -> float:
    """Prompt cosine + mean positive-anchor cosine - lambda * worst negative-anchor cosine.

    An empty positive set contributes nothing; an empty negative set (or
    ``lambda_neg == 0``) disables the penalty.
    """
    z_img = enc.encode(x)
    r = float(z_img @ enc.encode(prompt_point))
    pos = np.asarray(pos_anchors, dtype=np.float64).reshape(-1, enc.data_dim)
    neg = np.asarray(neg_anchors, dtype=np.float64).reshape(-1, enc.data_dim)
    if pos.shape[0]:
        r += float(np.mean(enc.encode(pos) @ z_img))
    if neg.shape[0] and lambda_neg > 0:
        r -= lambda_neg * float(np.max(enc.encode(neg) @ z_img))
    return r


def neg_only(x: np.ndarray, neg_anchors: np.ndarray, enc: SyntheticEncoder) -> float:
    z_img = enc.encode(x)
    neg = np.asarray(neg_anchors, dtype=np.float64).reshape(-1, enc.data_dim)
    return -float(np.max(enc.encode(neg) @ z_img))


class RewardModel:
    """Batched reward over ``(sample, prompt)`` pairs for one fixed configuration.

    Prompt targets, anchor embeddings and the safety direction are computed
    once at construction. The steered targets affect scoring only; samplers
    keep receiving the original prompt conditioning.
    """

    def __init__(
        self,
        spec: RewardSpec,
        enc: SyntheticEncoder,
        prompt_points: np.ndarray,
        anchors: AnchorSet,
    ) -> None:
        self.spec = spec
        self.enc = enc
        self.anchors = anchors
        self.v_safe = build_safety_direction(enc, anchors)
        self.z_text = enc.encode(prompt_points)
        self.text_scores = self.z_text @ self.v_safe.vector
        self.z_pos = enc.encode(anchors.safe)
        self.z_neg = enc.encode(anchors.unsafe)
        if spec.variant == "steered":
            self.targets = np.array(
                [steered_target(z, self.v_safe, spec.alpha) for z in self.z_text]
            )
        else:
            self.targets = self.z_text

    @property
    def steered_mask(self) -> np.ndarray:
        return self.text_scores < 0

    def __call__(self, x: np.ndarray, prompt_ids: np.ndarray) -> np.ndarray:
        z_img = self.enc.encode(np.atleast_2d(x))
        ids = np.asarray(prompt_ids, dtype=np.int64)
        v = self.spec.variant
        if v in ("steered", "plain_cosine"):
            return np.sum(z_img * self.targets[ids], axis=1)
        if v == "neg_only":
            return -np.max(z_img @ self.z_neg.T, axis=1)
        r = np.sum(z_img * self.z_text[ids], axis=1)
        r = r + np.mean(z_img @ self.z_pos.T, axis=1)
        if self.spec.lambda_neg > 0:
            r = r - self.spec.lambda_neg * np.max(z_img @ self.z_neg.T, axis=1)
        return r
