"""Seeded AdamW training loop over (embeddings, query, targets) samples."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import math

import numpy as np

from ..encode import SizeTargets
from ..grid import Heatmap
from ..losses import FocalParams, LossWeights, gaussian_focal_loss, size_l1_loss, total_loss
from .model import AlignerModel, aligner_backward, aligner_forward


@dataclass(frozen=True, eq=False)
class TrainSample:
    image_embeddings: np.ndarray
    loc_embedding: np.ndarray
    target: Heatmap
    size: SizeTargets


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 3e-4
    batch_size: int = 4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    focal: FocalParams = field(default_factory=FocalParams)

    def __post_init__(self) -> None:
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")


def sample_loss_and_grads(
    model: AlignerModel, sample: TrainSample, cfg: TrainConfig
) -> tuple[float, dict[str, np.ndarray]]:
    """Total weighted loss of one sample plus parameter gradients."""
    output, cache = aligner_forward(model, sample.image_embeddings, sample.loc_embedding)
    pred = output.heatmap
    focal, d_pred = gaussian_focal_loss(pred, sample.target, cfg.focal)
    size, (d_h, d_w) = size_l1_loss(output.h_map, output.w_map, sample.size)
    loss = total_loss(focal, size, cfg.weights)

    # chain through the sigmoid: d loss / d logits = d loss / d p * p (1 - p)
    p = pred.data
    d_logits = cfg.weights.lambda_h * d_pred * p * (1.0 - p)
    grads, _ = aligner_backward(
        model,
        cache,
        d_logits,
        cfg.weights.lambda_size * d_h,
        cfg.weights.lambda_size * d_w,
    )
    return loss, grads


def train(
    model: AlignerModel,
    dataset: Sequence[TrainSample],
    cfg: TrainConfig = TrainConfig(),
) -> tuple[AlignerModel, list[float]]:
    """Fit the model in place with AdamW; returns it with the loss curve.

    Deterministic for a fixed seed: batches are drawn from a dedicated
    generator and every reduction is order-stable.  Raises on divergence.
    """
    if len(dataset) == 0:
        raise ValueError("training needs a nonempty dataset")
    rng = np.random.default_rng(cfg.seed)
    moment1 = {k: np.zeros_like(v) for k, v in model.params.items()}
    moment2 = {k: np.zeros_like(v) for k, v in model.params.items()}
    curve: list[float] = []

    for step in range(cfg.steps):
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        batch_loss = 0.0
        accum: dict[str, np.ndarray] | None = None
        for i in idx:
            loss, grads = sample_loss_and_grads(model, dataset[int(i)], cfg)
            batch_loss += loss
            if accum is None:
                accum = grads
            else:
                for k in accum:
                    accum[k] += grads[k]
        assert accum is not None
        batch_loss /= cfg.batch_size
        if not math.isfinite(batch_loss):
            raise RuntimeError(f"loss diverged at step {step}")
        curve.append(batch_loss)

        t = step + 1
        bias1 = 1.0 - cfg.beta1**t
        bias2 = 1.0 - cfg.beta2**t
        for k, param in model.params.items():
            g = accum[k] / cfg.batch_size
            moment1[k] = cfg.beta1 * moment1[k] + (1.0 - cfg.beta1) * g
            moment2[k] = cfg.beta2 * moment2[k] + (1.0 - cfg.beta2) * g * g
            update = (moment1[k] / bias1) / (np.sqrt(moment2[k] / bias2) + cfg.adam_eps)
            if cfg.weight_decay > 0.0:
                param -= cfg.lr * cfg.weight_decay * param
            param -= cfg.lr * update
        model.bump_version()
    return model, curve
