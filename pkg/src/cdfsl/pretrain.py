"""Stage 1: masked-autoencoder pretraining on unlabeled source + target clips."""

from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .data import Datasets
from .errors import NumericError, TrainingError, ValidationError
from .model import ModelConfig, init_encoder, mae_forward, sample_mask
from .params import ModelParams, OptimizerConfig, sgd_step


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.1
    mask_ratio: float = 0.75
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValidationError("mask_ratio must lie in (0, 1)")

    @property
    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.learning_rate, self.weight_decay, self.momentum)


@dataclass
class PretrainState:
    """Everything needed to continue training after ``epoch`` completed epochs."""

    params: ModelParams
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    log: list[dict] = field(default_factory=list)

    @property
    def encoder(self) -> ModelParams:
        return self.params.without(["decoder"])


def unlabeled_pool(data: Datasets) -> np.ndarray:
    """Clips of D_S and D_T_U stacked together; labels are never touched."""
    return np.concatenate([data.source.clips(), data.target_unlabeled.clips()], axis=0)


def init_pretrain_state(model_cfg: ModelConfig, cfg: PretrainConfig) -> PretrainState:
    return PretrainState(init_encoder(model_cfg, rngmod.stream(cfg.seed, "init", "encoder"), decoder=True))


def run_pretraining(
    data: Datasets,
    model_cfg: ModelConfig,
    cfg: PretrainConfig,
    state: PretrainState | None = None,
    on_epoch: Callable[[PretrainState, dict], None] | None = None,
) -> PretrainState:
    """Train encoder and decoder on the masked reconstruction loss.

    Batch order and mask plans come from streams keyed by (seed, epoch, batch),
    so continuing from a saved state reproduces an uninterrupted run exactly.
    ``on_epoch`` is called after every epoch with the state and its log record.
    """
    state = state or init_pretrain_state(model_cfg, cfg)
    pool = unlabeled_pool(data)
    n = len(pool)
    if n == 0:
        raise ValidationError("nothing to pretrain on")
    bs = min(cfg.batch_size, n)
    L = model_cfg.clip.token_count
    opt = cfg.optimizer
    params = state.params

    for epoch in range(state.epoch, cfg.epochs):
        start = time.perf_counter()
        order = rngmod.stream(cfg.seed, "pretrain", "order", epoch).permutation(n)
        losses = []
        try:
            for b, i in enumerate(range(0, n, bs)):
                idx = order[i : i + bs]
                mrng = rngmod.stream(cfg.seed, "pretrain", "mask", epoch, b)
                plans = [sample_mask(L, cfg.mask_ratio, mrng) for _ in idx]
                params.zero_grad()
                loss = mae_forward(pool[idx], model_cfg.clip, params, model_cfg.encoder, plans)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError("reconstruction loss is not finite", epoch)
                loss.backward()
                sgd_step(params, params.grads(), opt, momentum_buffers=state.momentum)
                losses.append(value)
        except NumericError as exc:
            raise TrainingError(f"values overflowed during training: {exc}", epoch) from exc
        if not params.all_finite():
            raise TrainingError("parameters became non-finite", epoch)
        record = {
            "epoch": epoch,
            "mse_loss": float(np.mean(losses)),
            "wall_ms": round((time.perf_counter() - start) * 1000.0, 3),
        }
        state.log.append(record)
        state.epoch = epoch + 1
        if on_epoch is not None:
            on_epoch(state, record)
    params.zero_grad()
    return state
