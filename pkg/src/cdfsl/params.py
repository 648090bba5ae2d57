"""Named parameter collections and the SGD update."""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, ValidationError
from .tensor import Tensor


def group_of(name: str) -> str:
    """Parameter group used for per-group learning-rate scaling."""
    if name.startswith("head."):
        return "head"
    if name.startswith("decoder."):
        return "decoder"
    return "encoder"


class ModelParams(dict):
    """Ordered ``name -> Tensor`` map. Every entry is a trainable leaf."""

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], requires_grad: bool = True) -> "ModelParams":
        return cls((k, Tensor(v, requires_grad=requires_grad, name=k)) for k, v in arrays.items())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.items()}

    def copy(self, requires_grad: bool = True) -> "ModelParams":
        return ModelParams.from_arrays({k: t.data for k, t in self.items()}, requires_grad)

    def select(self, groups: Iterable[str]) -> "ModelParams":
        wanted = set(groups)
        return ModelParams((k, t) for k, t in self.items() if group_of(k) in wanted)

    def without(self, groups: Iterable[str]) -> "ModelParams":
        unwanted = set(groups)
        return ModelParams((k, t) for k, t in self.items() if group_of(k) not in unwanted)

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray | None]:
        return {k: t.grad for k, t in self.items()}

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.values())

    def n_elements(self) -> int:
        return sum(t.size for t in self.values())


def l2_distance(a: ModelParams, b: ModelParams) -> float:
    if a.keys() != b.keys():
        raise ConsistencyError("parameter name sets differ")
    return float(np.sqrt(sum(np.sum((a[k].data - b[k].data) ** 2) for k in a)))


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate_base: float
    weight_decay: float = 0.0
    momentum: float = 0.0

    def __post_init__(self):
        if not self.learning_rate_base > 0:
            raise ValidationError("learning_rate_base must be positive")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must lie in [0, 1)")


def sgd_step(
    params: ModelParams,
    grads: Mapping[str, np.ndarray | None],
    cfg: OptimizerConfig,
    lr_scale_per_group: Mapping[str, float] | None = None,
    momentum_buffers: dict[str, np.ndarray] | None = None,
) -> ModelParams:
    """Descent step ``theta -= lr * scale * (grad + wd * theta)``, in place.

    With momentum the direction goes through the buffer ``v = mu * v + d``.
    A group with scale 0 is skipped outright, buffers included, so its values
    stay bit-identical.
    """
    scales = lr_scale_per_group or {}
    if cfg.momentum > 0 and momentum_buffers is None:
        raise ValidationError("momentum > 0 needs a momentum_buffers dict to carry state")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ConsistencyError(f"missing gradient for trainable parameter {name!r}")
        if g.shape != p.shape:
            raise ConsistencyError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        scale = float(scales.get(group_of(name), 1.0))
        if scale == 0.0:
            continue
        direction = g + cfg.weight_decay * p.data if cfg.weight_decay else g
        if cfg.momentum > 0:
            buf = momentum_buffers.get(name)
            buf = direction.copy() if buf is None else cfg.momentum * buf + direction
            momentum_buffers[name] = buf
            direction = buf
        p.data -= (cfg.learning_rate_base * scale) * direction
    return params
