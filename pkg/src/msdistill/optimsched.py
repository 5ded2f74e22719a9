"""Training configuration, cosine warm-restart learning rate, and momentum SGD."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Mapping

import torch

from .augment import AugmentConfig
from .viewsampler import PolicyKind, SamplingPolicy


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    lr_min: float = 0.002
    lr_max: float = 0.2
    warm_period_epochs: int = 10
    period_multiplier: int = 2
    weight_decay: float = 1e-5
    momentum: float = 0.9
    tau: float = 0.9
    policy: SamplingPolicy = field(default_factory=SamplingPolicy)
    seed: int = 0
    # model shape
    width: int = 32
    depth_blocks: int = 3
    hidden_dim: int = 256
    proj_dim: int = 64
    # pipeline
    out_size: int | None = None  # None: patch size
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    checkpoint_every: int = 10
    ablate_stop_gradient: bool = False
    debug_checks: bool = False
    log_wall_time: bool = False
    collapse_probe_size: int = 256

    def __post_init__(self):
        if isinstance(self.policy, Mapping):
            self.policy = SamplingPolicy(
                PolicyKind(self.policy["kind"]), tuple(self.policy.get("rgb_band_ids", (2, 1, 0)))
            )
        if isinstance(self.augment, Mapping):
            self.augment = AugmentConfig.from_mapping(self.augment)
        self.validate()

    def validate(self):
        if not 0 < self.lr_min < self.lr_max:
            raise ValueError("need 0 < lr_min < lr_max")
        if self.warm_period_epochs < 1 or self.period_multiplier < 1:
            raise ValueError("warm_period_epochs and period_multiplier must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch normalization")
        if not 0 <= self.tau < 1:
            raise ValueError("tau must lie in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["policy"] = {"kind": self.policy.kind.value, "rgb_band_ids": list(self.policy.rgb_band_ids)}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def restart_epochs(cfg: TrainConfig, horizon: float) -> list[int]:
    """Epochs in [0, horizon) where a new warm-restart period begins."""
    out, start, period = [], 0, cfg.warm_period_epochs
    while start < horizon:
        out.append(start)
        start += period
        period *= cfg.period_multiplier
    return out


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Cosine annealing from lr_max to lr_min, restarting with periods T0, T0*m, T0*m^2, ..."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    start, period = 0, cfg.warm_period_epochs
    while epoch >= start + period:
        start += period
        period *= cfg.period_multiplier
    t_cur = epoch - start
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi * t_cur / period))


class NonFiniteGradient(FloatingPointError):
    pass


def no_decay(name: str, p: torch.Tensor) -> bool:
    # biases and batch-norm scale/offset are the 1-D parameters
    return p.dim() <= 1


class SGD:
    """Momentum SGD with L2 weight decay folded into the velocity.

    ``v <- momentum * v + (grad + wd * param)``; ``param <- param - lr * v``.
    Weight decay is skipped for biases and batch-norm parameters.
    """

    def __init__(self, params: Mapping[str, torch.Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = dict(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {k: torch.zeros_like(p) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float, grads: Mapping[str, torch.Tensor] | None = None):
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items()}
        for name, g in grads.items():
            if g is None:
                raise ValueError(f"no gradient for parameter {name!r}")
            if not torch.isfinite(g).all():
                raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        for name, p in self.params.items():
            d = grads[name]
            if self.weight_decay and not no_decay(name, p):
                d = d + self.weight_decay * p
            v = self.buffers[name]
            v.mul_(self.momentum).add_(d)
            p.sub_(lr * v)


def sgd_step(params, grads, lr, cfg: TrainConfig, state: SGD | None = None) -> SGD:
    """Functional wrapper: one step on ``params`` with ``grads``; returns the optimizer state."""
    state = state or SGD(params, cfg.momentum, cfg.weight_decay)
    state.step(lr, grads)
    return state
