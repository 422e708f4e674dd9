"""Adam and the single training step."""

from dataclasses import dataclass, field

import numpy as np


class TrainingDivergence(RuntimeError):
    """Loss or gradients became non-finite."""

    def __init__(self, step, detail):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup: int = 100
    grad_clip: float = field(default=1.0)

    def lr_at(self, step):
        """Linear warmup to ``lr`` over ``warmup`` steps, constant afterwards."""
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(1.0, step / self.warmup)


def adam_update(params, grads, state, cfg):
    state.step += 1
    t = state.step
    lr = cfg.lr_at(t)
    scale = 1.0
    if cfg.grad_clip and cfg.grad_clip > 0:
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name] * scale
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if lr:
            p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def train_step(model, batch, state, cfg):
    """One Adam step on ``batch = (tokens, targets, weights)``; returns the loss."""
    tokens, targets, weights = batch
    loss, grads = model.loss_and_grads(tokens, targets, weights)
    step = state.step + 1
    if not np.isfinite(loss):
        raise TrainingDivergence(step, f"loss={loss}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(step, f"non-finite gradient in {name}")
    adam_update(model.params, grads, state, cfg)
    return loss
