"""ADAM with decoupled weight decay.

Defaults follow the training setup used throughout: beta1=0.9, beta2=0.999
and a large eps=1.0, with weight decay 1.7e-5 applied to weight tensors
but never to gate logits.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.0
    weight_decay: float = 0.0

    @classmethod
    def from_partial(cls, **kwargs) -> "AdamConfig":
        """Build a config, keeping defaults for omitted hyperparameters."""
        return cls(**{k: v for k, v in kwargs.items() if v is not None})


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, cfg: AdamConfig, lr: float | None = None,
              decay_filter=None) -> None:
    """One in-place ADAM update on every tensor that received a gradient.

    `decay_filter(name)` selects which tensors get decoupled weight decay;
    by default all updated tensors do. The step counter increments before
    bias correction. A non-finite gradient aborts the whole step.
    """
    lr = cfg.lr if lr is None else lr
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter '{name}'")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay and (decay_filter is None or decay_filter(name)):
            p -= lr * cfg.weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
