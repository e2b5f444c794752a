"""Stochastic channel gates.

Each gate keeps a learnable logit `nu`; the keep probability is
pi = sigmoid(nu). A relaxed mask sample is

    m = sigmoid((nu + l) / tau),   l ~ Logistic(0, 1)

which approaches a Bernoulli(pi) draw as the temperature tau -> 0, while
staying differentiable in nu: dm/dnu = m * (1 - m) / tau. The same relaxed
sample is used for both the forward and the backward pass.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

TAU_DEFAULT = 0.001
NU_INIT_DEFAULT = 2.5
_UCLIP = 1e-7  # uniform draws clamped away from {0,1} before the logit


def sigmoid(x):
    """Numerically stable sigmoid for scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


@dataclass
class NoiseDraw:
    """A standard-logistic sample and the uniform it came from."""
    u: np.ndarray | float
    ell: np.ndarray | float


@dataclass
class MaskGate:
    group: str
    nu: float

    @property
    def keep_prob(self) -> float:
        return float(sigmoid(self.nu))


def sample_logistic(rng: np.random.Generator, size=None) -> NoiseDraw:
    """Draw Logistic(0,1) noise via the inverse CDF of a clamped uniform."""
    u = np.clip(rng.random(size), _UCLIP, 1.0 - _UCLIP)
    return NoiseDraw(u, np.log(u) - np.log(1.0 - u))


def relaxed_mask(nu, ell, tau: float):
    """Relaxed mask sample in (0,1); strictly increasing in nu and ell."""
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    return sigmoid((np.asarray(nu) + np.asarray(ell)) / tau)


def keep_prob(nu):
    return sigmoid(nu)


def hard_sample(nu, rng: np.random.Generator, size=None):
    """Exact Bernoulli(sigmoid(nu)) draw."""
    return (rng.random(size) < sigmoid(nu)).astype(np.float64)


def mask_logit_grad(m, tau: float):
    """d(mask)/d(nu) for a relaxed sample m."""
    m = np.asarray(m)
    return m * (1.0 - m) / tau


class GateSet:
    """Vectorized gates for the learnable groups of one run.

    Groups flagged always-on are not represented here; callers supply a
    fixed mask value of 1.0 for them.
    """

    def __init__(self, groups: list[str], nu_init: float = NU_INIT_DEFAULT,
                 tau: float = TAU_DEFAULT):
        if tau <= 0:
            raise ConfigurationError(f"temperature must be positive, got {tau}")
        self.groups = list(groups)
        self.index = {g: i for i, g in enumerate(self.groups)}
        self.nu = np.full(len(self.groups), float(nu_init))
        self.tau = float(tau)

    def __len__(self):
        return len(self.groups)

    def keep_probs(self) -> np.ndarray:
        return sigmoid(self.nu)

    def pi_map(self) -> dict[str, float]:
        pi = self.keep_probs()
        return {g: float(pi[i]) for i, g in enumerate(self.groups)}

    def sample_noise(self, rng: np.random.Generator) -> NoiseDraw:
        return sample_logistic(rng, size=len(self.groups))

    def relaxed(self, noise: NoiseDraw) -> np.ndarray:
        return relaxed_mask(self.nu, noise.ell, self.tau)

    def hard(self, rng: np.random.Generator) -> np.ndarray:
        return hard_sample(self.nu, rng)

    def mask_map(self, values: np.ndarray) -> dict[str, float]:
        return {g: float(values[i]) for i, g in enumerate(self.groups)}

    def logit_grads(self, mask_grads: dict[str, float],
                    masks: np.ndarray) -> np.ndarray:
        """Chain d(loss)/d(mask) through the relaxation to d(loss)/d(nu)."""
        dnu = np.zeros(len(self.groups))
        factor = mask_logit_grad(masks, self.tau)
        for g, grad in mask_grads.items():
            i = self.index.get(g)
            if i is not None:
                dnu[i] += grad * factor[i]
        return dnu

    # snapshot of keep probabilities, e.g. for export or debugging
    def save_pi(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.pi_map(), indent=2, sort_keys=True))

    def state_dict(self) -> dict:
        return {"groups": self.groups, "nu": self.nu.tolist(), "tau": self.tau}

    @classmethod
    def from_state(cls, state: dict) -> "GateSet":
        gs = cls(state["groups"], tau=state["tau"])
        gs.nu = np.asarray(state["nu"], dtype=np.float64)
        return gs
