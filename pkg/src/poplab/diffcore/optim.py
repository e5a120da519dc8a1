"""Adam-style optimizer with cosine learning-rate decay.

Weight decay is decoupled from the gradient step and is *not* scaled by
the scheduled learning rate: at lr == 0 a step still shrinks every
decayed parameter by the decay factor. Bias/gain parameters (names
ending in ``.b``, ``.beta``, ``.gamma``) and anything listed in
``no_decay`` are exempt from decay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ParameterError
from .layers import ParamStore

_NO_DECAY_SUFFIXES = (".b", ".beta", ".gamma", ".bz", ".br", ".bn")


@dataclass
class OptimizerConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ParameterError("lr and weight_decay must be non-negative")
        if self.total_steps < 1:
            raise ParameterError("total_steps must be >= 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ParameterError("betas must lie in [0, 1)")


def cosine_lr(step: int, cfg: OptimizerConfig) -> float:
    """lr(step) = 0.5 * lr0 * (1 + cos(pi * step / total_steps)).

    lr(0) == lr0 and lr(total_steps) == 0 exactly (up to fp rounding).
    """
    frac = min(max(step, 0), cfg.total_steps) / cfg.total_steps
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * frac))


class Optimizer:
    """Stateful parameter updater over one ParamStore.

    update per tensor p with gradient g:
        m <- b1 m + (1-b1) g          (bias-corrected)
        v <- b2 v + (1-b2) g^2        (bias-corrected)
        p <- p - lr(step) * m_hat / (sqrt(v_hat) + eps) - wd * p
    Parameters with no gradient this step are still decayed.
    """

    def __init__(self, store: ParamStore, cfg: OptimizerConfig,
                 no_decay: tuple = (), frozen: tuple = ()):
        """``frozen`` lists name prefixes that this optimizer must never
        touch (no gradient step, no decay) — e.g. a pretrained branch."""
        self.store = store
        self.cfg = cfg
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._frozen = {
            name: name.startswith(tuple(frozen)) if frozen else False
            for name in store.names()
        }
        self._decayed = {
            name: not (name.endswith(_NO_DECAY_SUFFIXES) or name in no_decay)
            for name in store.names()
        }

    def current_lr(self) -> float:
        return cosine_lr(self.step_count, self.cfg)

    def step(self) -> float:
        """Apply one update using the accumulated grads; returns the lr used."""
        lr = self.current_lr()
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        self.step_count += 1
        t = self.step_count
        for name, p in self.store.items():
            if self._frozen[name]:
                continue
            g = p.grad
            if g is not None:
                m = self._m.get(name)
                v = self._v.get(name)
                if m is None:
                    m = np.zeros_like(p.data)
                    v = np.zeros_like(p.data)
                m = b1 * m + (1.0 - b1) * g
                v = b2 * v + (1.0 - b2) * g * g
                self._m[name] = m
                self._v[name] = v
                m_hat = m / (1.0 - b1**t)
                v_hat = v / (1.0 - b2**t)
                p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
            if self._decayed[name] and self.cfg.weight_decay > 0.0:
                p.data = p.data - self.cfg.weight_decay * p.data
        return lr
