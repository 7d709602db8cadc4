"""
Optimizer - AdamW with decoupled weight decay, plus an EMA of the weights
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from graphcore import ParamSet

logger = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    kind: str = 'adamw'
    lr: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 1e-4
    eps: float = 1e-8


class AdamW:
    """
    Adam moments per parameter, weight decay applied directly to the weights

    A parameter with no gradient entry this step is left untouched
    (no moment update, no decay).
    """

    def __init__(self, cfg: OptimizerConfig):
        if cfg.kind != 'adamw':
            raise ValueError(f"unsupported optimizer kind '{cfg.kind}'")
        self.cfg = cfg
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ParamSet, grads: Dict[str, np.ndarray]):
        self.t += 1
        b1, b2 = self.cfg.betas
        lr, wd, eps = self.cfg.lr, self.cfg.weight_decay, self.cfg.eps
        correction1 = 1.0 - b1 ** self.t
        correction2 = 1.0 - b2 ** self.t

        for name, value in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for '{name}'")
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
            v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / correction1) / (np.sqrt(v / correction2) + eps)
            value.data[...] = value.data - lr * (update + wd * value.data)

    def state(self) -> Dict[str, Dict[str, np.ndarray]]:
        return {'m': {k: v.copy() for k, v in self.m.items()},
                'v': {k: v.copy() for k, v in self.v.items()}}

    def load_state(self, state: Dict[str, Dict[str, np.ndarray]], t: int):
        self.m = {k: np.array(v) for k, v in state.get('m', {}).items()}
        self.v = {k: np.array(v) for k, v in state.get('v', {}).items()}
        self.t = int(t)


class EMA:
    """Shadow weights with warm-up decay min(decay, (1 + n) / (10 + n))"""

    def __init__(self, params: ParamSet, decay: float = 0.9999, updates: int = 0,
                 shadow: Optional[Dict[str, np.ndarray]] = None):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"ema decay must lie in [0, 1), got {decay}")
        self.decay = decay
        self.updates = updates
        self.shadow = {k: np.array(v) for k, v in shadow.items()} if shadow else params.arrays()

    def current_decay(self) -> float:
        n = self.updates
        return min(self.decay, (1.0 + n) / (10.0 + n))

    def update(self, params: ParamSet):
        d = self.current_decay()
        for name, value in params.items():
            self.shadow[name] = d * self.shadow[name] + (1.0 - d) * value.data
        self.updates += 1

    def copy_to(self, params: ParamSet):
        params.load_arrays(self.shadow)
