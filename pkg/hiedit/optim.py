import logging
import math
from typing import Dict, Iterable, Tuple

import numpy as np

from .errors import ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)


class AdamW:
    """
    Adam with decoupled weight decay over named Tensor parameters.

    Only tensors with ``requires_grad`` are updated; moment buffers are keyed by
    parameter name so optimizer state round-trips through a named-tensor archive.
    """

    def __init__(self, params: Iterable[Tuple[str, Tensor]], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-2):
        self.params: Dict[str, Tensor] = {name: t for name, t in params if t.requires_grad}
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {name: np.zeros_like(t.values) for name, t in self.params.items()}
        self.v: Dict[str, np.ndarray] = {name: np.zeros_like(t.values) for name, t in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, t in self.params.items():
            g = t.grad
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            if self.weight_decay:
                t.values *= 1.0 - self.lr * self.weight_decay
            t.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {}
        for name in self.params:
            state[f"m.{name}"] = self.m[name].copy()
            state[f"v.{name}"] = self.v[name].copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], step_count: int) -> None:
        for name, t in self.params.items():
            for prefix, buffers in (("m", self.m), ("v", self.v)):
                key = f"{prefix}.{name}"
                if key not in state:
                    raise KeyError(f"optimizer state is missing {key}")
                if state[key].shape != t.shape:
                    raise ShapeError(f"{key}: saved shape {state[key].shape} != parameter shape {t.shape}")
                buffers[name] = state[key].copy()
        self.step_count = step_count

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((t.grad ** 2).sum()) for t in self.params.values()))
