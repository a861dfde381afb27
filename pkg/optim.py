# optim.py
import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from tensor import Parameter

logger = logging.getLogger(__name__)


class Adam:
    """Adam with bias correction; `frozen` parameters are skipped entirely (values and moments)."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params: List[Parameter] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: Dict[int, np.ndarray] = {}
        self.v: Dict[int, np.ndarray] = {}
        self.frozen: set = set()
        self.lr_scale: Dict[int, float] = {}

    def freeze(self, params: Sequence[Parameter]) -> None:
        self.frozen = {id(p) for p in params}

    def unfreeze(self) -> None:
        self.frozen = set()

    def scale_lr(self, params: Sequence[Parameter], factor: float) -> None:
        """Step `params` with lr * factor; the schedule still drives the base lr."""
        for p in params:
            self.lr_scale[id(p)] = factor

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            if id(p) in self.frozen or p.grad is None:
                continue
            g = p.grad
            m = self.m.get(id(p))
            if m is None:
                m = np.zeros_like(p.data)
                self.v[id(p)] = np.zeros_like(p.data)
            v = self.v[id(p)]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[id(p)], self.v[id(p)] = m, v
            update = self.lr * self.lr_scale.get(id(p), 1.0) * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)


def lr_schedule(history: Sequence[float], lr: float, patience: int = 3, floor: float = 1e-5, factor: float = 0.1) -> float:
    """
    Plateau decay on validation accuracy.

    Returns max(lr * factor, floor) when the epochs elapsed since the first
    best accuracy is a positive multiple of `patience`, else lr unchanged.
    """
    if not history:
        return lr
    best_at = int(np.argmax(np.asarray(history)))
    since = len(history) - 1 - best_at
    if since > 0 and since % patience == 0:
        new_lr = max(lr * factor, floor)
        if new_lr != lr:
            logger.info("[lr] no improvement for %d epochs: %.2e -> %.2e", since, lr, new_lr)
        return new_lr
    return lr
