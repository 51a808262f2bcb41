"""Adam with a warmup-then-inverse-sqrt learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class Adam:
    """Adaptive-moment optimizer over a fixed, ordered parameter list.

    The learning rate ramps linearly for ``warmup_steps`` steps and then
    decays as sqrt(warmup/step); parameters with no accumulated gradient
    are left untouched.
    """

    def __init__(self, params: list[Tensor], peak_lr: float = 1e-3,
                 warmup_steps: int = 200, beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-9,
                 grad_clip: float | None = 5.0):
        self.params = params
        self.peak_lr = peak_lr
        self.warmup_steps = max(1, warmup_steps)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_clip = grad_clip
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in params]
        self._v = [np.zeros_like(p.data) for p in params]

    def current_lr(self) -> float:
        step = max(1, self.step_count)
        return self.peak_lr * min(step / self.warmup_steps,
                                  math.sqrt(self.warmup_steps / step))

    def step(self) -> float:
        """Apply one update from accumulated grads; returns the lr used."""
        self.step_count += 1
        lr = self.current_lr()
        if self.grad_clip is not None:
            total = 0.0
            for p in self.params:
                if p.grad is not None:
                    total += float((p.grad * p.grad).sum())
            norm = math.sqrt(total)
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
                for p in self.params:
                    if p.grad is not None:
                        p.grad *= scale
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * (p.grad * p.grad)
            p.data -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
        return lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
