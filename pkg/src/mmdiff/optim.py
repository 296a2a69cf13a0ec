"""AdamW with linear warmup and cosine decay."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import ParamBundle

PAPER_LR = 2e-5  # peak LR used for the billion-parameter runs; too small at toy scale


def cosine_lr(step: int, total: int, peak: float, warmup_ratio: float = 0.03, floor: float = 0.0) -> float:
    """Learning rate at 0-based ``step`` of a ``total``-step run."""
    warm = max(1, int(math.ceil(warmup_ratio * total))) if warmup_ratio > 0 else 0
    if step < warm:
        return peak * (step + 1) / warm
    span = max(1, total - warm)
    frac = min(1.0, (step - warm) / span)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamW:
    bundles: list[ParamBundle]
    lr: float = 1e-3
    total_steps: int = 1000
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_ratio: float = 0.03
    clip_norm: float | None = 1.0
    step_count: int = 0
    _m: dict = field(default_factory=dict, repr=False)
    _v: dict = field(default_factory=dict, repr=False)

    def current_lr(self) -> float:
        return cosine_lr(self.step_count, self.total_steps, self.lr, self.warmup_ratio)

    def zero_grad(self) -> None:
        for b in self.bundles:
            b.zero_grad()

    def step(self) -> float:
        """Apply one update to every unfrozen parameter; returns the LR used."""
        params = [(f"{i}/{n}", t) for i, b in enumerate(self.bundles) for n, t in b.items()
                  if t.requires_grad and t.grad is not None]
        scale = 1.0
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float((t.grad * t.grad).sum()) for _, t in params))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        lr = self.current_lr()
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for key, t in params:
            g = t.grad * scale
            m = self._m.get(key)
            if m is None:
                m = self._m[key] = np.zeros_like(t.data)
                self._v[key] = np.zeros_like(t.data)
            v = self._v[key]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * t.data
            t.data -= lr * update
        self.zero_grad()
        return lr
