from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Parameter


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0


class Adam:
    """Adam with global-norm clipping. State is kept only for trainable parameters."""

    def __init__(self, params: list[Parameter], cfg: AdamConfig | None = None):
        self.cfg = cfg or AdamConfig()
        self.params = [p for p in params if p.trainable]
        self.state: dict[str, tuple[np.ndarray, np.ndarray]] = {
            p.name: (np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params
        }
        self.t = 0

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(p.grad**2) for p in self.params if p.grad is not None)))

    def step(self) -> float:
        """Apply one update from the accumulated grads; returns the pre-clip global norm."""
        c = self.cfg
        norm = self.grad_norm()
        scale = c.clip_norm / norm if c.clip_norm and norm > c.clip_norm else 1.0
        self.t += 1
        b1t = 1.0 - c.beta1**self.t
        b2t = 1.0 - c.beta2**self.t
        for p in self.params:
            if p.grad is None:
                continue
            if not p.trainable:
                raise RuntimeError(f"optimizer holds frozen parameter {p.name}")
            g = p.grad * scale
            m, v = self.state[p.name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.data = p.data - c.lr * (m / b1t) / (np.sqrt(v / b2t) + c.eps)
        return norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
