"""Adam optimizer with bias correction and global-norm gradient clipping."""

from __future__ import annotations

import numpy as np

from .engine import Parameter


class Adam:
    def __init__(self, params: list[Parameter], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, grads: list[np.ndarray] | None = None) -> None:
        """Apply one bias-corrected update from ``grads`` or the accumulated
        ``param.grad`` buffers. Raises on shape mismatch or non-finite grads."""
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} gradients, got {len(grads)}")
        for p, g in zip(self.params, grads):
            if g.shape != p.value.shape:
                raise ValueError(f"gradient shape {g.shape} does not match "
                                 f"parameter {p.name} shape {p.value.shape}")
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for {p.name}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, (p, g) in enumerate(zip(self.params, grads)):
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "m": {p.name: m.copy() for p, m in zip(self.params, self.m)},
            "v": {p.name: v.copy() for p, v in zip(self.params, self.v)},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        self.m = [np.array(state["m"][p.name]) for p in self.params]
        self.v = [np.array(state["v"][p.name]) for p in self.params]


def clip_global_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is <= max_norm."""
    total = 0.0
    for p in params:
        total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params:
            p.grad *= factor
    return norm


def snapshot(params: list[Parameter]) -> list[np.ndarray]:
    return [p.value.copy() for p in params]


def restore(params: list[Parameter], values: list[np.ndarray]) -> None:
    for p, v in zip(params, values):
        p.value[...] = v
