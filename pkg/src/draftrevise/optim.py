"""Decoupled-weight-decay adaptive optimizer and the cosine learning-rate ramp."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor

__all__ = ["OptimizerState", "AdamW", "adamw_step", "cosine_lr"]


class OptimizerState:
    """First/second-moment accumulators plus the shared step counter.

    Moments are keyed by parameter name and always match the parameter
    shape. The counter increases by one per optimizer step.
    """

    def __init__(self, params: dict[str, Tensor]):
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.step_count = 0


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(
        self,
        params: dict[str, Tensor],
        beta1: float = 0.9,
        beta2: float = 0.95,
        weight_decay: float = 0.0001,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.state = OptimizerState(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        """Apply one update from the accumulated gradients."""
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        state = self.state
        state.step_count += 1
        t = state.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        # Fixed iteration order over the (insertion-ordered) parameter dict
        # keeps updates bit-reproducible.
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = state.m[name]
            v = state.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                p.data = p.data - lr * self.weight_decay * p.data - lr * update
            else:
                p.data = p.data - lr * update


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], optimizer: AdamW, lr: float) -> None:
    """Functional wrapper: assign ``grads`` onto ``params`` and step once."""
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        p.grad = None if g is None else np.asarray(g, dtype=p.data.dtype)
    optimizer.step(lr)


def cosine_lr(step: int, total_steps: int, lr_init: float = 1e-4, lr_final: float = 0.0) -> float:
    """Half-cosine interpolation from ``lr_init`` at step 0 to ``lr_final`` at the end.

    Steps past the end clamp to ``lr_final``.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step >= total_steps:
        return lr_final
    frac = step / total_steps
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * frac))
