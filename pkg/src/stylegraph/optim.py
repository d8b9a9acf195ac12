"""Adam optimizer over named parameter groups."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor


@dataclass
class AdamState:
    """Per-parameter moment buffers and step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def for_param(p: Tensor) -> "AdamState":
        return AdamState(m=np.zeros_like(p.data), v=np.zeros_like(p.data))


def adam_step(
    value: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> np.ndarray:
    """One bias-corrected Adam update; returns the new parameter array."""
    if grad.shape != value.shape or state.m.shape != value.shape:
        raise ShapeError(f"adam_step shape mismatch: param {value.shape}, grad {grad.shape}")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a name->Tensor dict; parameters without gradients stay put."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict[str, AdamState] = {
            name: AdamState.for_param(p) for name, p in self.params.items()
        }

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            p.data = adam_step(p.data, p.grad, self.state[name],
                               self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
