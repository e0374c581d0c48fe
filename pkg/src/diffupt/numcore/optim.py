"""Trainable parameters and the adaptive-moment optimizer step."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    """adam_step was called on a parameter without a populated gradient."""


class Parameter:
    """A trainable tensor plus its optimizer moment state."""

    __slots__ = ("tensor", "first_moment", "second_moment", "step_count")

    def __init__(self, value):
        self.tensor = Tensor(value, requires_grad=True)
        n = self.tensor.size
        self.first_moment = np.zeros(n, dtype=np.float64)
        self.second_moment = np.zeros(n, dtype=np.float64)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    def __repr__(self):
        return f"Parameter(shape={self.shape}, steps={self.step_count})"


def adam_step(
    params: list[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected adaptive-moment update; gradients are consumed."""
    for p in params:
        g = p.tensor.grad
        if g is None:
            raise MissingGradError(f"parameter {p.shape} has no gradient; run backward first")
        gf = g.reshape(-1)
        p.step_count += 1
        p.first_moment *= beta1
        p.first_moment += (1.0 - beta1) * gf
        p.second_moment *= beta2
        p.second_moment += (1.0 - beta2) * gf * gf
        m_hat = p.first_moment / (1.0 - beta1**p.step_count)
        v_hat = p.second_moment / (1.0 - beta2**p.step_count)
        p.tensor.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).reshape(p.shape)
        p.tensor.grad = None
