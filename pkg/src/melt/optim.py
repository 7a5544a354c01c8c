"""AdamW with decoupled weight decay, plus the linear warm-up schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    """A parameter reached the optimizer without a gradient."""


@dataclass
class AdamWState:
    """Per-parameter moments plus the shared hyperparameters."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    base_lr: float = 4e-3
    weight_decay: float = 0.1


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamWState, lr: float,
               name: str = "<param>") -> None:
    """One in-place AdamW update.

    Weight decay is decoupled: the parameter shrinks by lr * wd * param
    directly, it never passes through the moment estimates. Moments are
    bias-corrected, so the very first step moves by exactly lr * sign-ish
    of the gradient.
    """
    if grad is None:
        raise MissingGradError(f"parameter '{name}' has no gradient")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    if state.weight_decay != 0.0:
        param -= lr * state.weight_decay * param
    param -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def warmup_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warm-up: base_lr * min(1, step / warmup_steps), constant after."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


class AdamW:
    """AdamW over a list of named parameter tensors.

    The learning rate for each step is supplied by the caller (the training
    loops pass the warm-up schedule); ``base_lr`` is used when omitted.
    """

    def __init__(self, params: Sequence[Tuple[str, Tensor]], base_lr: float = 4e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.1):
        self.params = list(params)
        self.base_lr = base_lr
        self.states = {
            name: AdamWState(
                m=np.zeros_like(p.data),
                v=np.zeros_like(p.data),
                beta1=betas[0],
                beta2=betas[1],
                eps=eps,
                base_lr=base_lr,
                weight_decay=weight_decay,
            )
            for name, p in self.params
        }

    def step(self, lr: float | None = None) -> None:
        """Update every parameter that received a gradient.

        Parameters whose grad is None are skipped (a registered tensor may
        sit outside the current loss's graph, e.g. the mask vector during
        fine-tuning).
        """
        if lr is None:
            lr = self.base_lr
        for name, p in self.params:
            if p.grad is None:
                continue
            adamw_step(p.data, p.grad, self.states[name], lr, name=name)
            p.grad = None  # consumed; a later backward must repopulate it
