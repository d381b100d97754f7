"""Augmented-Lagrangian sparsity controller.

The penalty is ``lambda1*(s - t) + lambda2*(s - t)**2`` on the expected
sparsity ratio ``s``. The weights minimise it; the multipliers climb its
gradient, ``d/dlambda1 = s - t`` and ``d/dlambda2 = (s - t)**2``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .tensor import Tensor


@dataclass(frozen=True)
class ControllerState:
    target_final: float
    lambda1: float = 0.0
    lambda2: float = 0.0
    warmup_epochs: float = 5.0
    multiplier_lr: float = 2.0

    def __post_init__(self):
        if not (0.0 <= self.target_final < 1.0):
            raise ValueError(f"target sparsity must lie in [0, 1), got {self.target_final}")
        if self.warmup_epochs <= 0:
            raise ValueError("warmup_epochs must be positive")
        if self.multiplier_lr < 0:
            raise ValueError("multiplier_lr must be non-negative")


def scheduled_target(state: ControllerState, epoch_progress: float) -> float:
    """Linear ramp from 0 to the final target over the warm-up epochs."""
    if epoch_progress < 0:
        raise ValueError("epoch_progress must be >= 0")
    return min(epoch_progress / state.warmup_epochs, 1.0) * state.target_final


def regularizer(state: ControllerState, s_hat: Tensor, t_now: float) -> Tensor:
    # multipliers enter as constants; only s_hat carries gradient
    gap = s_hat - t_now
    return gap * state.lambda1 + gap * gap * state.lambda2


def ascend_multipliers(state: ControllerState, s_hat_value: float, t_now: float) -> ControllerState:
    gap = float(s_hat_value) - float(t_now)
    lam1 = state.lambda1 + state.multiplier_lr * gap
    lam2 = max(state.lambda2 + state.multiplier_lr * gap * gap, 0.0)
    return replace(state, lambda1=lam1, lambda2=lam2)
