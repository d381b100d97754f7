"""Hard Concrete gates: a stretched, clamped binary-concrete variable.

All functions accept a vector of ``log_alpha`` values so one call covers
every gate in a model. The temperature/stretch constants are fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

BETA = 2.0 / 3.0
GAMMA = -0.1
ZETA = 1.1


@dataclass(frozen=True)
class HardConcreteParams:
    beta: float = BETA
    gamma: float = GAMMA
    zeta: float = ZETA

    def __post_init__(self):
        if not (self.gamma < 0.0 < 1.0 < self.zeta):
            raise ValueError(f"need gamma < 0 < 1 < zeta, got gamma={self.gamma}, zeta={self.zeta}")
        if not (0.0 < self.beta <= 1.0):
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")

    @property
    def log_ratio(self) -> float:
        return math.log(-self.gamma / self.zeta)


DEFAULT = HardConcreteParams()


@dataclass
class GateSample:
    z: Tensor
    uniform_draw: np.ndarray


def _as_param(log_alpha) -> Tensor:
    return log_alpha if isinstance(log_alpha, Tensor) else Tensor(log_alpha)


def sample(log_alpha, u, params: HardConcreteParams = DEFAULT) -> GateSample:
    """Reparameterised draw z = clamp(sigmoid((logit u + log_alpha)/beta)*(zeta-gamma)+gamma, 0, 1)."""
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("sample: uniform draws must lie strictly inside (0, 1)")
    la = _as_param(log_alpha)
    noise = Tensor(np.log(u) - np.log1p(-u), dtype=la.dtype)
    s = T.sigmoid((la + noise) * (1.0 / params.beta))
    z = T.clamp(s * (params.zeta - params.gamma) + params.gamma, 0.0, 1.0)
    return GateSample(z=z, uniform_draw=u)


def prob_nonzero(log_alpha, params: HardConcreteParams = DEFAULT) -> Tensor:
    """P(z > 0) = sigmoid(log_alpha - beta * ln(-gamma/zeta))."""
    la = _as_param(log_alpha)
    return T.sigmoid(la - params.beta * params.log_ratio)


def deterministic_gate(log_alpha, params: HardConcreteParams = DEFAULT) -> Tensor:
    """Evaluation-mode gate: clamp(sigmoid(log_alpha)*(zeta-gamma)+gamma, 0, 1)."""
    la = _as_param(log_alpha)
    return T.clamp(T.sigmoid(la) * (params.zeta - params.gamma) + params.gamma, 0.0, 1.0)


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def prob_one(log_alpha, params: HardConcreteParams = DEFAULT) -> np.ndarray:
    """P(z = 1), the mass clamped at the upper end."""
    la = np.asarray(log_alpha, dtype=np.float64)
    s1 = (1.0 - params.gamma) / (params.zeta - params.gamma)
    return _sigmoid(la - params.beta * _logit(s1))


def expected_gate(log_alpha, params: HardConcreteParams = DEFAULT, order: int = 96) -> np.ndarray:
    """E[z], by Gauss-Legendre quadrature over the uniform draw.

    z is 0 below u0, 1 above u1 and smooth in between, so the integral is
    P(z=1) plus a smooth integral on [u0, u1].
    """
    la = np.atleast_1d(np.asarray(log_alpha, dtype=np.float64))
    span = params.zeta - params.gamma
    s0 = -params.gamma / span
    s1 = (1.0 - params.gamma) / span
    # logit(u) = beta*logit(s) - log_alpha
    u0 = _sigmoid(params.beta * _logit(s0) - la)
    u1 = _sigmoid(params.beta * _logit(s1) - la)
    nodes, weights = np.polynomial.legendre.leggauss(order)
    half = 0.5 * (u1 - u0)
    mid = 0.5 * (u1 + u0)
    u = mid[:, None] + half[:, None] * nodes[None, :]
    s = _sigmoid((_logit(u) + la[:, None]) / params.beta)
    z = np.clip(s * span + params.gamma, 0.0, 1.0)
    inner = half * (z * weights[None, :]).sum(axis=1)
    out = (1.0 - u1) + inner
    return out.reshape(np.shape(log_alpha))


def draw_uniform(generator: np.random.Generator, n: int, eps: float = 1e-12) -> np.ndarray:
    """Uniform draws kept strictly inside (0, 1)."""
    return np.clip(generator.random(n), eps, 1.0 - eps)
