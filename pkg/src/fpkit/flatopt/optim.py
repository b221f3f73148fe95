"""SGD with momentum, SAM and SWA on flat parameter vectors.

``grad_fn(theta) -> (loss, grad)`` closures decouple the optimizers from the
model, so the same step functions drive the MLP and scalar toy problems.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import InvalidParam

GradFn = Callable[[np.ndarray], tuple[float, np.ndarray]]

SAM_EPS = 1e-12


def sgd_step(theta: np.ndarray, grad: np.ndarray, buf: np.ndarray | None, lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0):
    """Heavy-ball SGD with coupled L2 weight decay.

    d = grad + wd * theta; buf = momentum * buf + d; theta -= lr * buf.
    Returns the new parameters and momentum buffer.
    """
    d = grad + weight_decay * theta if weight_decay else grad
    buf = d.copy() if buf is None else momentum * buf + d
    return theta - lr * buf, buf


def sam_perturb(grad: np.ndarray, rho: float) -> np.ndarray:
    """Ascent direction of norm rho along the full flattened gradient."""
    if rho < 0:
        raise InvalidParam(f"rho must be >= 0, got {rho}")
    g = np.asarray(grad, dtype=float)
    norm = np.linalg.norm(g)
    if norm < SAM_EPS:
        return np.zeros_like(g)
    return rho * g / norm


def sam_step(theta: np.ndarray, grad_fn: GradFn, rho: float, lr: float, buf: np.ndarray | None = None,
             momentum: float = 0.9, weight_decay: float = 0.0):
    """One SAM update: descend with the gradient taken at theta + eps_hat.

    Returns (new theta, new momentum buffer, loss at theta).
    """
    loss, g = grad_fn(theta)
    eps = sam_perturb(g, rho)
    _, g_adv = grad_fn(theta + eps)
    theta, buf = sgd_step(theta, g_adv, buf, lr, momentum, weight_decay)
    return theta, buf, loss


@dataclass
class SwaState:
    mean: np.ndarray | None = None
    count: int = 0
    history: list[int] = field(default_factory=list)

    def update(self, theta: np.ndarray, tag: int | None = None) -> "SwaState":
        return swa_update(self, theta, tag)


def swa_update(state: SwaState, theta: np.ndarray, tag: int | None = None) -> SwaState:
    """Running mean: (mean * s + theta) / (s + 1)."""
    theta = np.asarray(theta, dtype=float)
    if state.mean is None:
        mean = theta.copy()
    else:
        mean = (state.mean * state.count + theta) / (state.count + 1)
    history = state.history + ([] if tag is None else [tag])
    return SwaState(mean, state.count + 1, history)
