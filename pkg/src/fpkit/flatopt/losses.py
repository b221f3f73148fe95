"""Training losses with analytic gradients with respect to the logits.

Every base loss works on soft targets (rows of an N x K matrix summing to
one), which lets mixup and label smoothing share one code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInput, InvalidParam
from ..evalcore import log_softmax
from .mlp import MlpModel, backward, forward

LOSS_KINDS = {
    # kind: (parameter name, default)
    "ce": (None, None),
    "focal": ("gamma", 3.0),
    "label_smoothing": ("epsilon", 0.05),
    "l1_logit": ("lam", 0.01),
    "logitnorm": ("tau", 0.04),
    "ce_plus_oe": ("lam_oe", 0.5),
    "ce_plus_crl": ("lam_crl", 1.0),
}

LOGITNORM_EPS = 1e-7


@dataclass(frozen=True)
class LossSpec:
    kind: str = "ce"
    param: float | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InvalidParam(f"unknown loss {self.kind!r}")
        name, default = LOSS_KINDS[self.kind]
        if name is None:
            object.__setattr__(self, "param", None)
            return
        p = default if self.param is None else float(self.param)
        object.__setattr__(self, "param", p)
        if self.kind == "focal" and p < 0:
            raise InvalidParam(f"focal gamma must be >= 0, got {p}")
        if self.kind == "label_smoothing" and not 0 <= p < 1:
            raise InvalidParam(f"label smoothing epsilon must be in [0, 1), got {p}")
        if self.kind == "logitnorm" and p <= 0:
            raise InvalidParam(f"logitnorm tau must be > 0, got {p}")
        if self.kind in ("l1_logit", "ce_plus_oe", "ce_plus_crl") and p < 0:
            raise InvalidParam(f"{name} must be >= 0, got {p}")

    @property
    def param_name(self) -> str | None:
        return LOSS_KINDS[self.kind][0]


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    t = np.zeros((labels.size, k))
    t[np.arange(labels.size), labels] = 1.0
    return t


def smooth_targets(t: np.ndarray, epsilon: float) -> np.ndarray:
    k = t.shape[1]
    return t * (1.0 - epsilon) + (1.0 - t) * epsilon / (k - 1)


def soft_cross_entropy(z: np.ndarray, t: np.ndarray) -> tuple[float, np.ndarray]:
    m = z.shape[0]
    logp = log_softmax(z)
    loss = -np.sum(t * logp) / m
    return float(loss), (np.exp(logp) * t.sum(axis=1, keepdims=True) - t) / m


def focal(z: np.ndarray, t: np.ndarray, gamma: float) -> tuple[float, np.ndarray]:
    """Soft-target focal loss: -sum_k t_k (1 - p_k)^gamma log p_k, batch mean."""
    m = z.shape[0]
    logp = log_softmax(z)
    p = np.exp(logp)
    q = 1.0 - p
    w = q**gamma
    loss = -np.sum(t * w * logp) / m
    # derivative of -(1-p)^gamma log p with respect to p
    if gamma == 0:
        dfdp_times_p = -np.ones_like(p)
    else:
        dfdp_times_p = gamma * q ** (gamma - 1) * logp * p - w
    a = t * dfdp_times_p  # t_k * p_k * df_k/dp_k
    dz = (a - p * a.sum(axis=1, keepdims=True)) / m
    return float(loss), dz


def l1_logit(z: np.ndarray, t: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    loss, dz = soft_cross_entropy(z, t)
    m = z.shape[0]
    return loss + lam * float(np.abs(z).sum()) / m, dz + lam * np.sign(z) / m


def logitnorm(z: np.ndarray, t: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """Cross-entropy on z / (tau * (||z|| + eps))."""
    norm = np.linalg.norm(z, axis=1, keepdims=True)
    r = norm + LOGITNORM_EPS
    u = z / (tau * r)
    loss, du = soft_cross_entropy(u, t)
    safe = np.where(norm > 0, norm, 1.0)
    proj = np.sum(du * z, axis=1, keepdims=True)
    dz = du / (tau * r) - proj * z / (tau * r**2 * safe)
    return loss, dz


def outlier_exposure(z_out: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of KL(uniform || softmax(z_out))."""
    m, k = z_out.shape
    logp = log_softmax(z_out)
    loss = np.sum(-np.log(k) - logp.mean(axis=1)) / m
    return float(loss), (np.exp(logp) - 1.0 / k) / m


def margin_confidence(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Top-1 minus top-2 softmax probability per row, and its Jacobian rows."""
    p = np.exp(log_softmax(z))
    m, k = p.shape
    order = np.argsort(-p, axis=1, kind="stable")
    a, b = order[:, 0], order[:, 1]
    rows = np.arange(m)
    pa, pb = p[rows, a], p[rows, b]
    kappa = pa - pb
    jac = -(pa - pb)[:, None] * p
    jac[rows, a] += pa
    jac[rows, b] -= pb
    return kappa, jac


def crl_loss(kappa_i, kappa_j, c_i, c_j):
    """Pairwise correctness-ranking hinge, averaged over pairs.

    Each pair contributes ``max(0, -sign(c_i - c_j) * (kappa_i - kappa_j) + |c_i - c_j|)``.
    Returns the mean loss and its gradients with respect to kappa_i and kappa_j.
    """
    kappa_i, kappa_j = np.atleast_1d(kappa_i).astype(float), np.atleast_1d(kappa_j).astype(float)
    c_i, c_j = np.atleast_1d(c_i).astype(float), np.atleast_1d(c_j).astype(float)
    g = np.sign(c_i - c_j)
    h = -g * (kappa_i - kappa_j) + np.abs(c_i - c_j)
    active = h > 0
    n = kappa_i.size
    loss = float(np.sum(np.where(active, h, 0.0)) / n)
    dk_i = np.where(active, -g, 0.0) / n
    return loss, dk_i, -dk_i


class CrlHistory:
    """Per-training-sample counts of correct predictions and examinations."""

    def __init__(self, n: int):
        self.correct = np.zeros(n, dtype=np.int64)
        self.examined = np.zeros(n, dtype=np.int64)

    def update(self, idx: np.ndarray, was_correct: np.ndarray) -> None:
        np.add.at(self.examined, idx, 1)
        np.add.at(self.correct, idx, np.asarray(was_correct, dtype=np.int64))

    def rate(self, idx: np.ndarray) -> np.ndarray:
        ex = self.examined[idx]
        return np.where(ex > 0, self.correct[idx] / np.maximum(ex, 1), 0.0)


def base_loss(spec: LossSpec, z: np.ndarray, t: np.ndarray) -> tuple[float, np.ndarray]:
    if spec.kind == "focal":
        return focal(z, t, spec.param)
    if spec.kind == "label_smoothing":
        return soft_cross_entropy(z, smooth_targets(t, spec.param))
    if spec.kind == "l1_logit":
        return l1_logit(z, t, spec.param)
    if spec.kind == "logitnorm":
        return logitnorm(z, t, spec.param)
    return soft_cross_entropy(z, t)


def mixup(x: np.ndarray, t: np.ndarray, alpha: float, rng: np.random.Generator):
    """Convex combination of the batch with a permutation of itself.

    Returns the mixed inputs, mixed targets and the mixing weight drawn from
    Beta(alpha, alpha).
    """
    if alpha <= 0:
        raise InvalidParam(f"mixup alpha must be > 0, got {alpha}")
    lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(x.shape[0])
    return lam * x + (1 - lam) * x[perm], lam * t + (1 - lam) * t[perm], lam


def loss_and_grad(model: MlpModel, x: np.ndarray, labels: np.ndarray, spec: LossSpec,
                  params: np.ndarray | None = None, *, targets: np.ndarray | None = None,
                  outliers: np.ndarray | None = None, correct_rate: np.ndarray | None = None,
                  partner: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Batch loss and its flat parameter gradient at ``params`` (default: the model's).

    ``targets`` overrides the one-hot labels (mixup). ``outliers`` feeds the
    outlier-exposure term, ``correct_rate`` and ``partner`` feed the ranking
    term: sample i is paired with sample ``partner[i]`` (default: the next
    sample, cyclically).
    """
    k = model.sizes[-1]
    z, cache = forward(model, x, params)
    t = one_hot(np.asarray(labels), k) if targets is None else np.asarray(targets, dtype=float)
    loss, dz = base_loss(spec, z, t)

    if spec.kind == "ce_plus_crl" and spec.param > 0:
        if correct_rate is None:
            raise InvalidInput("ce_plus_crl needs the per-sample correct rate")
        c = np.asarray(correct_rate, dtype=float)
        j = np.roll(np.arange(z.shape[0]), -1) if partner is None else np.asarray(partner)
        kappa, jac = margin_confidence(z)
        l_rank, dk_i, dk_j = crl_loss(kappa, kappa[j], c, c[j])
        dkappa = dk_i.copy()
        np.add.at(dkappa, j, dk_j)
        loss += spec.param * l_rank
        dz = dz + spec.param * dkappa[:, None] * jac

    grad = backward(model, cache, dz, params)

    if spec.kind == "ce_plus_oe" and spec.param > 0:
        if outliers is None:
            raise InvalidInput("ce_plus_oe needs an outlier batch")
        z_out, cache_out = forward(model, outliers, params)
        l_oe, dz_out = outlier_exposure(z_out)
        loss += spec.param * l_oe
        grad = grad + backward(model, cache_out, spec.param * dz_out, params)
    return float(loss), grad
