"""Temperature scaling and the calibration/grouping/aleatoric decomposition."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, InvalidParam
from .evalcore import EvalSet, log_softmax, softmax
from .metrics import bin_index

T_MIN, T_MAX = 0.05, 100.0
T_TOL = 1e-4

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class TemperatureFit:
    T: float
    nll_before: float
    nll_after: float
    iterations: int
    # (T, nll) of every point that became the incumbent minimum, in order
    path: list[tuple[float, float]] = field(default_factory=list, repr=False)
    at_boundary: bool = False

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "nll_before": self.nll_before,
            "nll_after": self.nll_after,
            "iterations": self.iterations,
            "at_boundary": self.at_boundary,
        }


def tempered_nll(logits: np.ndarray, labels: np.ndarray, T: float) -> float:
    logp = log_softmax(logits / T)
    return float(-np.mean(logp[np.arange(labels.size), labels]))


def fit_temperature(holdout: EvalSet, t_min: float = T_MIN, t_max: float = T_MAX,
                    tol: float = T_TOL) -> TemperatureFit:
    """Find the temperature minimizing mean NLL on a held-out split.

    NLL is convex in 1/T, hence unimodal in T, so a coarse log-spaced scan
    followed by golden-section search inside the winning bracket finds the
    global minimum on ``[t_min, t_max]``. Iteration stops once the bracket is
    narrower than ``tol`` in T.
    """
    if not 0 < t_min < t_max:
        raise InvalidParam("need 0 < t_min < t_max")
    if holdout.n < holdout.num_classes:
        warnings.warn(
            f"temperature fitted on {holdout.n} samples for {holdout.num_classes} classes",
            stacklevel=2,
        )
    z, y = holdout.logits, holdout.labels
    path: list[tuple[float, float]] = []
    best = [math.inf, math.nan]

    def f(log_t: float) -> float:
        t = min(max(math.exp(log_t), t_min), t_max)
        v = tempered_nll(z, y, t)
        if v < best[0]:
            best[0], best[1] = v, t
            path.append((t, v))
        return v

    lo, hi = math.log(t_min), math.log(t_max)
    grid = np.linspace(lo, hi, 41)
    vals = [f(g) for g in grid]
    i = int(np.argmin(vals))
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, grid.size - 1)]

    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    iterations = 0
    while math.exp(b) - math.exp(a) > tol:
        iterations += 1
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
        if iterations > 200:
            break

    nll_after, T = best
    nll_before = tempered_nll(z, y, 1.0)
    if nll_before < nll_after and t_min <= 1.0 <= t_max:
        nll_after, T = nll_before, 1.0
        path.append((T, nll_after))
    at_boundary = math.isclose(T, t_min, rel_tol=1e-3) or math.isclose(T, t_max, rel_tol=1e-3)
    if at_boundary:
        warnings.warn(f"temperature optimum at the search boundary (T={T:.4g})", stacklevel=2)
    return TemperatureFit(T, nll_before, nll_after, iterations, path, at_boundary)


def apply_temperature(eval_set: EvalSet, T: float) -> EvalSet:
    T = float(T)
    if not T > 0:
        raise InvalidParam(f"temperature must be positive, got {T}")
    return eval_set.with_logits(eval_set.logits / T)


# --------------------------------------------------------------------------
# proper scoring rule decomposition

RULES = ("log_loss", "brier")


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    out = np.zeros(np.broadcast(x, y).shape)
    nz = np.broadcast_to(x, out.shape) > 0
    xb, yb = np.broadcast_to(x, out.shape), np.broadcast_to(y, out.shape)
    out[nz] = xb[nz] * np.log(yb[nz])
    return out


def divergence(rule: str, s: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise d(S, Q) = E_{Y~Q}[phi(S, Y)] - E_{Y~Q}[phi(Q, Y)].

    For the log loss this is KL(Q || S); for the Brier score it is the squared
    Euclidean distance.
    """
    s = np.asarray(s, dtype=float)
    q = np.asarray(q, dtype=float)
    if rule == "log_loss":
        with np.errstate(divide="ignore"):
            return np.sum(_xlogy(q, q) - _xlogy(q, s), axis=-1)
    if rule == "brier":
        return np.sum((s - q) ** 2, axis=-1)
    raise InvalidParam(f"unsupported scoring rule {rule!r}")


@dataclass
class DecompositionEstimate:
    rule: str
    total: float
    calibration_term: float
    grouping_plus_aleatoric: float
    grouping: float | None = None
    aleatoric: float | None = None
    n_bins: int = 0
    empty_bins: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def recalibrated_scores(probs: np.ndarray, labels: np.ndarray, n_bins: int) -> tuple[np.ndarray, int]:
    """Estimate C = P(Y | S) by grouping on (predicted class, MSP bin).

    Each sample's recalibrated score is the empirical label distribution of
    its group. Returns the N x K estimate and the number of empty cells.
    """
    n, k = probs.shape
    pred = np.argmax(probs, axis=1)
    cell = pred * n_bins + bin_index(probs.max(axis=1), n_bins)
    n_cells = k * n_bins
    counts = np.bincount(cell, minlength=n_cells)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    sums = np.zeros((n_cells, k))
    np.add.at(sums, cell, onehot)
    freq = sums[cell] / counts[cell][:, None]
    return freq, int(np.sum(counts == 0))


def decompose_score(eval_set: EvalSet, rule: str = "log_loss", n_bins: int = 15,
                    true_posterior: np.ndarray | None = None) -> DecompositionEstimate:
    if rule == "focal":
        raise InvalidParam("focal loss is not a strictly proper scoring rule")
    if rule not in RULES:
        raise InvalidParam(f"unsupported scoring rule {rule!r}")
    if n_bins < 1:
        raise InvalidParam("need at least one bin")
    s = softmax(eval_set.logits)
    n, k = s.shape
    y = np.zeros((n, k))
    y[np.arange(n), eval_set.labels] = 1.0

    c_hat, empty = recalibrated_scores(s, eval_set.labels, n_bins)
    total = float(np.mean(divergence(rule, s, y)))
    calibration = float(np.mean(divergence(rule, s, c_hat)))
    est = DecompositionEstimate(rule, total, calibration, total - calibration,
                                n_bins=n_bins, empty_bins=empty)
    if true_posterior is not None:
        q = np.asarray(true_posterior, dtype=float)
        if q.shape != (n, k):
            raise InvalidInput(f"true posterior must be {n} x {k}, got {q.shape}")
        if np.any(q < 0) or not np.allclose(q.sum(axis=1), 1.0, atol=1e-9):
            raise InvalidInput("true posterior rows must lie on the simplex")
        est.aleatoric = float(np.mean(divergence(rule, q, y)))
        est.grouping = est.grouping_plus_aleatoric - est.aleatoric
    return est
