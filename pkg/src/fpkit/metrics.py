"""Failure-prediction, calibration and OOD metrics.

Ranking metrics take a score vector (higher = more confident) and a boolean
array of positives. For failure prediction the positives are the correctly
classified samples; for OOD detection they are the in-distribution samples.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .errors import DegenerateLabels, FpkitError, InvalidInput
from .evalcore import (
    PROBABILITY_SCORES,
    CorrectnessMask,
    EvalSet,
    ScoreVector,
    compute_score,
    correctness,
    format_float,
    log_softmax,
    react_logits,
    softmax,
)


def _values(score) -> np.ndarray:
    if isinstance(score, ScoreVector):
        return score.values
    return np.asarray(score, dtype=float)


def _flags(mask) -> np.ndarray:
    if isinstance(mask, CorrectnessMask):
        return np.asarray(mask.correct, dtype=bool)
    return np.asarray(mask, dtype=bool)


def _aligned(score, mask) -> tuple[np.ndarray, np.ndarray]:
    s, m = _values(score), _flags(mask)
    if s.ndim != 1 or s.shape != m.shape:
        raise InvalidInput(f"score and mask lengths differ: {s.shape} vs {m.shape}")
    if s.size == 0:
        raise InvalidInput("empty score vector")
    return s, m


def _need_both_classes(pos: np.ndarray) -> None:
    n_pos = int(pos.sum())
    if n_pos == 0 or n_pos == pos.size:
        raise DegenerateLabels(
            "no positives" if n_pos == 0 else "no negatives"
        )


# --------------------------------------------------------------------------
# risk-coverage


@dataclass(frozen=True)
class RcCurve:
    coverage: np.ndarray
    risk: np.ndarray

    def to_csv(self) -> str:
        lines = ["coverage,risk"]
        lines += [f"{format_float(c)},{format_float(r)}" for c, r in zip(self.coverage, self.risk)]
        return "\n".join(lines) + "\n"


def _descending(s: np.ndarray) -> np.ndarray:
    # stable sort on the negated scores keeps original order among ties
    return np.argsort(-s, kind="stable")


def rc_curve(score, mask) -> RcCurve:
    s, correct = _aligned(score, mask)
    n = s.size
    errors = np.cumsum(~correct[_descending(s)])
    k = np.arange(1, n + 1)
    return RcCurve(k / n, errors / k)


def aurc(score, mask) -> float:
    """Mean selective risk over the n prefix coverages 1/n, ..., 1."""
    return float(np.mean(rc_curve(score, mask).risk))


def optimal_aurc(mask) -> float:
    correct = _flags(mask)
    return aurc(correct.astype(float), correct)


def e_aurc(score, mask) -> float:
    return aurc(score, mask) - optimal_aurc(_aligned(score, mask)[1])


# --------------------------------------------------------------------------
# ROC / PR


def _midranks(s: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing their average rank."""
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    n = s.size
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], n]
    avg = (starts + ends + 1) / 2.0  # mean of 1-based ranks starts+1 .. ends
    ranks = np.empty(n)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auroc(score, positives) -> float:
    """P(score_pos > score_neg) + 0.5 P(score_pos == score_neg)."""
    s, pos = _aligned(score, positives)
    _need_both_classes(pos)
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    r = _midranks(s)
    u = r[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def fpr_at_tpr(score, positives, tpr_target: float = 0.95) -> float:
    """False-positive rate at the highest threshold whose TPR exceeds the target.

    Thresholds are the distinct score values; samples with score >= threshold
    are accepted. TPR must be strictly greater than ``tpr_target`` unless the
    target is 1, in which case all positives must be accepted.
    """
    s, pos = _aligned(score, positives)
    _need_both_classes(pos)
    if not 0 < tpr_target <= 1:
        raise InvalidInput(f"tpr_target must be in (0, 1], got {tpr_target}")
    order = _descending(s)
    s_sorted, p_sorted = s[order], pos[order]
    tp = np.cumsum(p_sorted)
    fp = np.cumsum(~p_sorted)
    # last index of each run of equal scores = threshold at that distinct value
    group_end = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    n_pos, n_neg = tp[-1], fp[-1]
    tpr = tp[group_end] / n_pos
    hit = tpr >= 1.0 if tpr_target >= 1 else tpr > tpr_target
    first = int(np.argmax(hit))
    return float(fp[group_end[first]] / n_neg)


def aupr(score, positives) -> float:
    """Average precision: mean over positives of precision at their rank."""
    s, pos = _aligned(score, positives)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise DegenerateLabels("no positives")
    p_sorted = pos[_descending(s)]
    tp = np.cumsum(p_sorted)
    precision = tp / np.arange(1, s.size + 1)
    return float(precision[p_sorted].sum() / n_pos)


def aupr_success(score, mask) -> float:
    return aupr(score, _flags(mask))


def aupr_error(score, mask) -> float:
    s, correct = _aligned(score, mask)
    return aupr(-s, ~correct)


# --------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class BinStats:
    n_bins: int
    edges: np.ndarray
    counts: np.ndarray
    confidence: np.ndarray  # nan for empty bins
    accuracy: np.ndarray  # nan for empty bins

    def to_dict(self) -> dict[str, Any]:
        def clean(a):
            return [None if np.isnan(v) else float(v) for v in a]

        return {
            "n_bins": self.n_bins,
            "counts": [int(c) for c in self.counts],
            "confidence": clean(self.confidence),
            "accuracy": clean(self.accuracy),
        }


def bin_index(conf: np.ndarray, n_bins: int) -> np.ndarray:
    """Equal-width bins [(m-1)/M, m/M), the last one closed at 1."""
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.searchsorted(edges, conf, side="right") - 1
    return np.clip(idx, 0, n_bins - 1)


def ece(msp, mask, n_bins: int = 15) -> tuple[float, BinStats]:
    conf, correct = _aligned(msp, mask)
    if n_bins < 1:
        raise InvalidInput("need at least one bin")
    if np.any(conf < 0) or np.any(conf > 1):
        raise InvalidInput("ECE needs confidences in [0, 1]")
    idx = bin_index(conf, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct.astype(float), minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = conf_sum / counts
        mean_acc = acc_sum / counts
    filled = counts > 0
    value = np.sum(counts[filled] / conf.size * np.abs(mean_acc[filled] - mean_conf[filled]))
    stats = BinStats(n_bins, np.arange(n_bins + 1) / n_bins, counts, mean_conf, mean_acc)
    return float(value), stats


def nll(eval_set: EvalSet) -> float:
    """Mean negative log-likelihood of the true class."""
    logp = log_softmax(eval_set.logits)
    return float(-np.mean(logp[np.arange(eval_set.n), eval_set.labels]))


def brier(eval_set: EvalSet) -> float:
    p = softmax(eval_set.logits)
    p[np.arange(eval_set.n), eval_set.labels] -= 1.0
    return float(np.mean(np.sum(p**2, axis=1)))


# --------------------------------------------------------------------------
# report

REPORT_FIELDS = (
    "aurc",
    "e_aurc",
    "auroc",
    "fpr95",
    "aupr_s",
    "aupr_e",
    "ece",
    "nll",
    "brier",
    "accuracy",
)


@dataclass
class MetricsReport:
    score_kind: str
    n: int
    aurc: float | None = None
    e_aurc: float | None = None
    auroc: float | None = None
    fpr95: float | None = None
    aupr_s: float | None = None
    aupr_e: float | None = None
    ece: float | None = None
    nll: float | None = None
    brier: float | None = None
    accuracy: float | None = None
    params: dict[str, Any] = field(default_factory=dict)
    null_reasons: dict[str, str] = field(default_factory=dict)

    def populated(self) -> list[str]:
        return [f for f in REPORT_FIELDS if getattr(self, f) is not None]

    def scaled(self, factor: float) -> "MetricsReport":
        """Copy with AURC and E-AURC multiplied by ``factor`` (1000 for table display)."""
        out = MetricsReport(**asdict(self))
        for name in ("aurc", "e_aurc"):
            v = getattr(out, name)
            if v is not None:
                setattr(out, name, v * factor)
        return out

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["params"] = dict(sorted(self.params.items()))
        d["null_reasons"] = dict(sorted(self.null_reasons.items()))
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)


def _reason(exc: Exception) -> str:
    return f"{type(exc).__name__}: {exc}"


def _probability_source(eval_set: EvalSet, score: ScoreVector) -> EvalSet:
    """The logits whose softmax the probability score was read from."""
    if score.kind == "odin_t":
        return eval_set.with_logits(eval_set.logits / score.params["T"])
    if score.kind == "react_msp":
        logits, _ = react_logits(eval_set, threshold=score.params["threshold"])
        return eval_set.with_logits(logits)
    return eval_set


def full_report(eval_set: EvalSet, score_kind: str = "msp", params: dict | None = None,
                ece_bins: int = 15, tpr_target: float = 0.95) -> MetricsReport:
    """Compute a score and every applicable metric for it.

    A metric that cannot be computed is left as ``None`` and its reason is
    recorded in ``null_reasons``; the other metrics are still filled in.
    """
    params = dict(params or {})
    score = compute_score(eval_set, score_kind, **params)
    mask = correctness(eval_set)
    report = MetricsReport(score_kind=score_kind, n=eval_set.n, params=dict(score.params))
    report.accuracy = float(np.mean(mask.correct))

    calculators = {
        "aurc": lambda: aurc(score, mask),
        "e_aurc": lambda: e_aurc(score, mask),
        "auroc": lambda: auroc(score, mask.correct),
        "fpr95": lambda: fpr_at_tpr(score, mask.correct, tpr_target),
        "aupr_s": lambda: aupr_success(score, mask),
        "aupr_e": lambda: aupr_error(score, mask),
    }
    if score_kind in PROBABILITY_SCORES:
        prob_set = _probability_source(eval_set, score)
        calculators["ece"] = lambda: ece(score, mask, ece_bins)[0]
        calculators["nll"] = lambda: nll(prob_set)
        calculators["brier"] = lambda: brier(prob_set)
    else:
        for name in ("ece", "nll", "brier"):
            report.null_reasons[name] = f"not a probability score: {score_kind}"

    for name, fn in calculators.items():
        try:
            setattr(report, name, fn())
        except FpkitError as exc:
            report.null_reasons[name] = _reason(exc)
    return report
