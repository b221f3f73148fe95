"""Bayes-optimal reject rules on Gaussian mixtures, exact and by Monte Carlo.

A :class:`MixtureSpec` describes an in-distribution mixture of isotropic
Gaussian classes, an out-of-distribution density (uniform box or isotropic
Gaussian), the in-distribution proportion ``pi_in`` and the reject cost
``cost``. Two reject rules are optimal for two different risks:

* failure prediction: reject when max_y P(y|x) < 1 - cost (Chow's rule);
* OOD detection: reject when p(x|in) / p(x|out) <= (1 - pi_in) / pi_in.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp

from .errors import InvalidInput, InvalidParam
from .evalcore import format_float, softmax

PI_IN_RANGE = (0.01, 0.99)
OOD_KINDS = ("uniform", "gaussian")
SCORE_IDS = ("true_posterior_max", "density_ratio", "msp_of_model")


@dataclass(frozen=True)
class OodSpec:
    kind: str
    low: np.ndarray | None = None
    high: np.ndarray | None = None
    mean: np.ndarray | None = None
    variance: float | None = None

    def __post_init__(self):
        if self.kind == "uniform":
            low, high = np.atleast_1d(np.asarray(self.low, float)), np.atleast_1d(np.asarray(self.high, float))
            if low.shape != high.shape or np.any(high <= low):
                raise InvalidInput("uniform OOD box needs low < high componentwise")
            object.__setattr__(self, "low", low)
            object.__setattr__(self, "high", high)
        elif self.kind == "gaussian":
            mean = np.atleast_1d(np.asarray(self.mean, float))
            if self.variance is None or not self.variance > 0:
                raise InvalidInput("gaussian OOD component needs variance > 0")
            object.__setattr__(self, "mean", mean)
            object.__setattr__(self, "variance", float(self.variance))
        else:
            raise InvalidInput(f"unknown OOD density {self.kind!r}; expected one of {OOD_KINDS}")

    @property
    def dim(self) -> int:
        return (self.low if self.kind == "uniform" else self.mean).size

    def to_dict(self) -> dict:
        if self.kind == "uniform":
            return {"kind": "uniform", "low": self.low.tolist(), "high": self.high.tolist()}
        return {"kind": "gaussian", "mean": self.mean.tolist(), "variance": self.variance}


@dataclass(frozen=True)
class MixtureSpec:
    means: np.ndarray  # K x d
    variances: np.ndarray  # K
    priors: np.ndarray  # K
    ood: OodSpec
    pi_in: float = 0.5
    cost: float = 0.2

    def __post_init__(self):
        means = np.asarray(self.means, float)
        if means.ndim == 1:
            means = means[:, None]
        k, d = means.shape
        variances = np.broadcast_to(np.asarray(self.variances, float), (k,)).copy()
        priors = np.asarray(self.priors, float)
        if not 1 <= d <= 2:
            raise InvalidInput(f"mixtures are limited to d <= 2, got d={d}")
        if priors.shape != (k,) or np.any(priors <= 0) or abs(priors.sum() - 1) > 1e-9:
            raise InvalidInput("class priors must be positive and sum to 1")
        if np.any(variances <= 0):
            raise InvalidInput("class variances must be positive")
        if self.ood.dim != d:
            raise InvalidInput("OOD density dimension differs from the classes'")
        if not PI_IN_RANGE[0] <= self.pi_in <= PI_IN_RANGE[1]:
            raise InvalidInput(f"pi_in must lie in [{PI_IN_RANGE[0]}, {PI_IN_RANGE[1]}]")
        if not 0 < self.cost < 1:
            raise InvalidInput("reject cost must lie in (0, 1)")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)
        object.__setattr__(self, "priors", priors)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def ood_threshold(self) -> float:
        """Density-ratio threshold (1 - pi_in) / pi_in."""
        return (1.0 - self.pi_in) / self.pi_in

    @classmethod
    def symmetric_1d(cls, delta_mu: float = 2.0, sigma: float = 1.0, ood: OodSpec | None = None,
                     pi_in: float = 0.5, cost: float = 0.2) -> "MixtureSpec":
        """Two equal-prior classes at +-delta_mu/2 with common std sigma."""
        ood = ood or OodSpec("uniform", low=[-10.0], high=[10.0])
        h = delta_mu / 2
        return cls(np.array([[-h], [h]]), np.array([sigma**2] * 2), np.array([0.5, 0.5]), ood, pi_in, cost)

    def to_dict(self) -> dict:
        return {
            "classes": [
                {"mean": m.tolist(), "variance": float(v), "prior": float(p)}
                for m, v, p in zip(self.means, self.variances, self.priors)
            ],
            "ood": self.ood.to_dict(),
            "pi_in": self.pi_in,
            "cost": self.cost,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureSpec":
        try:
            classes = d["classes"]
            means = np.array([np.atleast_1d(c["mean"]) for c in classes], float)
            variances = np.array([c["variance"] for c in classes], float)
            priors = np.array([c["prior"] for c in classes], float)
            ood = OodSpec(**d["ood"])
            return cls(means, variances, priors, ood, float(d.get("pi_in", 0.5)), float(d.get("cost", 0.2)))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidInput):
                raise
            raise InvalidInput(f"malformed mixture spec: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "MixtureSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise InvalidInput(f"cannot read {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidInput(f"{path}: invalid JSON at line {exc.lineno}") from exc


# --------------------------------------------------------------------------
# densities and posteriors


def _as_points(spec: MixtureSpec, x) -> np.ndarray:
    x = np.asarray(x, float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x[:, None] if spec.dim == 1 else x[None, :]
    if x.shape[1] != spec.dim:
        raise InvalidInput(f"points must have dimension {spec.dim}")
    return x


def class_log_joint(spec: MixtureSpec, x) -> np.ndarray:
    """log prior_k + log N(x; mu_k, var_k I), shape (n, K)."""
    x = _as_points(spec, x)
    d = spec.dim
    sq = np.sum((x[:, None, :] - spec.means[None, :, :]) ** 2, axis=2)
    return (np.log(spec.priors) - 0.5 * d * np.log(2 * np.pi * spec.variances)
            - 0.5 * sq / spec.variances)


def log_in_density(spec: MixtureSpec, x) -> np.ndarray:
    return logsumexp(class_log_joint(spec, x), axis=1)


def log_out_density(spec: MixtureSpec, x) -> np.ndarray:
    x = _as_points(spec, x)
    o = spec.ood
    if o.kind == "uniform":
        inside = np.all((x >= o.low) & (x <= o.high), axis=1)
        return np.where(inside, -np.sum(np.log(o.high - o.low)), -np.inf)
    sq = np.sum((x - o.mean) ** 2, axis=1)
    return -0.5 * spec.dim * np.log(2 * np.pi * o.variance) - 0.5 * sq / o.variance


def true_posterior(spec: MixtureSpec, x) -> np.ndarray:
    """P(y | x) for every class, shape (n, K)."""
    return softmax(class_log_joint(spec, x))


def log_density_ratio(spec: MixtureSpec, x) -> np.ndarray:
    """log p(x|in) - log p(x|out); +inf where the OOD density vanishes."""
    with np.errstate(invalid="ignore"):
        return log_in_density(spec, x) - log_out_density(spec, x)


def bayes_classifier(spec: MixtureSpec, x) -> np.ndarray:
    return np.argmax(class_log_joint(spec, x), axis=1)


# --------------------------------------------------------------------------
# rules and regions


@dataclass
class ThresholdRule:
    """Accept (g = 1) exactly when ``score(x) >= delta``."""

    score_id: str
    delta: float
    model: Callable | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.score_id not in SCORE_IDS:
            raise InvalidParam(f"unknown score {self.score_id!r}")
        if self.score_id == "msp_of_model" and self.model is None:
            raise InvalidParam("msp_of_model needs a model")

    def accept(self, spec: MixtureSpec, x) -> np.ndarray:
        return score_values(spec, self.score_id, x, self.model) >= self.delta


def _model_logits(model, x: np.ndarray) -> np.ndarray:
    if hasattr(model, "sizes") and hasattr(model, "params"):
        from .flatopt.mlp import forward

        return forward(model, x)[0]
    return np.asarray(model(x), float)


def score_values(spec: MixtureSpec, score_id: str, x, model=None) -> np.ndarray:
    x = _as_points(spec, x)
    if score_id == "true_posterior_max":
        return true_posterior(spec, x).max(axis=1)
    if score_id == "density_ratio":
        with np.errstate(over="ignore"):
            return np.exp(log_density_ratio(spec, x))
    if score_id == "msp_of_model":
        if model is None:
            raise InvalidParam("msp_of_model needs a model")
        return softmax(_model_logits(model, x)).max(axis=1)
    raise InvalidParam(f"unknown score {score_id!r}")


@dataclass
class RejectRegion:
    """Set of rejected inputs.

    ``intervals`` lists the closed-form or root-refined 1-D pieces (possibly
    unbounded) and is None in 2-D, where only the indicator is available.
    """

    indicator: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    intervals: list[tuple[float, float]] | None = None

    def contains(self, x) -> np.ndarray:
        return self.indicator(x)

    @property
    def is_empty(self) -> bool:
        return self.intervals is not None and len(self.intervals) == 0

    def to_dict(self) -> dict:
        if self.intervals is None:
            return {"intervals": None}
        return {"intervals": [[_json_float(a), _json_float(b)] for a, b in self.intervals]}


def _json_float(v: float):
    return float(v) if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def _level_set_1d(fn, lo: float, hi: float, n_grid: int = 4001, extend: bool = False):
    """Maximal intervals in [lo, hi] where fn(x) <= 0, with brentq-refined ends.

    With ``extend`` the outermost pieces touching lo / hi are taken to run off
    to -inf / +inf.
    """
    xs = np.linspace(lo, hi, n_grid)
    v = fn(xs)
    inside = v <= 0
    out = []
    i = 0
    while i < n_grid:
        if not inside[i]:
            i += 1
            continue
        j = i
        while j + 1 < n_grid and inside[j + 1]:
            j += 1
        a = xs[i] if i == 0 else _root(fn, xs[i - 1], xs[i])
        b = xs[j] if j == n_grid - 1 else _root(fn, xs[j], xs[j + 1])
        if extend and i == 0:
            a = -math.inf
        if extend and j == n_grid - 1:
            b = math.inf
        out.append((float(a), float(b)))
        i = j + 1
    return out


def _root(fn, a, b):
    fa, fb = fn(np.array([a]))[0], fn(np.array([b]))[0]
    if not (math.isfinite(fa) and math.isfinite(fb)):
        return b if math.isfinite(fb) else a
    if fa == 0:
        return a
    if fb == 0:
        return b
    return brentq(lambda t: fn(np.array([t]))[0], a, b, xtol=1e-13, rtol=1e-14)


def _span(spec: MixtureSpec) -> tuple[float, float]:
    sd = np.sqrt(spec.variances.max())
    lo, hi = spec.means.min() - 40 * sd, spec.means.max() + 40 * sd
    if spec.ood.kind == "gaussian":
        osd = math.sqrt(spec.ood.variance)
        lo, hi = min(lo, spec.ood.mean[0] - 40 * osd), max(hi, spec.ood.mean[0] + 40 * osd)
    return float(lo), float(hi)


def chow_reject_region(spec: MixtureSpec) -> RejectRegion:
    """Inputs whose top class posterior falls below 1 - cost."""
    level = 1.0 - spec.cost

    def indicator(x):
        return true_posterior(spec, x).max(axis=1) < level

    if level <= 1.0 / spec.num_classes:
        return RejectRegion(indicator, [] if spec.dim == 1 else None)
    if spec.dim != 1:
        return RejectRegion(indicator, None)
    if (spec.num_classes == 2 and spec.priors[0] == spec.priors[1]
            and spec.variances[0] == spec.variances[1]):
        mu0, mu1 = spec.means[:, 0]
        half = spec.variances[0] / abs(mu1 - mu0) * math.log(level / spec.cost)
        mid = (mu0 + mu1) / 2
        return RejectRegion(indicator, [(mid - half, mid + half)])
    lo, hi = _span(spec)
    fn = lambda xs: true_posterior(spec, xs).max(axis=1) - level  # noqa: E731
    # strict inequality: boundary points (measure zero) are reported inside
    return RejectRegion(indicator, _level_set_1d(fn, lo, hi))


def ood_reject_region(spec: MixtureSpec) -> RejectRegion:
    """Inputs whose in/out density ratio is at most (1 - pi_in) / pi_in (ties reject)."""
    log_thr = math.log(spec.ood_threshold)

    def indicator(x):
        return log_density_ratio(spec, x) <= log_thr

    if spec.dim != 1:
        return RejectRegion(indicator, None)
    fn = lambda xs: log_density_ratio(spec, xs) - log_thr  # noqa: E731
    if spec.ood.kind == "uniform":
        # outside the box the OOD density is zero, so nothing there is rejected
        lo, hi = float(spec.ood.low[0]), float(spec.ood.high[0])
        return RejectRegion(indicator, _level_set_1d(fn, lo, hi))
    lo, hi = _span(spec)
    return RejectRegion(indicator, _level_set_1d(fn, lo, hi, extend=True))


# --------------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True)
class McEstimate:
    value: float
    stderr: float
    n: int


@dataclass(frozen=True)
class McSample:
    x_in: np.ndarray
    y_in: np.ndarray
    x_out: np.ndarray


def _sample_shard(spec: MixtureSpec, n: int, seed_seq: np.random.SeedSequence):
    rng = np.random.default_rng(seed_seq)
    y = rng.choice(spec.num_classes, size=n, p=spec.priors)
    x = spec.means[y] + rng.normal(size=(n, spec.dim)) * np.sqrt(spec.variances[y])[:, None]
    o = spec.ood
    if o.kind == "uniform":
        xo = rng.uniform(o.low, o.high, size=(n, spec.dim))
    else:
        xo = o.mean + rng.normal(size=(n, spec.dim)) * math.sqrt(o.variance)
    return x, y, xo


def draw(spec: MixtureSpec, n_mc: int, seed: int = 0, n_shards: int = 1, workers: int = 1) -> McSample:
    """n_mc in-distribution and n_mc OOD points.

    Shard s uses the s-th child of ``SeedSequence(seed)``; the result depends
    on (seed, n_shards) only, never on ``workers``.
    """
    if n_mc < 1 or n_shards < 1:
        raise InvalidParam("n_mc and n_shards must be >= 1")
    children = np.random.SeedSequence(seed).spawn(n_shards)
    sizes = [n_mc // n_shards + (1 if s < n_mc % n_shards else 0) for s in range(n_shards)]
    jobs = list(zip(sizes, children))
    if workers > 1 and n_shards > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(lambda a: _sample_shard(spec, *a), jobs))
    else:
        parts = [_sample_shard(spec, *a) for a in jobs]
    return McSample(*(np.concatenate([p[i] for p in parts]) for i in range(3)))


def _mean_se(loss: np.ndarray) -> tuple[float, float]:
    n = loss.size
    return float(loss.mean()), float(loss.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan


def fp_risk_from_accept(spec: MixtureSpec, accept: np.ndarray, y: np.ndarray, bayes_pred: np.ndarray) -> McEstimate:
    loss = spec.cost * (~accept) + (bayes_pred != y) * accept
    v, se = _mean_se(loss.astype(float))
    return McEstimate(v, se, loss.size)


def ood_risk_from_accept(spec: MixtureSpec, accept_in: np.ndarray, accept_out: np.ndarray) -> McEstimate:
    p = spec.pi_in
    r_in, se_in = _mean_se((~accept_in).astype(float))
    r_out, se_out = _mean_se(accept_out.astype(float))
    value = p * r_in + (1 - p) * r_out
    return McEstimate(value, math.sqrt((p * se_in) ** 2 + ((1 - p) * se_out) ** 2), accept_in.size + accept_out.size)


def fp_risk(spec: MixtureSpec, rule: ThresholdRule, n_mc: int = 100_000, seed: int = 0,
            n_shards: int = 1, workers: int = 1) -> McEstimate:
    """E[cost * 1(g = 0) + 1(f*(x) != y) * 1(g = 1)] over the in-distribution mixture."""
    s = draw(spec, n_mc, seed, n_shards, workers)
    return fp_risk_from_accept(spec, rule.accept(spec, s.x_in), s.y_in, bayes_classifier(spec, s.x_in))


def ood_risk(spec: MixtureSpec, rule: ThresholdRule, n_mc: int = 100_000, seed: int = 0,
             n_shards: int = 1, workers: int = 1) -> McEstimate:
    """pi_in * P(reject | in) + (1 - pi_in) * P(accept | out)."""
    s = draw(spec, n_mc, seed, n_shards, workers)
    return ood_risk_from_accept(spec, rule.accept(spec, s.x_in), rule.accept(spec, s.x_out))


@dataclass
class SweepTable:
    score_id: str
    rows: list[tuple[float, float, float, float, float]]

    HEADER = "delta,fp_risk,fp_stderr,ood_risk,ood_stderr"

    def column(self, name: str) -> np.ndarray:
        return np.array([r[self.HEADER.split(",").index(name)] for r in self.rows])

    def to_csv(self) -> str:
        lines = [self.HEADER] + [",".join(format_float(v) for v in r) for r in self.rows]
        return "\n".join(lines) + "\n"


def sweep_thresholds(spec: MixtureSpec, score_id: str, grid, n_mc: int = 100_000, seed: int = 0,
                     model=None, n_shards: int = 1, workers: int = 1) -> SweepTable:
    """Both risks for ``score >= delta`` at every delta, on one common sample."""
    grid = np.atleast_1d(np.asarray(grid, float))
    if score_id not in SCORE_IDS:
        raise InvalidParam(f"unknown score {score_id!r}")
    s = draw(spec, n_mc, seed, n_shards, workers)
    s_in = score_values(spec, score_id, s.x_in, model)
    s_out = score_values(spec, score_id, s.x_out, model)
    bayes = bayes_classifier(spec, s.x_in)
    rows = []
    for delta in grid:
        a_in, a_out = s_in >= delta, s_out >= delta
        fp = fp_risk_from_accept(spec, a_in, s.y_in, bayes)
        od = ood_risk_from_accept(spec, a_in, a_out)
        rows.append((float(delta), fp.value, fp.stderr, od.value, od.stderr))
    return SweepTable(score_id, rows)


def bayes_error_1d(spec: MixtureSpec) -> float:
    """Closed-form Bayes error Phi(-|delta_mu| / (2 sigma)) for the symmetric 1-D case."""
    from scipy.stats import norm

    if not (spec.dim == 1 and spec.num_classes == 2 and spec.priors[0] == spec.priors[1]
            and spec.variances[0] == spec.variances[1]):
        raise InvalidParam("closed form needs two equal-prior, equal-variance 1-D classes")
    dmu = abs(spec.means[1, 0] - spec.means[0, 0])
    return float(norm.cdf(-dmu / (2 * math.sqrt(spec.variances[0]))))
