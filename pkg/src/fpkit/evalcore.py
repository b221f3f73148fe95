"""Classifier outputs and post-hoc confidence scores.

Every score here is oriented so that a larger value means "more confident,
keep this prediction". Energy and entropy are therefore negated relative to
their textbook definitions. All logarithms are natural.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import InvalidInput, InvalidParam, MissingModelAccess

SCORE_KINDS = (
    "msp",
    "neg_entropy",
    "margin",
    "max_logit",
    "energy",
    "odin_t",
    "react_msp",
    "doctor_none",
)

# scores whose values are probabilities of the predicted class
PROBABILITY_SCORES = frozenset({"msp", "odin_t", "react_msp"})

HEAD_TOLERANCE = 1e-6


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ClassifierHead:
    """Final linear layer: ``logits = features @ weights.T + bias``."""

    weights: np.ndarray  # K x D
    bias: np.ndarray  # K

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        b = np.asarray(self.bias, dtype=float)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise InvalidInput(f"head shapes {w.shape} / {b.shape} are inconsistent")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise InvalidInput("classifier head contains non-finite values")
        object.__setattr__(self, "weights", _readonly(w))
        object.__setattr__(self, "bias", _readonly(b))

    def __call__(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=float) @ self.weights.T + self.bias


@dataclass(frozen=True)
class EvalSet:
    """Logits with integer labels, optionally with penultimate features and head."""

    logits: np.ndarray
    labels: np.ndarray
    features: np.ndarray | None = None
    head: ClassifierHead | None = None

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=float)
        labels = np.asarray(self.labels)
        if logits.ndim != 2:
            raise InvalidInput(f"logits must be N x K, got shape {logits.shape}")
        n, k = logits.shape
        if n < 1 or k < 2:
            raise InvalidInput(f"need N >= 1 and K >= 2, got N={n}, K={k}")
        if not np.all(np.isfinite(logits)):
            raise InvalidInput("logits contain non-finite values")
        if labels.shape != (n,):
            raise InvalidInput(f"labels must have shape ({n},), got {labels.shape}")
        if labels.dtype.kind == "f":
            if not np.all(labels == np.round(labels)):
                raise InvalidInput("labels must be integers")
        elif labels.dtype.kind not in "iu":
            raise InvalidInput("labels must be integers")
        labels = labels.astype(np.int64)
        if labels.min() < 0 or labels.max() >= k:
            raise InvalidInput(f"labels must lie in [0, {k})")
        object.__setattr__(self, "logits", _readonly(logits))
        object.__setattr__(self, "labels", _readonly(labels))

        if self.features is not None:
            feats = np.asarray(self.features, dtype=float)
            if feats.ndim != 2 or feats.shape[0] != n:
                raise InvalidInput(f"features must be {n} x D, got shape {feats.shape}")
            if not np.all(np.isfinite(feats)):
                raise InvalidInput("features contain non-finite values")
            object.__setattr__(self, "features", _readonly(feats))
        if self.head is not None:
            if self.head.weights.shape[0] != k:
                raise InvalidInput("classifier head has the wrong number of classes")
            if self.features is not None:
                if self.head.weights.shape[1] != self.features.shape[1]:
                    raise InvalidInput("classifier head and features disagree on D")
                err = np.max(np.abs(self.head(self.features) - logits))
                if err > HEAD_TOLERANCE:
                    raise InvalidInput(
                        f"head(features) differs from stored logits by {err:.3g} (> {HEAD_TOLERANCE})"
                    )

    @property
    def n(self) -> int:
        return self.logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    def with_logits(self, logits: np.ndarray) -> "EvalSet":
        # features/head no longer describe rescaled logits
        return EvalSet(logits, self.labels)


@dataclass(frozen=True)
class ScoreVector:
    kind: str
    values: np.ndarray
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise InvalidParam(f"unknown score kind {self.kind!r}")
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise InvalidInput("score values must be one-dimensional")
        if not np.all(np.isfinite(v)):
            raise InvalidInput(f"{self.kind} scores contain non-finite values")
        object.__setattr__(self, "values", _readonly(v))

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class CorrectnessMask:
    predicted: np.ndarray
    correct: np.ndarray

    def __len__(self) -> int:
        return self.correct.shape[0]


def correctness(eval_set: EvalSet) -> CorrectnessMask:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    pred = np.argmax(eval_set.logits, axis=1)
    return CorrectnessMask(_readonly(pred), _readonly(pred == eval_set.labels))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(z)):
        raise InvalidInput("softmax input must be finite")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction. Accepts a K-vector or an N x K matrix."""
    z = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(z)):
        raise InvalidInput("softmax input must be finite")
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def logsumexp(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    m = np.max(z, axis=-1)
    return m + np.log(np.sum(np.exp(z - m[..., None]), axis=-1))


def _check_temperature(T: float) -> float:
    T = float(T)
    if not np.isfinite(T) or T <= 0:
        raise InvalidParam(f"temperature must be positive, got {T}")
    return T


def score_msp(eval_set: EvalSet) -> ScoreVector:
    return ScoreVector("msp", softmax(eval_set.logits).max(axis=1))


def score_neg_entropy(eval_set: EvalSet) -> ScoreVector:
    logp = log_softmax(eval_set.logits)
    p = np.exp(logp)
    # p underflows to exactly 0 where logp is very negative, so 0*log0 -> 0
    return ScoreVector("neg_entropy", np.sum(p * logp, axis=1))


def score_margin(eval_set: EvalSet) -> ScoreVector:
    p = np.sort(softmax(eval_set.logits), axis=1)
    return ScoreVector("margin", p[:, -1] - p[:, -2])


def score_max_logit(eval_set: EvalSet) -> ScoreVector:
    return ScoreVector("max_logit", eval_set.logits.max(axis=1))


def score_energy(eval_set: EvalSet, T: float = 1.0) -> ScoreVector:
    """Negative free energy ``T * logsumexp(z / T)``."""
    T = _check_temperature(T)
    return ScoreVector("energy", T * logsumexp(eval_set.logits / T), {"T": T})


def score_odin_t(eval_set: EvalSet, T: float = 1000.0) -> ScoreVector:
    """MSP after temperature scaling; ODIN's input perturbation is not applied."""
    T = _check_temperature(T)
    return ScoreVector("odin_t", softmax(eval_set.logits / T).max(axis=1), {"T": T})


def react_threshold(features: np.ndarray, percentile: float = 90.0) -> float:
    """Clipping threshold taken over all activations pooled together."""
    percentile = float(percentile)
    if not 0 < percentile <= 100:
        raise InvalidParam(f"percentile must be in (0, 100], got {percentile}")
    return float(np.percentile(np.asarray(features, dtype=float), percentile))


def react_logits(eval_set: EvalSet, percentile: float = 90.0, threshold: float | None = None,
                 reference_features: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Logits recomputed from clipped features, and the clipping threshold used."""
    if eval_set.features is None or eval_set.head is None:
        raise MissingModelAccess("react needs both features and the classifier head")
    if threshold is None:
        ref = eval_set.features if reference_features is None else reference_features
        threshold = react_threshold(ref, percentile)
    return eval_set.head(np.minimum(eval_set.features, threshold)), float(threshold)


def score_react(
    eval_set: EvalSet,
    percentile: float = 90.0,
    threshold: float | None = None,
    reference_features: np.ndarray | None = None,
) -> ScoreVector:
    """MSP of logits recomputed from features clipped at an activation percentile.

    The percentile is computed over ``reference_features`` when given (e.g. a
    held-out split), otherwise over the features of ``eval_set`` itself. An
    explicit ``threshold`` bypasses the percentile entirely.
    """
    logits, threshold = react_logits(eval_set, percentile, threshold, reference_features)
    params = {"percentile": float(percentile), "threshold": float(threshold)}
    return ScoreVector("react_msp", softmax(logits).max(axis=1), params)


_DISPATCH = {
    "msp": score_msp,
    "neg_entropy": score_neg_entropy,
    "margin": score_margin,
    "max_logit": score_max_logit,
    "energy": score_energy,
    "odin_t": score_odin_t,
    "react_msp": score_react,
}


def compute_score(eval_set: EvalSet, kind: str, **params) -> ScoreVector:
    if kind == "doctor_none":
        raise InvalidParam("doctor_none is reserved and has no implementation")
    try:
        fn = _DISPATCH[kind]
    except KeyError:
        raise InvalidParam(f"unknown score kind {kind!r}") from None
    return fn(eval_set, **params)


# --------------------------------------------------------------------------
# file formats


def _parse_rows(text: str, what: str) -> tuple[list[str], list[list[float]]]:
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise InvalidInput(f"{what}: empty file (line 1)") from None
    header = [h.strip() for h in header]
    rows = []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise InvalidInput(
                f"{what}: line {line} has {len(row)} fields, expected {len(header)}"
            )
        try:
            rows.append([float(c) for c in row])
        except ValueError:
            raise InvalidInput(f"{what}: line {line} has a non-numeric field") from None
    return header, rows


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidInput(f"cannot read {path}: {exc.strerror}") from exc


def parse_evalset_csv(text: str) -> tuple[np.ndarray, np.ndarray]:
    header, rows = _parse_rows(text, "logits csv")
    k = len(header) - 1
    if k < 2 or header[-1] != "label" or header[:-1] != [f"l{i}" for i in range(k)]:
        raise InvalidInput("logits csv: line 1 must be the header l0,...,l{K-1},label")
    if not rows:
        raise InvalidInput("logits csv: no data rows")
    data = np.array(rows, dtype=float)
    return data[:, :-1], data[:, -1]


def read_evalset(path, features_path=None, head_path=None) -> EvalSet:
    logits, labels = parse_evalset_csv(_read_text(path))
    features = head = None
    if features_path is not None:
        header, rows = _parse_rows(_read_text(features_path), "features csv")
        if header != [f"f{i}" for i in range(len(header))]:
            raise InvalidInput("features csv: line 1 must be the header f0,...,f{D-1}")
        features = np.array(rows, dtype=float).reshape(len(rows), len(header))
    if head_path is not None:
        head = read_head(head_path)
    return EvalSet(logits, labels, features, head)


def read_head(path) -> ClassifierHead:
    try:
        obj = json.loads(_read_text(path))
        return ClassifierHead(np.array(obj["weights"], dtype=float), np.array(obj["bias"], dtype=float))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InvalidInput(f"classifier head {path}: {exc}") from exc


def format_float(x: float) -> str:
    """Shortest round-trip decimal representation."""
    return repr(float(x))


def evalset_to_csv(eval_set: EvalSet) -> str:
    k = eval_set.num_classes
    lines = [",".join([f"l{i}" for i in range(k)] + ["label"])]
    for row, y in zip(eval_set.logits, eval_set.labels):
        lines.append(",".join([format_float(v) for v in row] + [str(int(y))]))
    return "\n".join(lines) + "\n"


def write_evalset(eval_set: EvalSet, path) -> None:
    Path(path).write_text(evalset_to_csv(eval_set), encoding="utf-8", newline="\n")


def write_features(features: np.ndarray, path) -> None:
    d = features.shape[1]
    lines = [",".join(f"f{i}" for i in range(d))]
    lines += [",".join(format_float(v) for v in row) for row in features]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
