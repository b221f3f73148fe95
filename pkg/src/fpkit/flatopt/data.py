"""Small synthetic 2-D datasets for training experiments."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import InvalidParam
from ..evalcore import format_float

DATASET_KINDS = ("two_moons", "gaussian_blobs", "ring_ood")

BLOB_RADIUS = 3.0
RING_RADII = (7.0, 9.0)
OOD_LABEL = -1


@dataclass(frozen=True)
class Dataset:
    """Inputs, observed labels and the generating component of each point.

    ``labels`` differ from ``component`` only where label noise flipped them.
    Out-of-distribution points carry label and component -1.
    """

    x: np.ndarray
    labels: np.ndarray
    component: np.ndarray
    num_classes: int
    kind: str

    def __len__(self) -> int:
        return self.x.shape[0]

    def to_csv(self) -> str:
        lines = [",".join([f"x{i}" for i in range(self.x.shape[1])] + ["label"])]
        for row, y in zip(self.x, self.labels):
            lines.append(",".join([format_float(v) for v in row] + [str(int(y))]))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="\n")


def _two_moons(n, noise, rng):
    n_outer = n // 2
    n_inner = n - n_outer
    t_out = rng.uniform(0, np.pi, n_outer)
    t_in = rng.uniform(0, np.pi, n_inner)
    outer = np.column_stack([np.cos(t_out), np.sin(t_out)])
    inner = np.column_stack([1 - np.cos(t_in), 0.5 - np.sin(t_in)])
    x = np.vstack([outer, inner])
    comp = np.r_[np.zeros(n_outer, int), np.ones(n_inner, int)]
    x = x + rng.normal(0, noise, size=x.shape)
    perm = rng.permutation(n)
    return x[perm], comp[perm], 2


def blob_centers(k: int = 3) -> np.ndarray:
    angles = np.pi / 2 + 2 * np.pi * np.arange(k) / k
    return BLOB_RADIUS * np.column_stack([np.cos(angles), np.sin(angles)])


def _blobs(n, noise, rng, k=3):
    comp = rng.integers(0, k, size=n)
    x = blob_centers(k)[comp] + rng.normal(0, noise, size=(n, 2))
    return x, comp, k


def _ring(n, rng):
    r = rng.uniform(*RING_RADII, size=n)
    a = rng.uniform(0, 2 * np.pi, size=n)
    x = np.column_stack([r * np.cos(a), r * np.sin(a)])
    return x, np.full(n, OOD_LABEL), 0


def make_dataset(kind: str, n: int, noise: float | None = None, label_noise: float = 0.0,
                 seed: int = 0) -> Dataset:
    """Generate ``n`` points; ``noise`` is the Gaussian input noise std.

    With ``label_noise`` > 0, each label is replaced with that probability by
    a uniformly drawn different class. ``ring_ood`` points surround the blob
    centroids at radius 7-9 and are meant as outliers.
    """
    if kind not in DATASET_KINDS:
        raise InvalidParam(f"unknown dataset {kind!r}")
    if n < 0:
        raise InvalidParam("n must be >= 0")
    if not 0 <= label_noise < 1:
        raise InvalidParam("label_noise must be in [0, 1)")
    rng = np.random.default_rng(seed)
    if kind == "two_moons":
        x, comp, k = _two_moons(n, 0.1 if noise is None else noise, rng)
    elif kind == "gaussian_blobs":
        x, comp, k = _blobs(n, 1.0 if noise is None else noise, rng)
    else:
        x, comp, k = _ring(n, rng)
    x = x.reshape(n, 2)
    labels = comp.copy()
    if label_noise > 0 and k > 1 and n > 0:
        flip = rng.random(n) < label_noise
        shift = rng.integers(1, k, size=n)
        labels = np.where(flip, (comp + shift) % k, comp)
    return Dataset(x, labels, comp, k, kind)
