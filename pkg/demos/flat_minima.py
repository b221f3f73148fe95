"""Train sgd, swa and fmfp on noisy two-moons and compare failure prediction.

Run: python demos/flat_minima.py [n_seeds]
"""

import sys

import numpy as np

from fpkit.flatopt import TrainConfig, make_dataset, model_evalset, train
from fpkit.metrics import full_report


def main(n_seeds: int = 3) -> None:
    for method in ("sgd", "swa", "fmfp"):
        reports, peak_gap = [], []
        for seed in range(n_seeds):
            tr = make_dataset("two_moons", 300, 0.2, label_noise=0.1, seed=100 + seed)
            te = make_dataset("two_moons", 2000, 0.2, seed=200 + seed)
            res = train(TrainConfig(method=method, epochs=200, seed=seed), tr, te)
            reports.append(full_report(model_evalset(res.model, te), "msp"))
            curve = [h["test_auroc"] for h in res.history]
            peak_gap.append(max(curve) - curve[-1])
        auroc = np.mean([r.auroc for r in reports])
        aurc = np.mean([r.aurc for r in reports]) * 1000
        acc = np.mean([r.accuracy for r in reports])
        print(f"{method:5s} acc {acc:.4f}  AUROC {auroc:.4f}  AURC x1000 {aurc:7.2f}  "
              f"drop from peak AUROC {np.mean(peak_gap):.4f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 3)
