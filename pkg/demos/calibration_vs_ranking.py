"""Temperature scaling fixes calibration but barely moves failure ranking.

With more than two classes, T changes the order of MSP across rows, so
AUROC can shift slightly; the predicted class never changes.

Run: python demos/calibration_vs_ranking.py
"""

import numpy as np

from fpkit.calibration import apply_temperature, decompose_score, fit_temperature
from fpkit.evalcore import EvalSet
from fpkit.metrics import full_report


def main() -> None:
    r = np.random.default_rng(0)
    n, k = 20_000, 5
    z = r.normal(0, 1.5, size=(n, k))
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    y = np.array([r.choice(k, p=row) for row in p])
    over = EvalSet(3.0 * z, y)  # overconfident logits

    half = n // 2
    fit = fit_temperature(EvalSet(over.logits[:half], y[:half]))
    test = EvalSet(over.logits[half:], y[half:])
    scaled = apply_temperature(test, fit.T)
    print(f"fitted T = {fit.T:.4f}")
    for name, e in (("raw", test), ("scaled", scaled)):
        rep = full_report(e, "msp")
        dec = decompose_score(e, "brier", 15)
        print(f"{name:6s} ECE {rep.ece:.4f}  NLL {rep.nll:.4f}  AUROC {rep.auroc:.4f}  AURC {rep.aurc:.4f}  "
              f"brier calibration term {dec.calibration_term:.4f}")


if __name__ == "__main__":
    main()
