"""Chow's rule and the density-ratio rule reject different points.

Run: python demos/reject_regions.py
"""

import numpy as np

from fpkit.bayeslab import (
    MixtureSpec,
    OodSpec,
    ThresholdRule,
    chow_reject_region,
    fp_risk,
    ood_reject_region,
    ood_risk,
    score_values,
)


def main() -> None:
    spec = MixtureSpec.symmetric_1d(2.0, 1.0, OodSpec("uniform", low=[-20.0], high=[20.0]), 0.5, 0.2)
    print("chow reject region   ", chow_reject_region(spec).to_dict()["intervals"])
    print("density reject region", ood_reject_region(spec).to_dict()["intervals"])

    rules = {
        "chow": ThresholdRule("true_posterior_max", 1 - spec.cost),
        "density": ThresholdRule("density_ratio", spec.ood_threshold),
    }
    for name, rule in rules.items():
        fp = fp_risk(spec, rule, 200_000, seed=0)
        od = ood_risk(spec, rule, 200_000, seed=0)
        print(f"{name:8s} fp_risk {fp.value:.4f} +- {fp.stderr:.4f}   ood_risk {od.value:.4f} +- {od.stderr:.4f}")

    x = np.array([0.0, 1.0, 3.0, 11.0])
    msp = score_values(spec, "true_posterior_max", x)
    rejected = ood_reject_region(spec).contains(x)
    for xi, m, rej in zip(x, msp, rejected):
        print(f"x = {xi:5.1f}  true-posterior MSP {m:.4f}  density rule rejects: {bool(rej)}")


if __name__ == "__main__":
    main()
