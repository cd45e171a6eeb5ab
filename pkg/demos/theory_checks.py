"""Numerical certification of the reduced dynamics, one report per check."""

import numpy as np

from stagewise.flow import build_ground_truth
from stagewise.markov import make_rng
from stagewise import theory


def show(report):
    worst = {k: f"{v:.3g}" for k, v in report.residuals.items()}
    print(f"{report.name:26s} {report.status:18s} {worst}")


def main():
    gt = build_ground_truth(10, 10, 3, 1.7, 1.0, make_rng(0, "demo", "ground_truth"))
    print("scales:", np.round(gt.scales, 3), "\n")
    show(theory.check_competitive_fixed_point(gt, 3))
    show(theory.check_bounded_deviation(gt, 3, 1e-4, make_rng(0, "demo", "deviation")))
    show(theory.check_boundedcoop(gt, 3, 1e-4, make_rng(0, "demo", "coop")))
    show(theory.check_early_alignment(gt, 3, make_rng(0, "demo", "alignment")))
    show(theory.check_lyapunov_suite(gt, 3, make_rng(0, "demo", "lyapunov")))

    # The slow breakaway flow stalls with attention split between features 1 and 2: expected to fail.
    report = theory.check_higher_order(gt, 3, 2, 1e-2)
    show(report)
    m = report.measurements
    print(f"  distance to V_2*: {m['value_residual']:.3f}, to m_2 V_2*: {m['scaled_value_residual']:.3f},"
          f" attention on feature 2: {m['final_attention_on_target']:.3f}")

    # An unperturbed breakaway head sits at a saddle.
    show(theory.check_higher_order(gt, 3, 2, 0.0))


if __name__ == "__main__":
    main()
