"""Run the configured theory checks over seeds."""

from __future__ import annotations

from ..errors import ConfigError
from ..flow import build_ground_truth
from ..markov import make_rng
from .. import theory
from .config import ExperimentConfig

CHECKS = ("competitive_fixed_point", "bounded_deviation", "boundedcoop", "cooperative_convergence",
          "higher_order", "early_alignment")


def run_check(name: str, cfg: ExperimentConfig, seed: int) -> theory.CheckReport:
    v = cfg.verify
    gt = build_ground_truth(v.d, v.T, v.h, v.m, v.b0, make_rng(seed, "verify", "ground_truth"))
    rng = make_rng(seed, "verify", name)
    tol = v.tolerances
    if name == "competitive_fixed_point":
        return theory.check_competitive_fixed_point(gt, v.h, tolerances=tol)
    if name == "bounded_deviation":
        return theory.check_bounded_deviation(gt, v.h, v.eps, rng, tolerances=tol)
    if name == "boundedcoop":
        return theory.check_boundedcoop(gt, v.h, v.eps, rng, tolerances=tol)
    if name == "cooperative_convergence":
        return theory.check_cooperative_convergence(gt, v.h, v.breakaway_eps, tolerances=tol)
    if name == "higher_order":
        return theory.check_higher_order(gt, v.h, v.h, v.breakaway_eps, tolerances=tol)
    if name == "early_alignment":
        return theory.check_early_alignment(gt, v.h, rng)
    raise ConfigError(f"unknown check {name!r}; known: {list(CHECKS)}")


def run_checks(cfg: ExperimentConfig) -> list[tuple[int, theory.CheckReport]]:
    unknown = [c for c in cfg.verify.checks if c not in CHECKS]
    if unknown:
        raise ConfigError(f"unknown checks {unknown}; known: {list(CHECKS)}")
    return [(int(seed), run_check(name, cfg, int(seed))) for name in cfg.verify.checks for seed in cfg.verify.seeds]
