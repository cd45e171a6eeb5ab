"""Train the attention-only model and watch it pass through the nested predictors.

A reduced configuration so the run finishes in a few minutes on one core;
the metric log and plots go to demos_out/train.
"""

from pathlib import Path

from stagewise.harness.config import config_from_dict
from stagewise.harness.experiment import run_experiment
from stagewise.harness.outputs import plot_training


def main(out="demos_out/train"):
    cfg = config_from_dict({
        "task": {"d": 10, "T": 10, "b0": 10.0},
        "optim": {"steps": 600, "batch_size": 256},
        "data": {"train": 3000, "test": 256},
        "probes": {"stride": 20, "batch": 256},
    })
    result = run_experiment(cfg)
    log = result.log
    print("step   val_loss  " + "  ".join(f"KL_{i}" for i in cfg.predictor_indices()))
    for row in range(0, len(log), 3):
        kls = "  ".join(f"{log.column(f'kl_gt_{i}')[row]:.3f}" for i in cfg.predictor_indices())
        print(f"{int(log.column('step')[row]):5d}  {log.column('val_loss')[row]:.4f}  {kls}")
    print("summary:", result.summary())

    Path(out).mkdir(parents=True, exist_ok=True)
    log.write_csv(Path(out) / "metrics.csv")
    for name in plot_training(log, out, cfg.task.h, cfg.task.w):
        print("wrote", Path(out) / name)


if __name__ == "__main__":
    main()
