"""Tour of the Markov task: feature scales, sampled text, nested predictors, ideal attention."""

import numpy as np

from stagewise.attention import build_ideal_params, predict
from stagewise.harness.probes import kl_divergence
from stagewise.markov import make_rng, minimal_task, next_token_distribution, restricted_predictor, sample_batch, windows


def main():
    spec = minimal_task(d=20, T=20, m=1.7, b0=10.0, seed=0)
    print(f"vocabulary {spec.d}, window {spec.w}, predicted positions {spec.T}")
    print("lag groups:", spec.intervals)
    print("feature scales:", np.round(spec.scales, 3))

    seqs = sample_batch(spec, 200, make_rng(0, "tour"))
    print("\nfirst sequence:", " ".join(str(x) for x in seqs[0]))

    # Each extra group of lags brings the predictor closer to the true law.
    contexts = windows(spec, seqs)
    truth = next_token_distribution(spec, contexts)
    print("\nKL(restricted || full) as groups are added:")
    for i in range(1, spec.h + 1):
        kl = kl_divergence(restricted_predictor(spec, i, contexts), truth).mean()
        print(f"  first {i} group(s): {kl:.4f}")

    # A hand-built model: head k attends to the lags of group k with sharpness lam.
    print("\nKL(truth || hand-built attention model):")
    for lam in (0.0, 5.0, 10.0, 25.0, 50.0):
        kl = kl_divergence(truth, predict(build_ideal_params(spec, lam), seqs)).mean()
        print(f"  sharpness {lam:5.1f}: {kl:.2e}")


if __name__ == "__main__":
    main()
