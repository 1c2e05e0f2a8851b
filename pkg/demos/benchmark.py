"""Leave-one-subject-out accuracy on the subject-shifted benchmark.

Compares adversarial training with the identical model trained with the
reversal strength held at zero, and the ablated variants, for one seed.
Each line is a full eight-fold run of about 40 s on one core.
"""
import sys

from dua.harness import run_benchmark

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
runs = [("full", None), ("full", 0.0), ("temp_only", None), ("spat_temp", None), ("spec_temp", None),
        ("no_positional_encoding", None)]
for variant, lam in runs:
    rep = run_benchmark(seed, variant, lam)
    label = variant + (" (lambda=0)" if lam == 0.0 else "")
    print(f"{label:28s} mean {rep.mean:6.2f}  folds {[round(a) for a in rep.accuracies]}")
