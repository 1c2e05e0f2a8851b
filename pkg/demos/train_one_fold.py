"""Adversarial training with one subject held out as the unlabeled target.

Prints the per-epoch losses, the reversal strength and the held-out accuracy,
then the same fold with the reversal switched off.
"""
from dataclasses import replace

from dua.harness import benchmark_spec, desk_model_config, evaluate, synth_generate
from dua.model import DuAModel
from dua.training import TrainConfig, train

ds = synth_generate(benchmark_spec(seed=0))
held = ds.subjects[-1]
source = [t for t in ds.trials if t.subject_id != held]
test = ds.by_subject(held)
target = [replace(t, label=-1) for t in test]

for lam in (None, 0.0):
    model = DuAModel(desk_model_config(), seed=0)
    result = train(model, source, target, TrainConfig(epochs=10, seed=0), lam_override=lam)
    print("reversal:", "scheduled" if lam is None else "off")
    for e in result.history:
        print(f"  epoch {e.epoch:2d}  L_C {e.L_C:.4f}  L_adv {e.L_adv:.4f}  lambda {e.lam:.3f}  source {e.source_acc:5.1f}%")
    acc, conf = evaluate(model, test)
    print(f"  held-out {held}: {acc:.1f}%  confusion {conf.tolist()}")
