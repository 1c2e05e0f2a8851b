"""Leave-one-subject-out evaluation and a synthetic, subject-shifted benchmark."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import Dataset, Trial
from .model import DuAConfig, DuAModel
from .numerics import UsageError
from .training import TrainConfig, collate, train

REPORT_COLUMNS = ("fold", "subject", "task", "variant", "seed", "accuracy", "n_test")
THREADS_ENV = "DUA_THREADS"


@dataclass(frozen=True)
class FoldPlan:
    held_out_subject: str
    train_subjects: tuple[str, ...]
    task: int


def loso_folds(dataset: Dataset, task: int | None = None) -> list[FoldPlan]:
    """One fold per subject, in sorted subject order."""
    subjects = dataset.subjects
    if len(subjects) < 2:
        raise UsageError("leave-one-subject-out needs at least two subjects")
    task = task or dataset.n_classes or 2
    return [FoldPlan(s, tuple(x for x in subjects if x != s), task) for s in subjects]


def evaluate(model: DuAModel, trials: Sequence[Trial], n_classes: int | None = None, batch_size: int = 16):
    """Accuracy (%) and confusion matrix (rows = true class) of argmax predictions.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class index.
    """
    if not trials:
        raise UsageError("evaluate needs at least one trial")
    k = n_classes or model.cfg.n_classes
    conf = np.zeros((k, k), dtype=np.int64)
    for start in range(0, len(trials), batch_size):
        chunk = trials[start:start + batch_size]
        batch = collate(chunk, dtype=model.dtype)
        pred = np.argmax(model.predict_logits(batch.features, batch.lengths), axis=1)
        for tr, p in zip(chunk, pred):
            conf[tr.label, p] += 1
    return 100.0 * np.trace(conf) / conf.sum(), conf


@dataclass
class CVReport:
    subjects: list[str]
    accuracies: list[float]
    n_test: list[int]
    confusions: list[np.ndarray]
    task: int
    variant: str
    seed: int
    fingerprint: str = ""
    config: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# " + json.dumps({"fingerprint": self.fingerprint, **self.config}, sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for i, (s, acc, n) in enumerate(zip(self.subjects, self.accuracies, self.n_test)):
            w.writerow([i, s, self.task, self.variant, self.seed, f"{acc:.4f}", n])
        w.writerow(["mean", "", self.task, self.variant, self.seed, f"{self.mean:.4f}", sum(self.n_test)])
        w.writerow(["std", "", self.task, self.variant, self.seed, f"{self.std:.4f}", sum(self.n_test)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def fingerprint(*configs) -> str:
    blob = json.dumps([asdict(c) for c in configs], sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def default_threads() -> int:
    return max(1, int(os.environ.get(THREADS_ENV, "1")))


def run_fold(dataset: Dataset, plan: FoldPlan, model_cfg: DuAConfig, train_cfg: TrainConfig,
             lam_override: float | None = None, log_dir=None):
    """Train on the plan's subjects with the held-out subject as unlabeled target, then score it."""
    if log_dir is not None:
        train_cfg = replace(train_cfg, log_path=str(Path(log_dir) / f"{plan.held_out_subject}.csv"))
    source = [t for t in dataset.trials if t.subject_id in plan.train_subjects]
    held_out = dataset.by_subject(plan.held_out_subject)
    # labels are withheld from the training path and only re-attached for scoring
    target = [replace(t, label=-1) for t in held_out]
    model = DuAModel(model_cfg, seed=train_cfg.seed)
    train(model, source, target, train_cfg, lam_override=lam_override)
    acc, conf = evaluate(model, held_out, model_cfg.n_classes)
    return acc, conf, len(held_out)


def run_cv(
    dataset: Dataset,
    model_cfg: DuAConfig,
    train_cfg: TrainConfig,
    threads: int | None = None,
    lam_override: float | None = None,
    subjects: Sequence[str] | None = None,
    log_dir=None,
) -> CVReport:
    """Full leave-one-subject-out run; results are merged in fold order.

    ``log_dir`` receives one per-epoch training log per fold. Log and
    checkpoint paths are left out of the report header so the report only
    depends on data and hyperparameters.
    """
    plans = loso_folds(dataset, model_cfg.n_classes)
    if subjects is not None:
        plans = [p for p in plans if p.held_out_subject in set(subjects)]
    threads = threads or default_threads()
    if threads == 1:
        results = [run_fold(dataset, p, model_cfg, train_cfg, lam_override, log_dir) for p in plans]
    else:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda p: run_fold(dataset, p, model_cfg, train_cfg, lam_override, log_dir), plans))
    train_cfg = replace(train_cfg, log_path=None, checkpoint_path=None)
    config = {"model": asdict(model_cfg), "train": asdict(train_cfg), "lam_override": lam_override}
    return CVReport(
        subjects=[p.held_out_subject for p in plans],
        accuracies=[r[0] for r in results],
        n_test=[r[2] for r in results],
        confusions=[r[1] for r in results],
        task=model_cfg.n_classes,
        variant=model_cfg.variant,
        seed=train_cfg.seed,
        fingerprint=fingerprint(model_cfg, train_cfg),
        config=config,
    )


# -- synthetic data ---------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a seeded synthetic DE-like dataset.

    A trial of class ``y`` and length ``t`` is, per second ``s``::

        base + class_amplitude * gain * T[y]
             + temporal_order * gain * ramp_y(s) * R
             + subject offsets + noise

    ``T[y]`` is a per-class ``(channels, bands)`` template and ``R`` a shared
    one, all with zero mean inside each channel. ``ramp_y`` is a half cosine
    over the trial that falls for even classes and rises for odd ones, so the
    ordered component has the same multiset of values for every class and
    only its order carries the label. Each subject draws a channel gain
    ``exp(N(0, channel_gain))``, a per-channel offset ``N(0, channel_offset)``
    and a per-(channel, band) offset ``N(0, band_offset)``.

    With ``shift_channels = k > 0`` the last ``k`` channels carry no class or
    ordered signal and the per-(channel, band) offsets are confined to them,
    so removing those channels is a label-preserving way to undo the shift.
    """

    n_subjects: int = 8
    trials_per_subject: int = 12
    t_min: int = 30
    t_max: int = 120
    n_channels: int = 16
    n_bands: int = 10
    n_classes: int = 2
    class_amplitude: float = 1.0
    temporal_order: float = 0.0
    channel_offset: float = 0.0
    channel_gain: float = 0.0
    band_offset: float = 0.0
    shift_channels: int = 0
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1 or self.trials_per_subject < 1:
            raise UsageError("synthetic spec needs at least one subject and one trial")
        if not 1 <= self.t_min <= self.t_max:
            raise UsageError("need 1 <= t_min <= t_max")
        if self.n_classes < 2:
            raise UsageError("n_classes must be >= 2")
        if not 0 <= self.shift_channels < self.n_channels:
            raise UsageError("shift_channels must leave at least one informative channel")


def _channel_centred(rng, k: int, c: int, f: int) -> np.ndarray:
    x = rng.normal(size=(k, c, f))
    x -= x.mean(axis=2, keepdims=True)
    return x / x.std(axis=(1, 2), keepdims=True)


def synth_generate(spec: SynthSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    c, f, k = spec.n_channels, spec.n_bands, spec.n_classes
    templates = _channel_centred(rng, k, c, f) * spec.class_amplitude
    ramp_template = _channel_centred(rng, 1, c, f)[0] * spec.temporal_order
    base = rng.normal(size=(c, f))
    n_shift = spec.shift_channels
    if n_shift:
        templates[:, c - n_shift:] = 0.0
        ramp_template[c - n_shift:] = 0.0
    # channels that receive the per-(channel, band) subject offsets
    offset_rows = np.ones((c, 1))
    if n_shift:
        offset_rows[: c - n_shift] = 0.0

    trials = []
    for s in range(spec.n_subjects):
        sid = f"S{s:02d}"
        gain = np.exp(rng.normal(scale=spec.channel_gain, size=(c, 1)))
        offset = rng.normal(scale=spec.channel_offset, size=(c, 1)) + rng.normal(scale=spec.band_offset, size=(c, f)) * offset_rows
        labels = np.arange(spec.trials_per_subject) % k
        rng.shuffle(labels)
        for j, y in enumerate(labels):
            t = int(rng.integers(spec.t_min, spec.t_max + 1))
            pos = (np.arange(t) + 0.5) / t
            ramp = np.sqrt(2.0) * np.cos(np.pi * pos) * (1 if y % 2 == 0 else -1)
            signal = gain * (templates[y] + ramp[:, None, None] * ramp_template)
            feats = base + offset + signal + rng.normal(scale=spec.noise, size=(t, c, f))
            trials.append(Trial(f"{sid}_T{j:02d}", sid, int(y), feats.astype(np.float32)))
    return Dataset(trials, c, f, k, meta={"synth": asdict(spec)})


BENCHMARK_TEMPORAL_ORDER = 0.5
BENCHMARK_EPOCHS = 10


def benchmark_spec(seed: int = 0) -> SynthSpec:
    """The subject-shifted LOSO benchmark used for the adaptation and ablation checks.

    Eight subjects of twelve 10-40 s trials. Half of the 16 channels carry a
    weak class template plus an ordered component; the other half carry only
    large per-subject offsets, so a subject-invariant representation exists.
    """
    return SynthSpec(
        n_subjects=8, trials_per_subject=12, t_min=10, t_max=40,
        class_amplitude=0.5, temporal_order=BENCHMARK_TEMPORAL_ORDER, noise=1.0,
        band_offset=2.0, shift_channels=8, seed=seed,
    )


def run_benchmark(seed: int, variant: str = "full", lam_override: float | None = None) -> CVReport:
    """One seeded LOSO run of the benchmark at desk dimensions."""
    ds = synth_generate(benchmark_spec(seed))
    return run_cv(ds, desk_model_config(variant=variant), TrainConfig(epochs=BENCHMARK_EPOCHS, seed=seed),
                  threads=1, lam_override=lam_override)


def linear_probe_accuracy(dataset: Dataset, l2: float = 1e-3) -> float:
    """Training accuracy (%) of a ridge least-squares probe on time-pooled features."""
    X = np.stack([t.features.mean(axis=0).ravel() for t in dataset.trials])
    X = np.hstack([X, np.ones((len(X), 1))])
    y = np.array([t.label for t in dataset.trials])
    Y = np.eye(dataset.n_classes)[y]
    W = np.linalg.solve(X.T @ X + l2 * np.eye(X.shape[1]), X.T @ Y)
    return 100.0 * float(np.mean(np.argmax(X @ W, axis=1) == y))


def desk_model_config(n_classes: int = 2, variant: str = "full", **overrides) -> DuAConfig:
    """Reduced dimensions used for the synthetic benchmark (16 channels, 10 bands)."""
    cfg = DuAConfig(
        n_channels=16, n_bands=10, n_classes=n_classes, variant=variant,
        ss_heads=6, ss_head_dim=10, ss_ffn=40,
        d_model=32, t_heads=2, t_head_dim=16, t_ffn=64, disc_hidden=32,
    )
    return replace(cfg, **overrides)


def toy_model_config(**overrides) -> DuAConfig:
    """Tiny dimensions (5 channels, 3 bands, width 8) for gradient checks."""
    cfg = DuAConfig(
        n_channels=5, n_bands=3, n_classes=2, ss_heads=2, ss_head_dim=3, ss_ffn=6,
        d_model=8, t_heads=2, t_head_dim=4, t_ffn=16, disc_hidden=6,
    )
    return replace(cfg, **overrides)
