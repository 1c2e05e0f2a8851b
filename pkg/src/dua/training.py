"""Adversarial training loop: padded source/target batches, the reversal-strength
schedule, the combined classification + domain loss and Adam.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .features import Trial
from .model import DuAModel, save_checkpoint
from .numerics import GradCheckReport, Tensor, UsageError, binary_cross_entropy, cross_entropy, grad_check

log = logging.getLogger(__name__)

SOURCE, TARGET = 0, 1
LOG_COLUMNS = ("epoch", "L_C", "L_adv", "lambda", "source_acc", "wall_ms")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 12
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    grl_schedule: bool = True
    p_scale: float = 1.0
    adversarial: bool = True
    log_path: str | None = None
    checkpoint_path: str | None = None

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr", "adam_eps", "p_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.adversarial and self.batch_size < 2:
            raise ValueError("adversarial training needs batch_size >= 2")


def lambda_schedule(p: float, p_scale: float = 1.0) -> float:
    """``2 / (1 + exp(-p_scale * p)) - 1`` for training progress ``p`` in [0, 1].

    With the default ``p_scale=1`` the value tops out at about 0.4621.
    """
    if not 0.0 <= p <= 1.0:
        warnings.warn(f"progress {p} outside [0, 1]; clamped", RuntimeWarning, stacklevel=2)
        p = min(max(p, 0.0), 1.0)
    return 2.0 / (1.0 + math.exp(-p_scale * p)) - 1.0


@dataclass
class Batch:
    features: np.ndarray  # (b, t_max, c, f), zero beyond each length
    mask: np.ndarray  # (b, t_max) bool
    class_labels: np.ndarray  # (b,), -1 on target rows
    domain_labels: np.ndarray  # (b,), 0 source / 1 target

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @property
    def source_rows(self) -> np.ndarray:
        return np.flatnonzero(self.domain_labels == SOURCE)

    def __len__(self):
        return len(self.domain_labels)


def collate(trials: Sequence[Trial], domains: Sequence[int] | None = None, dtype=np.float32) -> Batch:
    """Stack trials into a zero-padded batch. Target rows never carry a class label."""
    if not trials:
        raise UsageError("cannot collate an empty list of trials")
    domains = np.zeros(len(trials), dtype=np.int64) if domains is None else np.asarray(domains, dtype=np.int64)
    t_max = max(tr.length for tr in trials)
    c, f = trials[0].features.shape[1:]
    feats = np.zeros((len(trials), t_max, c, f), dtype=dtype)
    mask = np.zeros((len(trials), t_max), dtype=bool)
    labels = np.full(len(trials), -1, dtype=np.int64)
    for i, tr in enumerate(trials):
        feats[i, : tr.length] = tr.features
        mask[i, : tr.length] = True
        if domains[i] == SOURCE:
            labels[i] = tr.label
    return Batch(feats, mask, labels, domains)


def pad_and_batch(
    source: Sequence[Trial],
    target: Sequence[Trial],
    batch_size: int,
    rng: np.random.Generator,
    dtype=np.float32,
) -> Iterator[Batch]:
    """One epoch of batches.

    Every source trial appears exactly once, in a fresh random order. With
    targets present each batch holds ``batch_size - batch_size // 2`` source
    rows and ``batch_size // 2`` target rows, the targets drawn from a
    shuffled stream that restarts whenever it runs out. Without targets the
    batches are source-only.
    """
    if not source:
        raise UsageError("no source trials")
    order = rng.permutation(len(source))
    if not target:
        for start in range(0, len(order), batch_size):
            yield collate([source[i] for i in order[start:start + batch_size]], dtype=dtype)
        return
    n_tgt = batch_size // 2
    n_src = batch_size - n_tgt
    t_stream: list[int] = []
    for start in range(0, len(order), n_src):
        src = [source[i] for i in order[start:start + n_src]]
        tgt = []
        for _ in range(max(n_tgt, 1)):
            if not t_stream:
                t_stream = list(rng.permutation(len(target)))
            tgt.append(target[t_stream.pop(0)])
        yield collate(src + tgt, [SOURCE] * len(src) + [TARGET] * len(tgt), dtype=dtype)


def n_batches(n_source: int, batch_size: int, with_target: bool) -> int:
    per = batch_size - batch_size // 2 if with_target else batch_size
    return math.ceil(n_source / per)


@dataclass
class LossTerms:
    total: Tensor
    classification: Tensor
    domain: Tensor


def overall_loss(class_logits: Tensor, class_labels, domain_prob: Tensor, domain_labels) -> LossTerms:
    """Mean cross-entropy over source rows plus mean BCE over all rows.

    The reversal strength acts inside the gradient reversal layer, so the
    domain term enters without an extra factor.
    """
    domain_labels = np.asarray(domain_labels)
    src = np.flatnonzero(domain_labels == SOURCE)
    if src.size == 0:
        raise UsageError("loss needs at least one source row")
    ce = cross_entropy(class_logits[src], np.asarray(class_labels)[src])
    bce = binary_cross_entropy(domain_prob, domain_labels)
    return LossTerms(ce + bce, ce, bce)


class Adam:
    """Adam with bias correction over a fixed, named parameter list."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {name}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def loss_gradcheck(model: DuAModel, batch: Batch, lam: float, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Finite-difference check of the full adversarial loss gradient.

    The backward pass through the reversal layer yields
    ``dL_C - lam * dL_adv`` for feature-extractor and classifier parameters
    and ``dL_adv`` for discriminator parameters, so those are the two
    objectives that get differenced. ``model`` should be float64.
    """
    def terms():
        out = model.forward(batch.features, batch.lengths, lam)
        return overall_loss(out.class_logits, batch.class_labels, out.domain_prob, batch.domain_labels)

    def total():
        return terms().total

    def reversed_objective():
        t = terms()
        return t.classification - t.domain * lam

    def domain_only():
        return terms().domain

    params = dict(model.named_parameters())
    fd = {name: (domain_only if name.startswith("discriminator.") else reversed_objective) for name in params}
    return grad_check(total, params, h=h, tol=tol, fd_fn=fd)


@dataclass
class EpochLog:
    epoch: int
    L_C: float
    L_adv: float
    lam: float
    source_acc: float
    wall_ms: float

    def row(self) -> list:
        return [self.epoch, f"{self.L_C:.6f}", f"{self.L_adv:.6f}", f"{self.lam:.6f}",
                f"{self.source_acc:.4f}", f"{self.wall_ms:.1f}"]


@dataclass
class TrainResult:
    model: DuAModel
    history: list[EpochLog] = field(default_factory=list)


def train(
    model: DuAModel,
    source: Sequence[Trial],
    target: Sequence[Trial],
    cfg: TrainConfig,
    lam_override: float | None = None,
) -> TrainResult:
    """Train ``model`` in place.

    Per iteration: forward the mixed batch, classification loss on source
    rows, domain loss on all rows through the reversal layer with strength
    ``lambda_schedule(iter / total_iters)`` (or ``lam_override``; 0 when the
    schedule is off), backprop, Adam step. Target class labels never reach
    the loss because :func:`collate` blanks them.
    """
    if not source:
        raise UsageError("no source trials")
    target = list(target) if cfg.adversarial else []
    rng = np.random.default_rng(cfg.seed)
    params = dict(model.named_parameters())
    opt = Adam(params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    total_iters = cfg.epochs * n_batches(len(source), cfg.batch_size, bool(target))
    it = 0
    history: list[EpochLog] = []
    last_good = {k: v.copy() for k, v in model.state_dict().items()}

    log_writer = None
    log_fh = None
    if cfg.log_path:
        new = not Path(cfg.log_path).exists()
        log_fh = open(cfg.log_path, "a", newline="")
        log_writer = csv.writer(log_fh)
        if new:
            log_writer.writerow(LOG_COLUMNS)
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            ce_sum = adv_sum = 0.0
            correct = seen = batches = 0
            lam = 0.0
            for batch in pad_and_batch(source, target, cfg.batch_size, rng, model.dtype):
                if lam_override is not None:
                    lam = lam_override
                elif cfg.grl_schedule and target:
                    lam = lambda_schedule(it / total_iters, cfg.p_scale)
                else:
                    lam = 0.0
                out = model.forward(batch.features, batch.lengths, lam)
                if target:
                    terms = overall_loss(out.class_logits, batch.class_labels, out.domain_prob, batch.domain_labels)
                    loss = terms.total
                    adv_sum += float(terms.domain.data)
                    ce_val = float(terms.classification.data)
                else:
                    loss = cross_entropy(out.class_logits, batch.class_labels)
                    ce_val = float(loss.data)
                if not np.isfinite(loss.data):
                    model.load_state_dict(last_good)
                    raise TrainingError(f"non-finite loss at epoch {epoch}; parameters restored to last good state")
                opt.zero_grad()
                loss.backward()
                try:
                    opt.step()
                except TrainingError:
                    model.load_state_dict(last_good)
                    raise
                it += 1
                batches += 1
                ce_sum += ce_val
                src = batch.source_rows
                pred = np.argmax(out.class_logits.data[src], axis=1)
                correct += int((pred == batch.class_labels[src]).sum())
                seen += src.size
            last_good = {k: v.copy() for k, v in model.state_dict().items()}
            entry = EpochLog(epoch, ce_sum / batches, adv_sum / batches, lam,
                             100.0 * correct / max(seen, 1), 1000 * (time.perf_counter() - t0))
            history.append(entry)
            if log_writer is not None:
                log_writer.writerow(entry.row())
            log.debug("epoch %d L_C=%.4f L_adv=%.4f lambda=%.4f acc=%.1f", epoch, entry.L_C,
                      entry.L_adv, entry.lam, entry.source_acc)
    finally:
        if log_fh is not None:
            log_fh.close()
    if cfg.checkpoint_path:
        save_checkpoint(model, cfg.checkpoint_path, {"epochs": cfg.epochs, "seed": cfg.seed})
    return TrainResult(model, history)
