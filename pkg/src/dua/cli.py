"""Command-line entry point: ``dua <subcommand> [options]``.

Every subcommand also takes ``--config FILE``, a ``key = value`` file whose
keys are the long option names (``batch-size`` or ``batch_size``). Values
given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attention import ConfigError
from .features import (
    BANDS,
    Dataset,
    DatasetError,
    Trial,
    de_features,
    load_dataset,
    rating_to_label,
    read_raw,
    save_dataset,
)
from .harness import SynthSpec, desk_model_config, evaluate, linear_probe_accuracy, run_cv, synth_generate, toy_model_config
from .model import VARIANTS, CheckpointError, DuAConfig, DuAModel, format_summary, load_checkpoint
from .numerics import DimensionError, UsageError
from .training import TrainConfig, TrainingError, collate, loss_gradcheck, train

log = logging.getLogger("dua")


class CliError(Exception):
    pass


# -- shared option groups -------------------------------------------------------

def _model_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--variant", choices=VARIANTS, default="full")
    g.add_argument("--task", type=int, choices=(2, 3, 5), help="number of classes (default: from the dataset)")
    g.add_argument("--scale", choices=("reference", "desk"), default="reference",
                   help="reference: 63x10 input, 6x10 spatial-spectral heads, width 128 temporal layer; desk: reduced widths")
    g.add_argument("--residual", choices=("literal", "standard_preln"), default="literal")


def _train_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=300)
    g.add_argument("--batch-size", type=int, default=12)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--p-scale", type=float, default=1.0)
    g.add_argument("--lambda", dest="lam", type=float, default=None, help="constant reversal strength instead of the schedule")
    g.add_argument("--no-adversarial", action="store_true", help="train on source subjects only")


def _model_config(args, dataset: Dataset) -> DuAConfig:
    n_classes = args.task or dataset.n_classes or 2
    if args.scale == "desk":
        cfg = desk_model_config(n_classes, args.variant)
    else:
        cfg = DuAConfig(n_classes=n_classes, variant=args.variant)
    return replace(cfg, n_channels=dataset.n_channels, n_bands=dataset.n_bands, residual=args.residual)


def _train_config(args, **extra) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                       p_scale=args.p_scale, adversarial=not args.no_adversarial, **extra)


def _load(path, task: int | None) -> Dataset:
    """Load a dataset and, if ``task`` differs from its stored task, relabel from ratings."""
    if not Path(path).is_dir():
        raise CliError(f"dataset directory not found: {path}")
    ds = load_dataset(path)
    if task is None or task == ds.n_classes:
        return ds
    if any(t.rating is None for t in ds.trials):
        raise CliError(f"dataset {path} is labelled for {ds.n_classes} classes and has no ratings to relabel for {task}")
    trials = []
    for t in ds.trials:
        y = rating_to_label(t.rating, task)
        if y is not None:
            trials.append(replace(t, label=y))
    return Dataset(trials, ds.n_channels, ds.n_bands, task, ds.meta)


# -- subcommands ---------------------------------------------------------------

def cmd_extract(args) -> int:
    raw_dir = Path(args.raw_dir)
    metas = sorted(raw_dir.glob("*.meta"))
    if not metas:
        raise CliError(f"no .meta files in {raw_dir}")
    trials = []
    dropped = 0
    for meta_path in metas:
        signal, meta = read_raw(meta_path.with_suffix(""))
        rating = meta.get("rating")
        if rating is not None:
            label = rating_to_label(int(rating), args.task)
        elif "label" in meta:
            label = int(meta["label"])
        else:
            raise CliError(f"{meta_path}: needs a 'rating' or 'label' entry")
        if label is None:
            dropped += 1
            continue
        feats = de_features(signal, float(meta["sample_rate_hz"]))
        trials.append(Trial(meta_path.stem, str(meta.get("subject", "S00")), label, feats.astype(np.float32),
                            rating, float(meta["sample_rate_hz"])))
    ds = Dataset(trials, n_classes=args.task, meta={"bands": [b[0] for b in BANDS]})
    save_dataset(ds, args.out)
    print(f"extracted {len(trials)} trials ({dropped} excluded by the {args.task}-class mapping) -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec(
        n_subjects=args.subjects, trials_per_subject=args.trials, t_min=args.t_min, t_max=args.t_max,
        n_channels=args.channels, n_bands=args.bands, n_classes=args.task or 2,
        class_amplitude=args.class_amplitude, temporal_order=args.temporal_order,
        channel_offset=args.channel_offset, channel_gain=args.channel_gain, band_offset=args.band_offset,
        shift_channels=args.shift_channels, noise=args.noise, seed=args.seed,
    )
    ds = synth_generate(spec)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} trials from {spec.n_subjects} subjects -> {args.out}")
    print(f"linear probe on pooled features: {linear_probe_accuracy(ds):.1f}%")
    return 0


def cmd_train(args) -> int:
    ds = _load(args.dataset, args.task)
    subjects = ds.subjects
    held = args.holdout or subjects[-1]
    if held not in subjects:
        raise CliError(f"unknown subject {held!r}; dataset has {subjects}")
    source = [t for t in ds.trials if t.subject_id != held]
    test = ds.by_subject(held)
    target = [replace(t, label=-1) for t in test]
    model = DuAModel(_model_config(args, ds), seed=args.seed)
    cfg = _train_config(args, log_path=args.log, checkpoint_path=args.checkpoint)
    result = train(model, source, target, cfg, lam_override=args.lam)
    last = result.history[-1]
    acc, conf = evaluate(model, test)
    print(f"epochs={len(result.history)} L_C={last.L_C:.4f} L_adv={last.L_adv:.4f} source_acc={last.source_acc:.1f}")
    print(f"held-out {held}: accuracy {acc:.2f}%  confusion {conf.tolist()}")
    if args.checkpoint:
        print(f"checkpoint -> {args.checkpoint}")
    return 0


def cmd_cv(args) -> int:
    ds = _load(args.dataset, args.task)
    out = Path(args.out)
    (out / "folds").mkdir(parents=True, exist_ok=True)
    model_cfg = _model_config(args, ds)
    report = run_cv(ds, model_cfg, _train_config(args), threads=args.threads, lam_override=args.lam,
                    log_dir=out / "folds" if args.fold_logs else None)
    report.write_csv(out / "report.csv")
    with open(out / "confusion.csv", "w") as fh:
        fh.write("fold,subject,true,pred,count\n")
        for i, (s, conf) in enumerate(zip(report.subjects, report.confusions)):
            for a in range(conf.shape[0]):
                for b in range(conf.shape[1]):
                    fh.write(f"{i},{s},{a},{b},{conf[a, b]}\n")
    for s, acc in zip(report.subjects, report.accuracies):
        print(f"{s}: {acc:.2f}%")
    print(f"mean {report.mean:.2f} +/- {report.std:.2f}  -> {out / 'report.csv'}")
    return 0


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    model, extra = load_checkpoint(args.checkpoint)
    ds = _load(args.dataset, args.task or model.cfg.n_classes)
    if (ds.n_channels, ds.n_bands) != (model.cfg.n_channels, model.cfg.n_bands):
        raise CliError(f"dataset is {ds.n_channels}x{ds.n_bands} but the checkpoint expects "
                       f"{model.cfg.n_channels}x{model.cfg.n_bands}")
    trials = ds.trials if not args.subject else [t for t in ds.trials if t.subject_id in args.subject]
    acc, conf = evaluate(model, trials, model.cfg.n_classes)
    print(f"accuracy {acc:.2f}% over {len(trials)} trials")
    for row in conf:
        print("  " + " ".join(f"{v:4d}" for v in row))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = toy_model_config(variant=args.variant, residual=args.residual)
    model = DuAModel(cfg, seed=args.seed, dtype=np.float64)
    rng = np.random.default_rng(args.seed)
    trials = [Trial(f"g{i}", "g", i % 2, rng.normal(size=(args.length, cfg.n_channels, cfg.n_bands)))
              for i in range(args.batch)]
    domains = [i % 2 for i in range(args.batch)]
    batch = collate(trials, domains, dtype=np.float64)
    batch.class_labels[batch.domain_labels == 1] = -1
    report = loss_gradcheck(model, batch, args.lam, h=args.h, tol=args.tol)
    print(report.summary())
    return 0 if report.passed else 1


def cmd_summary(args) -> int:
    if args.scale == "desk":
        cfg = desk_model_config(args.task or 2, args.variant)
    else:
        cfg = DuAConfig(n_classes=args.task or 2, variant=args.variant)
    if args.channels:
        cfg = replace(cfg, n_channels=args.channels)
    print(format_summary(DuAModel(cfg)))
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dua", description="Dual attentive transformer for trial-level EEG emotion recognition")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value file with defaults for this subcommand")
        p.set_defaults(func=fn)
        return p

    p = add("extract", cmd_extract, "DE features from <id>.raw + <id>.meta recordings")
    p.add_argument("--raw-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", type=int, choices=(2, 3, 5), default=2)

    p = add("synth", cmd_synth, "generate a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--task", type=int, choices=(2, 3, 5), default=2)
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--trials", type=int, default=12)
    p.add_argument("--t-min", type=int, default=30)
    p.add_argument("--t-max", type=int, default=120)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--bands", type=int, default=10)
    p.add_argument("--class-amplitude", type=float, default=1.0)
    p.add_argument("--temporal-order", type=float, default=0.0)
    p.add_argument("--channel-offset", type=float, default=0.0)
    p.add_argument("--channel-gain", type=float, default=0.0)
    p.add_argument("--band-offset", type=float, default=0.0)
    p.add_argument("--shift-channels", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)

    p = add("train", cmd_train, "train once with one held-out subject as the unlabeled target")
    p.add_argument("--dataset", required=True)
    p.add_argument("--holdout", help="held-out subject (default: last in sorted order)")
    p.add_argument("--checkpoint")
    p.add_argument("--log", help="per-epoch CSV log")
    _model_options(p)
    _train_options(p)

    p = add("cv", cmd_cv, "leave-one-subject-out cross-validation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--threads", type=int, default=None, help="parallel folds (default: $DUA_THREADS or 1)")
    p.add_argument("--fold-logs", action="store_true", help="write a per-epoch log for every fold")
    _model_options(p)
    _train_options(p)

    p = add("eval", cmd_eval, "score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--task", type=int, choices=(2, 3, 5))
    p.add_argument("--subject", action="append", help="restrict to these subjects (repeatable)")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the full loss on a toy model")
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--residual", choices=("literal", "standard_preln"), default="literal")
    p.add_argument("--lambda", dest="lam", type=float, default=0.3)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--length", type=int, default=4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)

    p = add("summary", cmd_summary, "parameter counts per submodule")
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--task", type=int, choices=(2, 3, 5))
    p.add_argument("--scale", choices=("reference", "desk"), default="reference")
    p.add_argument("--channels", type=int)
    return parser


def _prescan(argv: list[str], commands) -> tuple[str | None, str | None]:
    """Subcommand and ``--config`` value, found before argparse sees required flags."""
    command = next((a for a in argv if a in commands), None)
    config = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif a.startswith("--config="):
            config = a.split("=", 1)[1]
    return command, config


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    subparsers = parser._subparsers._group_actions[0].choices
    command, config = _prescan(argv, subparsers)
    if command is None or config is None:
        return parser.parse_args(argv)
    path = Path(config)
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    cp.read_string("[dua]\n" + path.read_text())
    sub = subparsers[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in cp["dua"].items():
        dest = key.replace("-", "_")
        dest = "lam" if dest == "lambda" else dest
        action = actions.get(dest)
        if action is None or dest in ("help", "config"):
            raise CliError(f"{path}: unknown key {key!r} for '{command}'")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = cp["dua"].getboolean(key)
        elif action.nargs is None and isinstance(action, argparse._AppendAction):
            defaults[dest] = [v.strip() for v in raw.split(",")]
        else:
            value = action.type(raw) if action.type else raw
            if action.choices is not None and value not in action.choices:
                raise CliError(f"{path}: {key}={raw!r} not one of {list(action.choices)}")
            defaults[dest] = value
    # required options may now come from the file
    for a in sub._actions:
        if a.dest in defaults:
            a.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, DatasetError, CheckpointError, ConfigError, DimensionError, UsageError,
            TrainingError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
