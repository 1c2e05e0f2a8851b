from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from dua.features import Dataset, Trial
from dua.harness import (
    REPORT_COLUMNS,
    CVReport,
    SynthSpec,
    desk_model_config,
    evaluate,
    fingerprint,
    linear_probe_accuracy,
    loso_folds,
    run_cv,
    run_fold,
    synth_generate,
    toy_model_config,
)
from dua.numerics import UsageError
from dua.training import TrainConfig

TINY = SynthSpec(n_subjects=3, trials_per_subject=4, t_min=2, t_max=4, n_channels=5, n_bands=3, seed=1)
QUICK = TrainConfig(epochs=2, batch_size=4, seed=0)


class LookupModel:
    """Stands in for a trained model: logits come from the first feature value."""

    def __init__(self, n_classes, rule):
        self.cfg = SimpleNamespace(n_classes=n_classes)
        self.dtype = np.float64
        self.rule = rule

    def predict_logits(self, features, lengths):
        return np.stack([self.rule(f[0, 0, 0]) for f in features])


def labelled_trials(labels):
    return [Trial(f"t{i}", "s", y, np.full((2, 1, 1), float(y))) for i, y in enumerate(labels)]


# -- folds and scoring ---------------------------------------------------------------

def test_loso_folds_partition_subjects():
    ds = synth_generate(TINY)
    plans = loso_folds(ds)
    assert [p.held_out_subject for p in plans] == ["S00", "S01", "S02"]
    for p in plans:
        train_ids = {t.trial_id for t in ds.trials if t.subject_id in p.train_subjects}
        test_ids = {t.trial_id for t in ds.by_subject(p.held_out_subject)}
        assert len(train_ids) == 8 and len(test_ids) == 4
        assert not train_ids & test_ids


def test_loso_needs_two_subjects():
    with pytest.raises(UsageError):
        loso_folds(synth_generate(replace(TINY, n_subjects=1)))


def test_evaluate_perfect_and_constant_models():
    trials = labelled_trials([0, 1, 2, 1, 0, 2])
    perfect = LookupModel(3, lambda v: np.eye(3)[int(v)])
    acc, conf = evaluate(perfect, trials)
    assert acc == 100.0
    np.testing.assert_array_equal(conf, 2 * np.eye(3, dtype=int))

    constant = LookupModel(2, lambda v: np.zeros(2))  # ties go to class 0
    acc, conf = evaluate(constant, labelled_trials([0, 1] * 5), batch_size=3)
    assert acc == pytest.approx(50.0)
    np.testing.assert_array_equal(conf.sum(axis=1), [5, 5])
    np.testing.assert_array_equal(conf[:, 1], [0, 0])


def test_evaluate_rejects_empty_input():
    with pytest.raises(UsageError):
        evaluate(LookupModel(2, lambda v: np.zeros(2)), [])


def test_report_statistics_and_layout():
    accs = [50.0, 75.0, 100.0, 91.6666]
    rep = CVReport(["a", "b", "c", "d"], accs, [4, 4, 4, 12], [np.eye(2)] * 4, 2, "full", 7)
    assert rep.mean == pytest.approx(sum(accs) / 4, abs=1e-9)
    mu = sum(accs) / 4
    assert rep.std == pytest.approx((sum((a - mu) ** 2 for a in accs) / 4) ** 0.5, abs=1e-9)
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("# {")
    assert tuple(lines[1].split(",")) == REPORT_COLUMNS
    assert lines[2] == "0,a,2,full,7,50.0000,4"
    assert lines[-2].startswith("mean,,2,full,7,") and lines[-2].endswith(",24")
    assert len(lines) == 2 + 4 + 2


def test_fingerprint_tracks_configuration():
    a = fingerprint(toy_model_config(), QUICK)
    assert a == fingerprint(toy_model_config(), QUICK)
    assert a != fingerprint(toy_model_config(), replace(QUICK, lr=2e-3))
    assert len(a) == 16


# -- synthetic data ---------------------------------------------------------------------

def test_noise_free_trials_of_one_class_are_identical():
    spec = replace(TINY, noise=0.0, n_subjects=2, trials_per_subject=6)
    ds = synth_generate(spec)
    by_class = {}
    for t in ds.trials:
        assert np.all(t.features == t.features[0])  # no temporal structure
        by_class.setdefault(t.label, []).append(t.features[0])
    for rows in by_class.values():
        for r in rows[1:]:
            np.testing.assert_array_equal(r, rows[0])
    assert not np.array_equal(by_class[0][0], by_class[1][0])


def test_shift_lives_only_in_the_shift_channels():
    spec = replace(TINY, noise=0.0, band_offset=1.0, shift_channels=2)
    ds = synth_generate(spec)
    a = [t for t in ds.by_subject("S00") if t.label == 0][0].features[0]
    b = [t for t in ds.by_subject("S01") if t.label == 0][0].features[0]
    np.testing.assert_array_equal(a[:3], b[:3])
    assert np.all(a[3:] != b[3:])
    # the shift channels carry no class signal
    c = [t for t in ds.by_subject("S00") if t.label == 1][0].features[0]
    np.testing.assert_array_equal(a[3:], c[3:])


def test_temporal_order_only_carries_label_through_order():
    spec = replace(TINY, noise=0.0, class_amplitude=0.0, temporal_order=1.0, t_min=6, t_max=6)
    ds = synth_generate(spec)
    x0 = [t for t in ds.trials if t.label == 0][0].features
    x1 = [t for t in ds.trials if t.label == 1][0].features
    np.testing.assert_allclose(x0, x1[::-1], atol=1e-6)
    np.testing.assert_allclose(x0.mean(axis=0), x1.mean(axis=0), atol=1e-6)


def test_default_synth_is_linearly_separable():
    ds = synth_generate(SynthSpec())
    assert (len(ds.subjects), len(ds), ds.n_channels, ds.n_bands) == (8, 96, 16, 10)
    assert linear_probe_accuracy(ds) > 95.0
    assert all(30 <= t.length <= 120 for t in ds.trials)


def test_synth_is_seeded():
    a, b = synth_generate(TINY), synth_generate(TINY)
    assert all(x.features.tobytes() == y.features.tobytes() and x.label == y.label
               for x, y in zip(a.trials, b.trials))
    c = synth_generate(replace(TINY, seed=2))
    assert a.trials[0].features.tobytes() != c.trials[0].features.tobytes()


@pytest.mark.parametrize("bad", [
    dict(n_subjects=0), dict(trials_per_subject=0), dict(t_min=0), dict(t_min=5, t_max=4),
    dict(n_classes=1), dict(shift_channels=5),
])
def test_degenerate_specs_are_rejected(bad):
    with pytest.raises(UsageError):
        replace(TINY, **bad)


# -- cross-validation ------------------------------------------------------------------------

def test_held_out_labels_only_affect_scoring():
    """Flipping the held-out labels swaps confusion rows and nothing else."""
    ds = synth_generate(TINY)
    plan = loso_folds(ds)[0]
    flipped = Dataset([replace(t, label=1 - t.label) if t.subject_id == plan.held_out_subject else t
                       for t in ds.trials], ds.n_channels, ds.n_bands, 2)
    cfg = toy_model_config()
    _, conf, n = run_fold(ds, plan, cfg, QUICK)
    _, conf_flipped, _ = run_fold(flipped, plan, cfg, QUICK)
    assert n == 4
    np.testing.assert_array_equal(conf_flipped, conf[::-1])


def test_thread_count_does_not_change_the_report(tmp_path):
    ds = synth_generate(TINY)
    serial = run_cv(ds, toy_model_config(), QUICK, threads=1)
    parallel = run_cv(ds, toy_model_config(), QUICK, threads=3, log_dir=tmp_path)
    assert serial.to_csv() == parallel.to_csv()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["S00.csv", "S01.csv", "S02.csv"]


def test_subset_of_folds():
    rep = run_cv(synth_generate(TINY), toy_model_config(), QUICK, subjects=["S01"])
    assert rep.subjects == ["S01"] and rep.n_test == [4]


def test_desk_dimensions():
    cfg = desk_model_config(n_classes=3, variant="spec_temp")
    assert (cfg.n_channels, cfg.n_bands, cfg.n_classes, cfg.d_model) == (16, 10, 3, 32)
