"""Differential-entropy features and the on-disk dataset layout.

Dataset directory::

    manifest.json          # format version, dims, task, subjects, trial list
    trials/<id>.feat       # b"DUAF", u32 version, u32 ndim, u32 shape..., <f4 data

Raw recordings are ``<id>.raw`` (same binary layout as ``.feat``, shape
``(n_samples, channels)``) plus ``<id>.meta`` JSON with ``sample_rate_hz``
and ``channels``.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import get_window

BANDS: tuple[tuple[str, float, float], ...] = (
    ("Theta", 4.0, 6.0),
    ("Alpha1", 6.0, 8.0),
    ("Alpha2", 8.0, 10.0),
    ("Alpha3", 10.0, 12.0),
    ("Beta1", 12.0, 16.0),
    ("Beta2", 16.0, 20.0),
    ("Beta3", 20.0, 28.0),
    ("Gamma1", 28.0, 34.0),
    ("Gamma2", 34.0, 39.0),
    ("Gamma3", 39.0, 45.0),
)

VARIANCE_FLOOR = 1e-12
RATINGS = (-10, -5, 0, 5, 10)
FORMAT_VERSION = 1
FEAT_MAGIC = b"DUAF"


class DatasetError(IOError):
    """A dataset directory is missing pieces or disagrees with its manifest."""


def check_bands(bands: Sequence[tuple[str, float, float]], fs_hz: float) -> None:
    nyquist = fs_hz / 2.0
    prev = -np.inf
    for name, lo, hi in bands:
        if not 0 < lo < hi < nyquist:
            raise ValueError(f"band {name} [{lo}, {hi}) must lie inside (0, {nyquist}) with low < high")
        if lo < prev:
            raise ValueError("bands must be ordered by frequency")
        prev = lo


def de_features(raw, fs_hz: float, bands=BANDS, window: str | None = None) -> np.ndarray:
    """Per-second DE of every channel in every band.

    ``raw`` is ``(n_samples, channels)``. Each non-overlapping one-second
    window is transformed with a one-sided periodogram scaled so the bins
    sum to the window's mean square; the band variance is the sum over bins
    with ``low <= freq < high`` and DE is ``0.5 * ln(2 pi e var)``.
    A trailing partial second is dropped. ``window`` optionally names a
    scipy taper (default: rectangular).

    Returns ``(seconds, channels, len(bands))`` float64.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 1:
        raw = raw[:, None]
    if fs_hz <= 2 * 45:
        raise ValueError("sample rate must exceed 90 Hz to cover the 45 Hz band edge")
    check_bands(bands, fs_hz)
    n = int(round(fs_hz))
    seconds = raw.shape[0] // n
    if seconds < 1:
        raise ValueError(f"need at least one second of data ({n} samples), got {raw.shape[0]}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw signal contains non-finite samples")

    win = raw[: seconds * n].reshape(seconds, n, raw.shape[1])
    if window is None:
        taper = np.ones(n)
    else:
        taper = get_window(window, n, fftbins=True)
    spec = np.fft.rfft(win * taper[None, :, None], axis=1)
    power = np.abs(spec) ** 2 / (n * np.sum(taper**2))
    # fold negative frequencies into the one-sided bins (not DC, not Nyquist)
    if n % 2 == 0:
        power[:, 1:-1] *= 2.0
    else:
        power[:, 1:] *= 2.0
    freqs = np.fft.rfftfreq(n, d=1.0 / fs_hz)

    out = np.empty((seconds, raw.shape[1], len(bands)))
    clamped = 0
    for j, (_, lo, hi) in enumerate(bands):
        sel = (freqs >= lo) & (freqs < hi)
        var = power[:, sel, :].sum(axis=1)
        low = var <= VARIANCE_FLOOR
        clamped += int(low.sum())
        out[:, :, j] = 0.5 * np.log(2 * np.pi * np.e * np.maximum(var, VARIANCE_FLOOR))
    if clamped:
        warnings.warn(f"{clamped} band variances clamped to {VARIANCE_FLOOR:g}", RuntimeWarning, stacklevel=2)
    return out


def rating_to_label(rating: int, task: int) -> int | None:
    """Map a valence rating to a class index, or ``None`` when the task drops it.

    5-class is ordinal (-10 -> 0 ... 10 -> 4); 3-class is negative / neutral /
    positive; 2-class is negative / positive with neutral ratings excluded.
    """
    if rating not in RATINGS:
        raise ValueError(f"rating {rating!r} is not on the scale {RATINGS}")
    if task == 5:
        return RATINGS.index(rating)
    if task == 3:
        return 0 if rating < 0 else (1 if rating == 0 else 2)
    if task == 2:
        return None if rating == 0 else int(rating > 0)
    raise ValueError(f"task must be 2, 3 or 5, got {task!r}")


@dataclass
class Trial:
    trial_id: str
    subject_id: str
    label: int
    features: np.ndarray  # (t, c, f)
    rating: int | None = None
    sample_rate_hz: float | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 3 or self.features.shape[0] < 1:
            raise ValueError(f"trial {self.trial_id}: features must be (t>=1, c, f), got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"trial {self.trial_id}: non-finite feature values")

    @property
    def length(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    trials: list[Trial] = field(default_factory=list)
    n_channels: int | None = None
    n_bands: int | None = None
    n_classes: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for tr in self.trials:
            c, f = tr.features.shape[1:]
            if self.n_channels is None:
                self.n_channels, self.n_bands = c, f
            elif (c, f) != (self.n_channels, self.n_bands):
                raise ValueError(f"trial {tr.trial_id}: dims ({c}, {f}) differ from dataset ({self.n_channels}, {self.n_bands})")

    def __len__(self):
        return len(self.trials)

    @property
    def subjects(self) -> list[str]:
        return sorted({t.subject_id for t in self.trials})

    def by_subject(self, subject: str) -> list[Trial]:
        return [t for t in self.trials if t.subject_id == subject]


# -- binary arrays --------------------------------------------------------------

def write_array(path, arr: np.ndarray, magic: bytes = FEAT_MAGIC) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", FORMAT_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_array(path, magic: bytes = FEAT_MAGIC) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != magic:
        raise DatasetError(f"{path}: bad magic")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    shape = struct.unpack_from(f"<{ndim}I", blob, 12)
    offset = 12 + 4 * ndim
    n = int(np.prod(shape))
    if len(blob) - offset != 4 * n:
        raise DatasetError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(blob, dtype="<f4", offset=offset, count=n).reshape(shape).copy()


def save_dataset(ds: Dataset, directory) -> None:
    directory = Path(directory)
    (directory / "trials").mkdir(parents=True, exist_ok=True)
    entries = []
    for tr in ds.trials:
        write_array(directory / "trials" / f"{tr.trial_id}.feat", tr.features)
        entries.append({
            "id": tr.trial_id,
            "subject": tr.subject_id,
            "label": int(tr.label),
            "rating": tr.rating,
            "length": tr.length,
            "sample_rate_hz": tr.sample_rate_hz,
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "n_channels": ds.n_channels,
        "n_bands": ds.n_bands,
        "n_classes": ds.n_classes,
        "subjects": ds.subjects,
        "n_trials": len(entries),
        "meta": ds.meta,
        "trials": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise DatasetError(f"{directory}: no manifest.json")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported format_version {manifest.get('format_version')!r}")
    entries = manifest["trials"]
    if manifest.get("n_trials", len(entries)) != len(entries):
        raise DatasetError(f"{path}: n_trials={manifest['n_trials']} but {len(entries)} trials listed")
    c, f = manifest.get("n_channels"), manifest.get("n_bands")
    trials = []
    for e in entries:
        fp = directory / "trials" / f"{e['id']}.feat"
        if not fp.exists():
            raise DatasetError(f"trial {e['id']}: missing {fp}")
        arr = read_array(fp)
        expect = (e["length"], c, f)
        if arr.shape != expect:
            raise DatasetError(f"trial {e['id']}: array shape {arr.shape} != manifest {expect}")
        trials.append(Trial(e["id"], e["subject"], e["label"], arr, e.get("rating"), e.get("sample_rate_hz")))
    return Dataset(trials, c, f, manifest.get("n_classes"), manifest.get("meta", {}))


def write_raw(prefix, signal: np.ndarray, fs_hz: float, channels: Sequence[str] | None = None, **meta) -> None:
    """Write ``<prefix>.raw`` and its ``.meta`` sidecar; ``meta`` adds keys such as ``subject`` or ``rating``."""
    prefix = Path(prefix)
    signal = np.asarray(signal)
    write_array(prefix.with_suffix(".raw"), signal)
    names = list(channels) if channels is not None else [f"ch{i}" for i in range(signal.shape[1])]
    sidecar = {"sample_rate_hz": fs_hz, "channels": names, **meta}
    prefix.with_suffix(".meta").write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def read_raw(prefix) -> tuple[np.ndarray, dict]:
    prefix = Path(prefix)
    meta_path = prefix.with_suffix(".meta")
    if not meta_path.exists():
        raise DatasetError(f"{prefix}: missing sidecar {meta_path.name}")
    meta = json.loads(meta_path.read_text())
    signal = read_array(prefix.with_suffix(".raw"))
    if signal.ndim != 2 or signal.shape[1] != len(meta["channels"]):
        raise DatasetError(f"{prefix}: raw shape {signal.shape} does not match {len(meta['channels'])} channels")
    return signal, meta
