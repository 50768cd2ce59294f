"""Dataset container, normalization, L-epoch windowing and subject-wise folds.

Container layout (a directory)::

    manifest.json          UTF-8 JSON, keys sorted, 2-space indent, trailing newline
    <stem>.f32             samples, 32-bit little-endian IEEE-754 floats, no header
    <stem>.u8              labels, one unsigned byte per epoch (0=W 1=N1 2=N2 3=N3 4=REM)

The manifest holds ``format``, ``version``, ``epoch_seconds``, ``sampling_hz`` and
``records``: a list of ``{subject_id, signal_file, labels_file, num_epochs}``.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, LoadError, ValidationError

log = logging.getLogger(__name__)

STAGES = ("W", "N1", "N2", "N3", "REM")
NUM_CLASSES = 5
MANIFEST = "manifest.json"
FORMAT_NAME = "protosleep-dataset"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class DatasetConfig:
    epoch_seconds: int = 30
    sampling_hz: int = 100
    window_len: int = 10
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.epoch_seconds <= 0 or self.sampling_hz <= 0:
            raise ConfigError("epoch_seconds and sampling_hz must be positive")
        if self.window_len < 1:
            raise ConfigError(f"window_len must be >= 1, got {self.window_len}")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError("num_classes is fixed at 5")

    @property
    def epoch_samples(self) -> int:
        return self.epoch_seconds * self.sampling_hz

    @property
    def window_samples(self) -> int:
        return self.epoch_samples * self.window_len


@dataclass
class Recording:
    subject_id: str
    samples: np.ndarray
    labels: np.ndarray

    @property
    def num_epochs(self) -> int:
        return len(self.labels)

    def validate(self, epoch_samples: int) -> None:
        if len(self.samples) % epoch_samples:
            raise FormatError(
                f"{self.subject_id}: {len(self.samples)} samples is not a multiple of {epoch_samples}"
            )
        if len(self.labels) * epoch_samples != len(self.samples):
            raise FormatError(
                f"{self.subject_id}: {len(self.labels)} labels do not match "
                f"{len(self.samples) // epoch_samples} epochs of samples"
            )
        bad = np.flatnonzero((self.labels < 0) | (self.labels >= NUM_CLASSES))
        if bad.size:
            i = int(bad[0])
            raise ValidationError(
                f"{self.subject_id}: epoch {i} has label {int(self.labels[i])} outside 0..4"
            )


@dataclass(frozen=True)
class EpochWindow:
    """L consecutive epochs; ``label`` is the stage of the last one."""

    signal: np.ndarray
    label: int
    subject_id: str
    epoch_index: int

    @property
    def ref(self) -> tuple[str, int]:
        return (self.subject_id, self.epoch_index)


@dataclass
class FoldAssignment:
    fold_count: int
    subject_to_fold: dict[str, int]
    held_out_validation: list[tuple[str, ...]] = field(default_factory=list)

    def test_subjects(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.subject_to_fold.items() if f == fold)

    def val_subjects(self, fold: int) -> list[str]:
        return sorted(self.held_out_validation[fold])

    def train_subjects(self, fold: int) -> list[str]:
        excluded = set(self.test_subjects(fold)) | set(self.held_out_validation[fold])
        return sorted(s for s in self.subject_to_fold if s not in excluded)

    def to_dict(self) -> dict:
        return {
            "fold_count": self.fold_count,
            "subject_to_fold": dict(sorted(self.subject_to_fold.items())),
            "held_out_validation": [sorted(v) for v in self.held_out_validation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldAssignment":
        return cls(
            int(d["fold_count"]),
            {str(k): int(v) for k, v in d["subject_to_fold"].items()},
            [tuple(v) for v in d["held_out_validation"]],
        )


def _file_stem(index: int, subject_id: str) -> str:
    return f"{index:04d}_" + re.sub(r"[^A-Za-z0-9_.-]", "_", subject_id)


def save_dataset(path, recordings: list[Recording], epoch_seconds: int, sampling_hz: int) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    epoch_samples = epoch_seconds * sampling_hz
    records = []
    for i, rec in enumerate(recordings):
        rec.validate(epoch_samples)
        stem = _file_stem(i, rec.subject_id)
        np.asarray(rec.samples, dtype="<f4").tofile(path / f"{stem}.f32")
        np.asarray(rec.labels, dtype="u1").tofile(path / f"{stem}.u8")
        records.append(
            {
                "subject_id": rec.subject_id,
                "signal_file": f"{stem}.f32",
                "labels_file": f"{stem}.u8",
                "num_epochs": rec.num_epochs,
            }
        )
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "epoch_seconds": epoch_seconds,
        "sampling_hz": sampling_hz,
        "records": records,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(manifest_path) -> tuple[dict, Path]:
    p = Path(manifest_path)
    if p.is_dir():
        p = p / MANIFEST
    if not p.exists():
        raise LoadError(f"manifest not found: {p}")
    try:
        manifest = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{p}: not valid JSON ({e})") from e
    for key in ("epoch_seconds", "sampling_hz", "records"):
        if key not in manifest:
            raise FormatError(f"{p}: missing key {key!r}")
    return manifest, p.parent


def load_dataset(manifest_path) -> list[Recording]:
    """Load every record listed in a manifest (file or its directory)."""
    manifest, root = read_manifest(manifest_path)
    epoch_samples = int(manifest["epoch_seconds"]) * int(manifest["sampling_hz"])
    out = []
    for entry in manifest["records"]:
        sig_path = root / entry["signal_file"]
        lab_path = root / entry["labels_file"]
        for fp in (sig_path, lab_path):
            if not fp.exists():
                raise LoadError(f"record file missing: {fp}")
        samples = np.fromfile(sig_path, dtype="<f4")
        labels = np.fromfile(lab_path, dtype="u1")
        if len(labels) != int(entry["num_epochs"]):
            raise FormatError(
                f"{lab_path}: {len(labels)} labels but manifest says {entry['num_epochs']}"
            )
        rec = Recording(str(entry["subject_id"]), samples, labels)
        rec.validate(epoch_samples)
        out.append(rec)
    return out


def dataset_config(manifest_path, window_len: int = 10) -> DatasetConfig:
    manifest, _ = read_manifest(manifest_path)
    return DatasetConfig(int(manifest["epoch_seconds"]), int(manifest["sampling_hz"]), window_len)


def normalize_recording(r: Recording) -> Recording:
    """Per-recording z-score (population SD). Constant input maps to zeros."""
    if len(r.samples) == 0:
        raise ValidationError(f"{r.subject_id}: empty recording")
    x = np.asarray(r.samples, dtype=np.float64)
    sd = x.std()
    if sd == 0.0:
        log.warning("recording %s is constant; normalized to zeros", r.subject_id)
        z = np.zeros_like(x)
    else:
        z = (x - x.mean()) / sd
    return Recording(r.subject_id, z.astype(np.float32), r.labels.copy())


def make_windows(r: Recording, cfg: DatasetConfig) -> list[EpochWindow]:
    """Sliding L-epoch windows with stride one epoch. Signals are views into ``r.samples``."""
    n, L, es = r.num_epochs, cfg.window_len, cfg.epoch_samples
    if len(r.samples) != n * es:
        raise FormatError(f"{r.subject_id}: sample count does not match {n} epochs of {es}")
    if n < L:
        log.warning("recording %s has %d epochs < L=%d; no windows", r.subject_id, n, L)
        return []
    return [
        EpochWindow(r.samples[i * es : (i + L) * es], int(r.labels[i + L - 1]), r.subject_id, i + L - 1)
        for i in range(n - L + 1)
    ]


def windows_for(recordings: list[Recording], cfg: DatasetConfig, subjects=None) -> list[EpochWindow]:
    keep = None if subjects is None else set(subjects)
    out = []
    for rec in recordings:
        if keep is None or rec.subject_id in keep:
            out.extend(make_windows(rec, cfg))
    return out


def assign_folds(recordings: list[Recording], k: int, val_subjects: int, seed: int) -> FoldAssignment:
    subjects = sorted({r.subject_id for r in recordings})
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if k > len(subjects):
        raise ConfigError(f"k={k} exceeds the {len(subjects)} distinct subjects")
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    groups = np.array_split(np.arange(len(order)), k)
    subject_to_fold = {order[i]: f for f, g in enumerate(groups) for i in g}
    held_out = []
    for f in range(k):
        rest = [s for s in order if subject_to_fold[s] != f]
        if val_subjects >= len(rest):
            raise ConfigError(
                f"fold {f}: val_subjects={val_subjects} leaves no training subjects out of {len(rest)}"
            )
        picks = rng.permutation(len(rest))[:val_subjects]
        held_out.append(tuple(sorted(rest[i] for i in picks)))
    return FoldAssignment(k, subject_to_fold, held_out)
