"""Dataset ingestion, leave-one-subject-out splitting, and a synthetic
multi-domain covariate-shift generator.

On-disk layout is bit-exact and dependency free. Each subject has a signal
file and a label file, described by a flat UTF-8 manifest:

    version: 1
    channels: 8
    timesteps: 128
    sample_rate_hz: 128.0
    class_names: drowsy,alert
    subject: S00 S00.eeg S00.lbl 200

Signal files: 16-byte little-endian header {magic 'EEG1', u32 sample count,
u32 channels, u32 timesteps} followed by count*channels*timesteps float32
values in [sample][channel][time] order. Label files: one unsigned byte per
sample, no header.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestionError, ParameterError, SplitError

MAGIC = b"EEG1"
HEADER = struct.Struct("<4sIII")

LABEL_DROWSY = 0
LABEL_ALERT = 1
CLASS_NAMES = ("drowsy", "alert")


@dataclass
class EegSample:
    """One (channels x time) window with its class label and subject id."""

    signal: np.ndarray
    label: int
    subject: str


@dataclass
class SubjectEntry:
    subject_id: str
    signal_file: str
    label_file: str
    sample_count: int


@dataclass
class DatasetManifest:
    version: int
    channels: int
    timesteps: int
    sample_rate_hz: float
    class_names: tuple[str, ...]
    subjects: list[SubjectEntry] = field(default_factory=list)


def write_subject_files(directory, subject_id: str, signals: np.ndarray,
                        labels: np.ndarray) -> SubjectEntry:
    """Write one subject's signal and label files; returns its manifest entry."""
    directory = Path(directory)
    signals = np.asarray(signals, dtype=np.float32)
    labels = np.asarray(labels)
    count, channels, timesteps = signals.shape
    signal_file = f"{subject_id}.eeg"
    label_file = f"{subject_id}.lbl"
    with open(directory / signal_file, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, count, channels, timesteps))
        fh.write(signals.astype("<f4").tobytes())
    with open(directory / label_file, "wb") as fh:
        fh.write(labels.astype(np.uint8).tobytes())
    return SubjectEntry(subject_id, signal_file, label_file, count)


def write_manifest(path, manifest: DatasetManifest) -> None:
    lines = [
        f"version: {manifest.version}",
        f"channels: {manifest.channels}",
        f"timesteps: {manifest.timesteps}",
        f"sample_rate_hz: {manifest.sample_rate_hz}",
        f"class_names: {','.join(manifest.class_names)}",
    ]
    for entry in manifest.subjects:
        lines.append(
            f"subject: {entry.subject_id} {entry.signal_file} "
            f"{entry.label_file} {entry.sample_count}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"manifest not found: {path}")
    fields: dict[str, str] = {}
    subjects: list[SubjectEntry] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise IngestionError(f"{path}:{lineno}: expected 'key: value', got {raw!r}")
        key, _, value = line.partition(":")
        key, value = key.strip(), value.strip()
        if key == "subject":
            parts = value.split()
            if len(parts) != 4:
                raise IngestionError(
                    f"{path}:{lineno}: subject line needs 'id signal label count'"
                )
            try:
                count = int(parts[3])
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: bad sample count {parts[3]!r}") from exc
            subjects.append(SubjectEntry(parts[0], parts[1], parts[2], count))
        else:
            fields[key] = value
    try:
        manifest = DatasetManifest(
            version=int(fields["version"]),
            channels=int(fields["channels"]),
            timesteps=int(fields["timesteps"]),
            sample_rate_hz=float(fields["sample_rate_hz"]),
            class_names=tuple(fields["class_names"].split(",")),
            subjects=subjects,
        )
    except KeyError as exc:
        raise IngestionError(f"{path}: missing manifest key {exc}") from exc
    ids = [s.subject_id for s in manifest.subjects]
    if len(set(ids)) != len(ids):
        raise IngestionError(f"{path}: duplicate subject ids")
    if not manifest.subjects:
        raise IngestionError(f"{path}: manifest lists no subjects")
    return manifest


def _load_subject(directory: Path, entry: SubjectEntry,
                  manifest: DatasetManifest) -> list[EegSample]:
    signal_path = directory / entry.signal_file
    label_path = directory / entry.label_file
    if not signal_path.exists():
        raise IngestionError(f"missing signal file {signal_path}")
    if not label_path.exists():
        raise IngestionError(f"missing label file {label_path}")

    blob = signal_path.read_bytes()
    if len(blob) < HEADER.size:
        raise IngestionError(f"{signal_path}: truncated header ({len(blob)} bytes)")
    magic, count, channels, timesteps = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise IngestionError(f"{signal_path}: bad magic {magic!r} at offset 0")
    if (count, channels, timesteps) != (entry.sample_count, manifest.channels,
                                        manifest.timesteps):
        raise IngestionError(
            f"{signal_path}: header ({count}, {channels}, {timesteps}) does not match "
            f"manifest ({entry.sample_count}, {manifest.channels}, {manifest.timesteps})"
        )
    expected = HEADER.size + count * channels * timesteps * 4
    if len(blob) != expected:
        raise IngestionError(
            f"{signal_path}: expected {expected} bytes, found {len(blob)} "
            f"(payload diverges at offset {min(len(blob), expected)})"
        )
    signals = np.frombuffer(blob, dtype="<f4", offset=HEADER.size)
    signals = signals.reshape(count, channels, timesteps).astype(np.float64)
    if not np.isfinite(signals).all():
        bad = int(np.flatnonzero(~np.isfinite(signals))[0])
        raise IngestionError(f"{signal_path}: non-finite value at flat index {bad}")

    labels = np.frombuffer(label_path.read_bytes(), dtype=np.uint8)
    if labels.size != count:
        raise IngestionError(
            f"{label_path}: expected {count} labels, found {labels.size}"
        )
    n_classes = len(manifest.class_names)
    if labels.size and labels.max() >= n_classes:
        bad = int(np.flatnonzero(labels >= n_classes)[0])
        raise IngestionError(f"{label_path}: label out of range at sample {bad}")

    return [
        EegSample(signal=signals[i], label=int(labels[i]), subject=entry.subject_id)
        for i in range(count)
    ]


def load_dataset(manifest_path) -> tuple[DatasetManifest, list[EegSample]]:
    """Load every subject named by the manifest, in manifest order.

    Validation is fail-closed: any mismatch raises before samples are
    returned.
    """
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    directory = manifest_path.parent
    samples: list[EegSample] = []
    for entry in manifest.subjects:
        samples.extend(_load_subject(directory, entry, manifest))
    return manifest, samples


def group_by_subject(samples: list[EegSample]) -> dict[str, list[EegSample]]:
    groups: dict[str, list[EegSample]] = {}
    for sample in samples:
        groups.setdefault(sample.subject, []).append(sample)
    return groups


@dataclass
class LosoFold:
    held_out: str
    train: list[EegSample]
    test: list[EegSample]


def split_loso(samples: list[EegSample]) -> list[LosoFold]:
    """One fold per subject, ordered by subject id; fold k tests on subject k."""
    groups = group_by_subject(samples)
    if len(groups) < 2:
        raise SplitError(
            f"leave-one-subject-out needs at least 2 subjects, got {len(groups)}"
        )
    folds = []
    for held_out in sorted(groups):
        train = [s for s in samples if s.subject != held_out]
        folds.append(LosoFold(held_out=held_out, train=train, test=groups[held_out]))
    return folds


@dataclass(frozen=True)
class SyntheticConfig:
    """Multi-domain generator with pure covariate shift between domains.

    The class signal (per-channel DC offset plus an optional tone on the
    positive class) is identical in every domain; domains differ only by an
    affine gain/offset and the noise realization:

        sample = gain_d * (class_signal + noise) + offset_d
    """

    num_domains: int = 6
    samples_per_domain_per_class: int = 100
    channels: int = 8
    timesteps: int = 128
    sample_rate_hz: float = 128.0
    class_mean_offset: float = 1.0
    tone_frequency_hz: float = 10.0
    tone_amplitude: float = 0.0
    domain_gain_range: tuple[float, float] = (0.5, 2.0)
    domain_offset_range: tuple[float, float] = (-1.0, 1.0)
    noise_std: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.num_domains < 1 or self.samples_per_domain_per_class < 1:
            raise ParameterError("domain and sample counts must be positive")
        if self.channels < 1 or self.timesteps < 2:
            raise ParameterError("need at least 1 channel and 2 timesteps")
        if self.noise_std < 0:
            raise ParameterError(f"noise_std must be >= 0, got {self.noise_std}")
        for lo, hi in (self.domain_gain_range, self.domain_offset_range):
            if hi < lo:
                raise ParameterError(f"empty range ({lo}, {hi})")


@dataclass
class SyntheticGroundTruth:
    """Generator parameters actually drawn, for oracle checks downstream."""

    domain_gain: dict[str, float]
    domain_offset: dict[str, float]
    config: SyntheticConfig


def synthetic_subject_id(index: int) -> str:
    return f"S{index:02d}"


def generate_synthetic(config: SyntheticConfig) -> tuple[list[EegSample], SyntheticGroundTruth]:
    """Deterministically sample the synthetic multi-domain dataset."""
    rng = np.random.default_rng(config.seed)
    t = np.arange(config.timesteps) / config.sample_rate_hz
    tone = config.tone_amplitude * np.sin(2.0 * np.pi * config.tone_frequency_hz * t)

    samples: list[EegSample] = []
    gains: dict[str, float] = {}
    offsets: dict[str, float] = {}
    for d in range(config.num_domains):
        subject = synthetic_subject_id(d)
        gain = float(rng.uniform(*config.domain_gain_range))
        offset = float(rng.uniform(*config.domain_offset_range))
        gains[subject] = gain
        offsets[subject] = offset
        for label in (LABEL_DROWSY, LABEL_ALERT):
            base = np.zeros((config.channels, config.timesteps))
            if label == LABEL_ALERT:
                base += config.class_mean_offset
                base += tone[None, :]
            for _ in range(config.samples_per_domain_per_class):
                noise = rng.normal(0.0, config.noise_std,
                                   size=(config.channels, config.timesteps))
                signal = gain * (base + noise) + offset
                samples.append(EegSample(signal=signal, label=label, subject=subject))
    return samples, SyntheticGroundTruth(domain_gain=gains, domain_offset=offsets,
                                         config=config)


def save_synthetic_dataset(directory, config: SyntheticConfig):
    """Generate and persist a synthetic dataset; returns (manifest path, truth)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    samples, truth = generate_synthetic(config)
    manifest = DatasetManifest(
        version=1,
        channels=config.channels,
        timesteps=config.timesteps,
        sample_rate_hz=config.sample_rate_hz,
        class_names=CLASS_NAMES,
    )
    for subject, subject_samples in sorted(group_by_subject(samples).items()):
        signals = np.stack([s.signal for s in subject_samples])
        labels = np.array([s.label for s in subject_samples], dtype=np.uint8)
        manifest.subjects.append(
            write_subject_files(directory, subject, signals, labels)
        )
    manifest_path = directory / "manifest.txt"
    write_manifest(manifest_path, manifest)
    return manifest_path, truth
