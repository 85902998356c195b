"""Feature-sequence storage, manifests, modality fusion, and synthetic data.

The EMOF binary format stores one T x E float32 sequence per file:

    magic "EMOF" | version u16 = 1 | modality u8 (0 speech, 1 text) |
    reserved u8 = 0 | T u32 | E u32 | T*E float32, little-endian

so a file is always 16 + 4*T*E bytes. Manifests are UTF-8 CSV with header
`id,speech,text,label`; the class table is a text file with one label name
per line (line number = class index).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, ParseError
from .numerics import Rng, get_dtype

EMOF_MAGIC = b"EMOF"
EMOF_VERSION = 1
_MODALITY_CODES = {"speech": 0, "text": 1}
_MODALITY_NAMES = {0: "speech", 1: "text"}

# Corpus taxonomy (surprise absent); index order is a project convention.
EMOTIONS = ("neutral", "disgust", "anger", "joy", "sadness", "fear")


@dataclass
class FeatureSequence:
    """T x E float frames for one modality of one utterance."""

    modality: str
    values: np.ndarray

    def __post_init__(self):
        if self.modality not in _MODALITY_CODES:
            raise DataError(f"unknown modality {self.modality!r}")
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise DimensionError(f"feature values must be T x E, got ndim={self.values.ndim}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("feature values contain non-finite entries")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def E(self) -> int:
        return self.values.shape[1]


@dataclass
class Sample:
    """One utterance: speech features, text features, class label."""

    id: str
    speech: FeatureSequence
    text: FeatureSequence
    label: int


@dataclass
class ManifestRecord:
    id: str
    speech_path: str
    text_path: str
    label_name: str


@dataclass
class Manifest:
    records: list[ManifestRecord]
    class_names: list[str]


@dataclass
class SyntheticSpec:
    """Desk-scale stand-in for a real corpus: Gaussian frames around class means."""

    class_counts: tuple[int, ...] = (300, 250, 150, 120, 100, 80)
    embed_dim: int = 64
    speech_frames: tuple[int, int] = (8, 24)
    text_frames: tuple[int, int] = (4, 12)
    separation: float = 5.0
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if any(c < 1 for c in self.class_counts):
            raise DataError("every class needs at least one sample")
        if self.separation <= 0:
            raise DataError("class-mean separation must be positive")

    @property
    def n_classes(self) -> int:
        return len(self.class_counts)


def class_names_for(k: int) -> list[str]:
    """Canonical label names for K classes (corpus names first, then classN)."""
    return [EMOTIONS[i] if i < len(EMOTIONS) else f"class{i}" for i in range(k)]


# ---------------------------------------------------------------------------
# EMOF binary format
# ---------------------------------------------------------------------------


def write_features(f: FeatureSequence) -> bytes:
    if f.T < 1:
        raise DataError("stored feature sequences need at least one frame")
    header = struct.pack(
        "<4sHBBII", EMOF_MAGIC, EMOF_VERSION, _MODALITY_CODES[f.modality], 0, f.T, f.E
    )
    return header + np.ascontiguousarray(f.values, dtype="<f4").tobytes()


def read_features(data: bytes) -> FeatureSequence:
    if len(data) < 16:
        raise ParseError("EMOF header truncated")
    magic, version, modality, _, t, e = struct.unpack_from("<4sHBBII", data, 0)
    if magic != EMOF_MAGIC:
        raise ParseError(f"bad EMOF magic {magic!r}")
    if version != EMOF_VERSION:
        raise ParseError(f"unsupported EMOF version {version}")
    if modality not in _MODALITY_NAMES:
        raise ParseError(f"unknown modality code {modality}")
    expected = 16 + 4 * t * e
    if len(data) != expected:
        raise ParseError(f"EMOF payload is {len(data)} bytes, header implies {expected}")
    values = np.frombuffer(data, dtype="<f4", offset=16).reshape(t, e)
    return FeatureSequence(_MODALITY_NAMES[modality], values.astype(get_dtype()))


def save_features(path, f: FeatureSequence) -> None:
    with open(path, "wb") as fh:
        fh.write(write_features(f))


def load_features(path) -> FeatureSequence:
    with open(path, "rb") as fh:
        return read_features(fh.read())


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------


def fuse_modalities(speech: FeatureSequence, text: FeatureSequence) -> np.ndarray:
    """Concatenate along the frame axis: speech frames first, then text frames."""
    if speech.E != text.E:
        raise DimensionError(f"embedding dims differ: speech E={speech.E}, text E={text.E}")
    if speech.T == 0 and text.T == 0:
        raise DataError("both modalities are empty")
    if text.T == 0:
        return speech.values
    if speech.T == 0:
        return text.values
    return np.concatenate([speech.values, text.values], axis=0)


# ---------------------------------------------------------------------------
# Synthetic dataset
# ---------------------------------------------------------------------------


def _class_mean(root: Rng, k: int, dim: int, separation: float) -> np.ndarray:
    """Deterministic per-class pattern direction, scaled to the separation."""
    g = root.child("class-mean", k).normal(size=dim)
    return separation * g / np.linalg.norm(g)


def gen_synthetic(spec: SyntheticSpec) -> list[Sample]:
    """Generate class-k samples as mean_k + noise * N(0, 1) frames.

    Sample content depends only on (seed, class, index within class), so
    generation order never matters.
    """
    root = Rng(spec.seed)
    dtype = get_dtype()
    means = [_class_mean(root, k, spec.embed_dim, spec.separation) for k in range(spec.n_classes)]
    names = class_names_for(spec.n_classes)
    samples = []
    for k, count in enumerate(spec.class_counts):
        for i in range(count):
            rng = root.child("sample", k, i)
            t_speech = int(rng.integers(spec.speech_frames[0], spec.speech_frames[1] + 1))
            t_text = int(rng.integers(spec.text_frames[0], spec.text_frames[1] + 1))
            speech = means[k] + spec.noise * rng.normal(size=(t_speech, spec.embed_dim))
            text = means[k] + spec.noise * rng.normal(size=(t_text, spec.embed_dim))
            samples.append(
                Sample(
                    id=f"{names[k]}_{i:04d}",
                    speech=FeatureSequence("speech", speech.astype(dtype)),
                    text=FeatureSequence("text", text.astype(dtype)),
                    label=k,
                )
            )
    return samples


def stratified_split_indices(labels, val_fraction: float, rng: Rng) -> tuple[list[int], list[int]]:
    """Deterministic per-class split into (train indices, val indices).

    Each class contributes round(fraction * n_k) validation samples (at least
    one when it has two or more), always keeping at least one in train.
    Returned index lists preserve the original dataset order.
    """
    if not 0.0 < val_fraction < 1.0:
        raise DataError(f"val fraction must be in (0, 1), got {val_fraction}")
    by_class: dict[int, list[int]] = {}
    for i, label in enumerate(labels):
        by_class.setdefault(label, []).append(i)
    val: set[int] = set()
    for label, idxs in sorted(by_class.items()):
        if len(idxs) < 2:
            continue
        n_val = min(len(idxs) - 1, max(1, round(val_fraction * len(idxs))))
        perm = rng.child("split", label).permutation(len(idxs))
        val.update(idxs[j] for j in perm[:n_val])
    train_idx = [i for i in range(len(labels)) if i not in val]
    val_idx = [i for i in range(len(labels)) if i in val]
    return train_idx, val_idx


# ---------------------------------------------------------------------------
# Manifest + class table
# ---------------------------------------------------------------------------


def read_class_table(path) -> list[str]:
    names = [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    if not names:
        raise DataError(f"class table {path} is empty")
    if len(set(names)) != len(names):
        raise DataError(f"class table {path} has duplicate names")
    return names


def write_class_table(path, names) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def load_manifest(manifest_path, class_table_path) -> tuple[Manifest, list[Sample]]:
    """Load a manifest CSV and materialize every referenced feature file.

    Relative feature paths resolve against the manifest's directory. Errors
    carry the 1-based record number.
    """
    class_names = read_class_table(class_table_path)
    class_index = {n: i for i, n in enumerate(class_names)}
    base = Path(manifest_path).parent

    records: list[ManifestRecord] = []
    samples: list[Sample] = []
    seen_ids: set[str] = set()
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "speech", "text", "label"]:
            raise DataError(f"manifest header must be id,speech,text,label, got {header}")
        for num, row in enumerate(reader, start=1):
            if len(row) != 4:
                raise DataError(f"record {num}: expected 4 fields, got {len(row)}")
            sid, speech_path, text_path, label_name = row
            if sid in seen_ids:
                raise DataError(f"record {num}: duplicate id {sid!r}")
            seen_ids.add(sid)
            if label_name not in class_index:
                raise DataError(f"record {num}: unknown label {label_name!r}")
            seqs = {}
            for modality, rel in (("speech", speech_path), ("text", text_path)):
                full = base / rel
                try:
                    seqs[modality] = load_features(full)
                except FileNotFoundError:
                    raise DataError(f"record {num}: missing feature file {full}") from None
                except ParseError as exc:
                    raise DataError(f"record {num}: {full}: {exc}") from exc
                if seqs[modality].modality != modality:
                    raise DataError(
                        f"record {num}: {full} holds {seqs[modality].modality} features, expected {modality}"
                    )
            records.append(ManifestRecord(sid, speech_path, text_path, label_name))
            samples.append(Sample(sid, seqs["speech"], seqs["text"], class_index[label_name]))
    return Manifest(records, class_names), samples


def write_dataset(out_dir, samples: list[Sample], class_names) -> Path:
    """Write EMOF files plus manifest.csv and classes.txt; returns manifest path."""
    out = Path(out_dir)
    features = out / "features"
    features.mkdir(parents=True, exist_ok=True)
    write_class_table(out / "classes.txt", class_names)
    manifest_path = out / "manifest.csv"
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "speech", "text", "label"])
        for s in samples:
            speech_rel = f"features/{s.id}.speech.emof"
            text_rel = f"features/{s.id}.text.emof"
            save_features(out / speech_rel, s.speech)
            save_features(out / text_rel, s.text)
            writer.writerow([s.id, speech_rel, text_rel, class_names[s.label]])
    return manifest_path
