"""Dataset ingestion, persistence, stratified splitting and synthetic cohorts.

Subject matrices are stored in the ``SDF1`` binary format::

    b"SDF1" | u32 D | u32 T | D*T float32, row-major, little-endian

Series are held in memory as float64 and written as float32. The manifest is
a UTF-8 JSON document::

    {"num_classes": 2, "class_names": ["HC", "MDD"], "sampling_period_s": 2.0,
     "subjects": [{"subject_id": "s000", "class_label": 0, "path": "s000.sdf"}]}

Subjects may carry an optional ``provenance`` field (``"real"`` or
``"synthetic"``), which augmentation uses to tag generated records.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ArtifactIOError, ValidationError
from .rng import substream

SDF_MAGIC = b"SDF1"
_SDF_HEADER = struct.Struct("<4sII")


@dataclass
class SubjectRecord:
    subject_id: str
    class_label: int
    series: np.ndarray  # (D, T) float64
    provenance: str = "real"

    @property
    def D(self) -> int:
        return self.series.shape[0]

    @property
    def T(self) -> int:
        return self.series.shape[1]


@dataclass
class SubjectEntry:
    subject_id: str
    class_label: int
    path: str
    provenance: str = "real"


@dataclass
class DatasetManifest:
    num_classes: int
    class_names: list[str]
    subjects: list[SubjectEntry] = field(default_factory=list)
    sampling_period_s: float = 2.0

    def to_dict(self) -> dict:
        subjects = []
        for s in self.subjects:
            entry = {"subject_id": s.subject_id, "class_label": s.class_label, "path": s.path}
            if s.provenance != "real":
                entry["provenance"] = s.provenance
            subjects.append(entry)
        return {
            "num_classes": self.num_classes,
            "class_names": list(self.class_names),
            "sampling_period_s": self.sampling_period_s,
            "subjects": subjects,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetManifest":
        try:
            subjects = [
                SubjectEntry(str(s["subject_id"]), int(s["class_label"]), str(s["path"]),
                             str(s.get("provenance", "real")))
                for s in doc.get("subjects", [])
            ]
            manifest = cls(
                num_classes=int(doc["num_classes"]),
                class_names=[str(c) for c in doc["class_names"]],
                subjects=subjects,
                sampling_period_s=float(doc.get("sampling_period_s", 2.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed manifest: {exc}") from exc
        manifest.validate()
        return manifest

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        if len(self.class_names) != self.num_classes:
            raise ValidationError(
                f"class_names has {len(self.class_names)} entries, expected {self.num_classes}")
        if not self.sampling_period_s > 0:
            raise ValidationError("sampling_period_s must be positive")
        seen = set()
        for s in self.subjects:
            if s.subject_id in seen:
                raise ValidationError(f"duplicate subject_id {s.subject_id!r}")
            seen.add(s.subject_id)
            if not 0 <= s.class_label < self.num_classes:
                raise ValidationError(
                    f"subject {s.subject_id!r}: class_label {s.class_label} out of range")


def validate_record(record: SubjectRecord, num_classes: int | None = None) -> None:
    x = record.series
    if x.ndim != 2:
        raise ValidationError(f"subject {record.subject_id!r}: series must be 2-D, got {x.shape}")
    D, T = x.shape
    if D < 1 or T < 2:
        raise ValidationError(f"subject {record.subject_id!r}: need D >= 1 and T >= 2, got {D}x{T}")
    bad = np.argwhere(~np.isfinite(x))
    if bad.size:
        r, c = bad[0]
        raise ValidationError(
            f"subject {record.subject_id!r}: non-finite value at (row {r}, col {c})")
    if num_classes is not None and not 0 <= record.class_label < num_classes:
        raise ValidationError(f"subject {record.subject_id!r}: class_label out of range")


# -- matrix files -------------------------------------------------------------

def write_matrix(path, matrix) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValidationError("SDF1 stores 2-D matrices only")
    try:
        with open(path, "wb") as f:
            f.write(_SDF_HEADER.pack(SDF_MAGIC, m.shape[0], m.shape[1]))
            f.write(m.tobytes(order="C"))
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def read_matrix(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    if len(data) < _SDF_HEADER.size:
        raise ValidationError(f"{path}: truncated SDF1 header")
    magic, D, T = _SDF_HEADER.unpack_from(data)
    if magic != SDF_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    expected = _SDF_HEADER.size + 4 * D * T
    if len(data) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=_SDF_HEADER.size, count=D * T)
    return values.reshape(D, T).astype(np.float64)


def read_csv_matrix(path) -> np.ndarray:
    """D rows by T comma-separated columns, no header."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    rows = [line for line in text.splitlines() if line.strip()]
    try:
        matrix = np.array([[float(v) for v in row.split(",")] for row in rows], dtype=np.float64)
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    if matrix.ndim != 2:
        raise ValidationError(f"{path}: ragged rows")
    return matrix


def _read_subject_file(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".csv":
        return read_csv_matrix(path)
    return read_matrix(path)


# -- datasets -----------------------------------------------------------------

def load_manifest(manifest_path) -> DatasetManifest:
    try:
        doc = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ValidationError(f"manifest not found: {manifest_path}") from exc
    except OSError as exc:
        raise ArtifactIOError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest {manifest_path} does not parse: {exc}") from exc
    return DatasetManifest.from_dict(doc)


def load_dataset(manifest_path) -> tuple[list[SubjectRecord], DatasetManifest]:
    """Load every subject listed in a manifest, in manifest order."""
    manifest = load_manifest(manifest_path)
    root = Path(manifest_path).parent
    records = []
    shape = None
    for entry in manifest.subjects:
        path = root / entry.path
        if not path.exists():
            raise ValidationError(f"subject {entry.subject_id!r}: missing file {path}")
        series = _read_subject_file(path)
        record = SubjectRecord(entry.subject_id, entry.class_label, series, entry.provenance)
        validate_record(record, manifest.num_classes)
        if shape is None:
            shape = series.shape
        elif series.shape != shape:
            raise ValidationError(
                f"subject {entry.subject_id!r}: shape {series.shape} differs from {shape}")
        records.append(record)
    return records, manifest


def save_dataset(records: Sequence[SubjectRecord], manifest: DatasetManifest, out_dir) -> Path:
    """Write subject files plus ``manifest.json``; returns the manifest path.

    The manifest's subject list is rebuilt from ``records``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactIOError(f"cannot create {out}: {exc}") from exc
    entries = []
    for r in records:
        fname = f"{r.subject_id}.sdf"
        write_matrix(out / fname, r.series)
        entries.append(SubjectEntry(r.subject_id, r.class_label, fname, r.provenance))
    written = DatasetManifest(manifest.num_classes, list(manifest.class_names), entries,
                              manifest.sampling_period_s)
    written.validate()
    path = out / "manifest.json"
    try:
        path.write_text(json.dumps(written.to_dict(), indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    return path


# -- synthetic cohorts --------------------------------------------------------

@dataclass
class ClassGenerator:
    """Per-class AR(2) plus sinusoid generator parameters.

    ``couplings`` lists ``(src, dst, weight)`` triples that add ``weight`` times
    ROI ``src``'s AR component into ROI ``dst``.
    """
    ar: tuple[float, float] = (0.5, -0.3)
    noise_std: float = 1.0
    freqs_hz: tuple[float, ...] = ()
    amps: tuple[float, ...] = ()
    couplings: tuple[tuple[int, int, float], ...] = ()

    def key(self):
        return (tuple(self.ar), self.noise_std, tuple(self.freqs_hz), tuple(self.amps),
                tuple(tuple(c) for c in self.couplings))


@dataclass
class SynthCohortConfig:
    num_subjects_per_class: int = 10
    D: int = 4
    T: int = 232
    seed: int = 0
    sampling_period_s: float = 2.0
    class_generators: tuple[ClassGenerator, ...] = field(default_factory=lambda: (
        ClassGenerator(),
        ClassGenerator(freqs_hz=(0.05,), amps=(1.0,)),
    ))
    burn_in: int = 100


def ar2_is_stable(phi1: float, phi2: float) -> bool:
    roots = np.roots([1.0, -phi1, -phi2])
    return bool(np.all(np.abs(roots) < 1.0))


def _validate_synth(config: SynthCohortConfig) -> None:
    if config.num_subjects_per_class < 0 or config.D < 1 or config.T < 2:
        raise ValidationError("need num_subjects_per_class >= 0, D >= 1, T >= 2")
    gens = config.class_generators
    if not gens:
        raise ValidationError("at least one class generator required")
    for c, g in enumerate(gens):
        if len(g.ar) != 2:
            raise ValidationError(f"class {c}: AR order must be 2")
        if not ar2_is_stable(*g.ar):
            raise ValidationError(f"class {c}: AR coefficients {g.ar} are not stationary")
        if len(g.freqs_hz) != len(g.amps):
            raise ValidationError(f"class {c}: freqs_hz and amps differ in length")
        if g.noise_std < 0:
            raise ValidationError(f"class {c}: noise_std must be >= 0")
        for src, dst, _ in g.couplings:
            if not (0 <= src < config.D and 0 <= dst < config.D):
                raise ValidationError(f"class {c}: coupling ROI index out of range")
    if len({g.key() for g in gens}) != len(gens):
        raise ValidationError("class generators must differ in at least one parameter")


def _ar2(phi: tuple[float, float], innovations: np.ndarray, burn_in: int) -> np.ndarray:
    phi1, phi2 = phi
    n = innovations.shape[-1]
    out = np.zeros_like(innovations)
    prev1 = np.zeros(innovations.shape[:-1])
    prev2 = np.zeros(innovations.shape[:-1])
    for t in range(n):
        cur = phi1 * prev1 + phi2 * prev2 + innovations[..., t]
        out[..., t] = cur
        prev2, prev1 = prev1, cur
    return out[..., burn_in:]


def generate_synthetic_cohort(config: SynthCohortConfig) -> list[SubjectRecord]:
    """Seeded cohort; subject ``i`` of class ``c`` uses substream (seed, "cohort", c, i)."""
    _validate_synth(config)
    dt = config.sampling_period_s
    t = np.arange(config.T) * dt
    records = []
    for c, gen in enumerate(config.class_generators):
        for i in range(config.num_subjects_per_class):
            rng = substream(config.seed, "cohort", c, i)
            innov = gen.noise_std * rng.standard_normal((config.D, config.T + config.burn_in))
            ar = _ar2(gen.ar, innov, config.burn_in)
            x = ar.copy()
            for src, dst, w in gen.couplings:
                x[dst] += w * ar[src]
            phases = rng.uniform(0.0, 2 * np.pi, size=len(gen.freqs_hz))
            for f, a, ph in zip(gen.freqs_hz, gen.amps, phases):
                x += a * np.sin(2 * np.pi * f * t + ph)
            records.append(SubjectRecord(f"c{c}_s{i:03d}", c, x))
    return records


def synthetic_manifest(config: SynthCohortConfig, class_names: Sequence[str] | None = None) -> DatasetManifest:
    n = len(config.class_generators)
    names = list(class_names) if class_names else (["HC", "MDD"] if n == 2 else [f"class{i}" for i in range(n)])
    return DatasetManifest(n, names, [], config.sampling_period_s)


# -- splitting ----------------------------------------------------------------

def stratified_kfold(records_or_labels, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold partitions as sorted (train, test) index arrays.

    Members of each class are shuffled with substream (seed, "kfold", class)
    and dealt round-robin; each class starts where the previous one stopped so
    fold sizes stay balanced overall.
    """
    labels = np.array([getattr(r, "class_label", r) for r in records_or_labels], dtype=int)
    if k < 2:
        raise ValidationError("k must be >= 2")
    folds: list[list[int]] = [[] for _ in range(k)]
    start = 0
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < k:
            raise ValidationError(f"class {c} has {len(members)} members, fewer than k={k}")
        members = substream(seed, "kfold", int(c)).permutation(members)
        for j, idx in enumerate(members):
            folds[(start + j) % k].append(int(idx))
        start = (start + len(members)) % k
    everything = np.arange(len(labels))
    out = []
    for fold in folds:
        test = np.array(sorted(fold), dtype=int)
        train = np.setdiff1d(everything, test)
        out.append((train, test))
    return out


def class_counts(records: Sequence[SubjectRecord], num_classes: int) -> list[int]:
    counts = [0] * num_classes
    for r in records:
        counts[r.class_label] += 1
    return counts


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        os.makedirs(p, exist_ok=True)
    except OSError as exc:
        raise ArtifactIOError(f"cannot create {p}: {exc}") from exc
    return p
