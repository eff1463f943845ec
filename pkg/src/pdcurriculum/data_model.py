"""Subject records, cohort manifests and deterministic stratified splitting."""

from __future__ import annotations

import csv
import math
import random
import warnings
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MANIFEST_COLUMNS = ("subject_id", "age", "sex", "diagnosis", "hy_stage", "site", "volume_ref")
STAGES = (0, 1, 2, 3, 4)


class ManifestError(ValueError):
    """Raised when a manifest row or file fails validation."""


class Sex(str, Enum):
    FEMALE = "F"
    MALE = "M"


class Diagnosis(str, Enum):
    CONTROL = "CN"
    PATIENT = "PD"


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    age: float
    sex: Sex
    diagnosis: Diagnosis
    hy_stage: int | None
    site: str
    volume_ref: str

    def __post_init__(self):
        if not self.subject_id:
            raise ManifestError("empty subject_id")
        if not 0 < self.age < 120:
            raise ManifestError(f"{self.subject_id}: age {self.age} outside (0, 120)")
        if self.diagnosis is Diagnosis.CONTROL and self.hy_stage is not None:
            raise ManifestError(f"{self.subject_id}: control carries H&Y stage {self.hy_stage}")
        if self.diagnosis is Diagnosis.PATIENT:
            if self.hy_stage is None:
                raise ManifestError(f"{self.subject_id}: patient without H&Y stage")
            if self.hy_stage not in STAGES:
                raise ManifestError(f"{self.subject_id}: H&Y stage {self.hy_stage} not in 0..4")

    @property
    def is_patient(self) -> bool:
        return self.diagnosis is Diagnosis.PATIENT

    @property
    def sex_label(self) -> int:
        """Binary target for the sex head (male = 1)."""
        return int(self.sex is Sex.MALE)

    @property
    def dx_label(self) -> int:
        return int(self.is_patient)


@dataclass(frozen=True)
class CohortManifest:
    name: str
    records: tuple[SubjectRecord, ...]
    canonical_shape: tuple[int, int, int]
    root: Path | None = field(default=None, compare=False)
    # volume_ref -> array, for cohorts that live in memory
    embedded: Mapping[str, np.ndarray] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "canonical_shape", tuple(int(s) for s in self.canonical_shape))
        if len(self.canonical_shape) != 3 or any(s <= 0 for s in self.canonical_shape):
            raise ManifestError(f"canonical_shape must be three positive ints, got {self.canonical_shape}")
        seen = set()
        for rec in self.records:
            if rec.subject_id in seen:
                raise ManifestError(f"duplicate subject_id {rec.subject_id!r}")
            seen.add(rec.subject_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def subject_ids(self) -> list[str]:
        return [r.subject_id for r in self.records]

    def get(self, subject_id: str) -> SubjectRecord:
        for rec in self.records:
            if rec.subject_id == subject_id:
                return rec
        raise KeyError(subject_id)

    def subset(self, subject_ids: Iterable[str], name: str | None = None) -> "CohortManifest":
        """Manifest restricted to ``subject_ids``, in the given order."""
        by_id = {r.subject_id: r for r in self.records}
        records = [by_id[s] for s in subject_ids]
        return replace(self, name=name or self.name, records=tuple(records))

    def volume_path(self, record: SubjectRecord) -> Path:
        path = Path(record.volume_ref)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path

    def load_volume(self, record: SubjectRecord):
        from .preprocessing import Volume, read_volume

        if self.embedded is not None and record.volume_ref in self.embedded:
            return Volume(self.embedded[record.volume_ref])
        return read_volume(self.volume_path(record))

    def stage_counts(self) -> dict[str, int]:
        counts: dict[str, int] = defaultdict(int)
        for rec in self.records:
            counts["CN" if rec.hy_stage is None else f"s{rec.hy_stage}"] += 1
        return dict(counts)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0
    stratify_by: tuple[str, ...] = ("diagnosis", "hy_stage")

    def __post_init__(self):
        fractions = self.fractions
        if any(not 0 < f < 1 for f in fractions):
            raise ValueError(f"split fractions must each lie in (0, 1), got {fractions}")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fractions)}")
        object.__setattr__(self, "stratify_by", tuple(self.stratify_by))
        unknown = set(self.stratify_by) - {"diagnosis", "hy_stage", "sex"}
        if unknown:
            raise ValueError(f"cannot stratify by {sorted(unknown)}")

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_fraction, self.val_fraction, self.test_fraction)


def _parse_row(row: dict[str, str], lineno: int) -> SubjectRecord:
    try:
        stage_text = (row["hy_stage"] or "").strip()
        return SubjectRecord(
            subject_id=row["subject_id"].strip(),
            age=float(row["age"]),
            sex=Sex(row["sex"].strip()),
            diagnosis=Diagnosis(row["diagnosis"].strip()),
            hy_stage=int(stage_text) if stage_text else None,
            site=row["site"].strip(),
            volume_ref=row["volume_ref"].strip(),
        )
    except (ValueError, KeyError, TypeError) as exc:
        ident = (row.get("subject_id") or "").strip() or "?"
        raise ManifestError(f"row {lineno} (subject_id={ident}): {exc}") from None


def load_manifest(
    path: str | Path,
    canonical_shape: Sequence[int] | None = None,
    check_volumes: bool = True,
) -> CohortManifest:
    """Read and validate a manifest CSV.

    Volume references are resolved relative to the manifest's directory. When
    ``check_volumes`` is set, every referenced volume header is read and its
    shape compared against ``canonical_shape`` (or the first volume's shape
    when none is given).
    """
    from .preprocessing import read_volume_header

    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise ManifestError(
                f"{path}: header must be {','.join(MANIFEST_COLUMNS)}, got {reader.fieldnames}"
            )
        records = []
        seen: dict[str, int] = {}
        for lineno, row in enumerate(reader, start=2):
            rec = _parse_row(row, lineno)
            if rec.subject_id in seen:
                raise ManifestError(
                    f"row {lineno}: duplicate subject_id {rec.subject_id!r} (first seen on row {seen[rec.subject_id]})"
                )
            seen[rec.subject_id] = lineno
            records.append(rec)

    root = path.parent
    shape = tuple(canonical_shape) if canonical_shape is not None else None
    if check_volumes:
        for lineno, rec in enumerate(records, start=2):
            vpath = Path(rec.volume_ref) if Path(rec.volume_ref).is_absolute() else root / rec.volume_ref
            try:
                header = read_volume_header(vpath)
            except (OSError, ValueError) as exc:
                raise ManifestError(
                    f"row {lineno} (subject_id={rec.subject_id}): unreadable volume {rec.volume_ref}: {exc}"
                ) from None
            if shape is None:
                shape = header.shape
            elif header.shape != shape:
                raise ManifestError(
                    f"row {lineno} (subject_id={rec.subject_id}): volume shape {header.shape} != canonical {shape}"
                )
    if shape is None:
        raise ManifestError(f"{path}: cannot infer canonical shape without volumes")
    return CohortManifest(name=path.stem, records=tuple(records), canonical_shape=shape, root=root)


def write_manifest(manifest: CohortManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            writer.writerow([
                r.subject_id,
                repr(float(r.age)),
                r.sex.value,
                r.diagnosis.value,
                "" if r.hy_stage is None else r.hy_stage,
                r.site,
                r.volume_ref,
            ])
    return path


def apportion(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier split."""
    exact = [Fraction(f).limit_denominator(10**9) for f in fractions]
    total = sum(exact)
    quotas = [n * f / total for f in exact]
    counts = [math.floor(q) for q in quotas]
    leftover = n - sum(counts)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def _stratum_key(rec: SubjectRecord, keys: Sequence[str]) -> tuple:
    values = {"diagnosis": rec.diagnosis.value, "hy_stage": rec.hy_stage, "sex": rec.sex.value}
    return tuple((k, values[k]) for k in keys)


def split_manifest(
    manifest: CohortManifest, spec: SplitSpec = SplitSpec()
) -> tuple[CohortManifest, CohortManifest, CohortManifest]:
    """Split into train/val/test, stratified per ``spec.stratify_by``.

    Each stratum is sorted by subject_id, shuffled with a seeded RNG and cut
    according to :func:`apportion`, so the result depends only on the set of
    records and the spec.
    """
    if not manifest.records:
        raise ValueError("cannot split an empty manifest")
    strata: dict[tuple, list[SubjectRecord]] = defaultdict(list)
    for rec in manifest.records:
        strata[_stratum_key(rec, spec.stratify_by)].append(rec)

    parts: list[list[SubjectRecord]] = [[], [], []]
    rng = random.Random(spec.seed)
    for key in sorted(strata, key=repr):
        members = sorted(strata[key], key=lambda r: r.subject_id)
        if len(members) < 3:
            warnings.warn(
                f"stratum {dict(key)} has {len(members)} records, fewer than 3 splits",
                stacklevel=2,
            )
        rng.shuffle(members)
        counts = apportion(len(members), spec.fractions)
        start = 0
        for part, count in zip(parts, counts):
            part.extend(members[start:start + count])
            start += count

    names = ("train", "val", "test")
    return tuple(
        replace(manifest, name=f"{manifest.name}_{n}", records=tuple(sorted(p, key=lambda r: r.subject_id)))
        for n, p in zip(names, parts)
    )
