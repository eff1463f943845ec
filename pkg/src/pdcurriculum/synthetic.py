"""Synthetic cohorts with stage-graded signal and known ground truth.

Each volume is Gaussian background noise plus a site offset. Patients get an
additive intensity bump inside an axis-aligned box whose height grows with
H&Y stage. Sex is encoded as a signed intensity ramp along the first axis,
which survives per-image standardization (a flat offset or scale would not).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_model import CohortManifest, Diagnosis, Sex, SubjectRecord, write_manifest
from .preprocessing import DESK_SHAPE, Volume, write_volume

OOD_SEED_STRIDE = 7919


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by center and half-extents, in voxels.

    Covers ``center - half`` up to but excluding ``center + half`` on each axis.
    """

    center: tuple[int, int, int]
    half_extents: tuple[int, int, int]

    @property
    def lo(self) -> tuple[int, int, int]:
        return tuple(c - h for c, h in zip(self.center, self.half_extents))

    @property
    def hi(self) -> tuple[int, int, int]:
        return tuple(c + h for c, h in zip(self.center, self.half_extents))

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))

    def inside(self, shape: Sequence[int]) -> bool:
        return all(0 <= a < b <= n for a, b, n in zip(self.lo, self.hi, shape))

    def mask(self, shape: Sequence[int]) -> np.ndarray:
        m = np.zeros(tuple(shape), dtype=bool)
        m[self.slices] = True
        return m


@dataclass(frozen=True)
class SyntheticConfig:
    shape: tuple[int, int, int] = DESK_SHAPE
    n_controls: int = 60
    # counts and effect sizes for H&Y stages 1, 2, 3, 4
    n_per_stage: tuple[int, int, int, int] = (15, 15, 15, 15)
    effect_sizes: tuple[float, float, float, float] = (0.3, 0.6, 0.9, 1.2)
    signal_center: tuple[int, int, int] | None = None
    signal_half_extents: tuple[int, int, int] = (4, 4, 4)
    noise_sd: float = 1.0
    site_offset: float = 0.0
    age_range: tuple[float, float] = (40.0, 80.0)
    sex_signal_scale: float = 0.5
    seed: int = 0
    site: str = "synthetic"
    id_prefix: str = "sub"
    voxel_size_mm: float = 2.0

    def __post_init__(self):
        for name in ("shape", "n_per_stage", "effect_sizes", "signal_half_extents", "age_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.signal_center is not None:
            object.__setattr__(self, "signal_center", tuple(self.signal_center))
        if len(self.shape) != 3 or any(s <= 0 for s in self.shape):
            raise ValueError(f"shape must be three positive ints, got {self.shape}")
        if len(self.n_per_stage) != 4 or len(self.effect_sizes) != 4:
            raise ValueError("n_per_stage and effect_sizes need one entry per stage 1..4")
        if self.n_controls < 0 or any(n < 0 for n in self.n_per_stage):
            raise ValueError("counts must be non-negative")
        if self.n_controls + sum(self.n_per_stage) == 0:
            raise ValueError("all group counts are zero")
        if any(b < a for a, b in zip(self.effect_sizes, self.effect_sizes[1:])):
            raise ValueError(f"effect_sizes must not decrease with stage, got {self.effect_sizes}")
        if not self.noise_sd > 0:
            raise ValueError("noise_sd must be positive")
        lo, hi = self.age_range
        if not 0 < lo <= hi < 120:
            raise ValueError(f"age_range must lie within (0, 120), got {self.age_range}")
        if not self.signal_region.inside(self.shape):
            raise ValueError(f"signal region {self.signal_region} does not fit in {self.shape}")

    @property
    def signal_region(self) -> Box:
        center = self.signal_center or tuple(s // 2 for s in self.shape)
        return Box(center, self.signal_half_extents)

    @property
    def n_subjects(self) -> int:
        return self.n_controls + sum(self.n_per_stage)


@dataclass(frozen=True)
class SubjectTruth:
    diagnosis: Diagnosis
    stage: int | None
    age: float
    sex: Sex
    box: Box | None

    def mask(self, shape: Sequence[int]) -> np.ndarray:
        if self.box is None:
            return np.zeros(tuple(shape), dtype=bool)
        return self.box.mask(shape)


@dataclass
class GroundTruth:
    shape: tuple[int, int, int]
    subjects: dict[str, SubjectTruth] = field(default_factory=dict)

    def __getitem__(self, subject_id: str) -> SubjectTruth:
        return self.subjects[subject_id]

    def mask(self, subject_id: str) -> np.ndarray:
        return self.subjects[subject_id].mask(self.shape)

    def to_json(self) -> dict:
        return {
            sid: {
                "stage": t.stage,
                "mask_box": None if t.box is None else {"lo": list(t.box.lo), "hi": list(t.box.hi)},
            }
            for sid, t in self.subjects.items()
        }

    def merge(self, other: "GroundTruth") -> "GroundTruth":
        return GroundTruth(self.shape, {**self.subjects, **other.subjects})


def _sex_pattern(shape: Sequence[int]) -> np.ndarray:
    ramp = np.linspace(-1.0, 1.0, shape[0])
    return np.broadcast_to(ramp[:, None, None], tuple(shape))


def _group_plan(config: SyntheticConfig) -> list[int | None]:
    groups: list[int | None] = [None] * config.n_controls
    for stage, count in zip((1, 2, 3, 4), config.n_per_stage):
        groups.extend([stage] * count)
    return groups


def synthesize_subject(config: SyntheticConfig, index: int, stage: int | None):
    """Volume and metadata for subject ``index``; depends only on (seed, index)."""
    rng = np.random.default_rng([config.seed, index])
    sex = Sex.MALE if rng.random() < 0.5 else Sex.FEMALE
    age = float(rng.uniform(*config.age_range))
    data = rng.normal(0.0, config.noise_sd, size=config.shape)
    data += config.site_offset
    sign = 1.0 if sex is Sex.MALE else -1.0
    data += 0.5 * sign * config.sex_signal_scale * _sex_pattern(config.shape)
    box = None
    if stage is not None:
        box = config.signal_region
        data[box.slices] += config.effect_sizes[stage - 1]
    return data.astype(np.float32), age, sex, box


def generate_cohort(config: SyntheticConfig) -> tuple[CohortManifest, GroundTruth]:
    """Generate a cohort in memory.

    The returned manifest embeds its volumes (``manifest.embedded``) keyed by
    ``volume_ref``; :func:`write_cohort` puts them on disk.
    """
    records = []
    volumes = {}
    truth = GroundTruth(config.shape)
    for index, stage in enumerate(_group_plan(config)):
        data, age, sex, box = synthesize_subject(config, index, stage)
        sid = f"{config.id_prefix}{index:04d}"
        dx = Diagnosis.CONTROL if stage is None else Diagnosis.PATIENT
        ref = f"volumes/{sid}.f32"
        records.append(SubjectRecord(sid, round(age, 2), sex, dx, stage, config.site, ref))
        volumes[ref] = data
        truth.subjects[sid] = SubjectTruth(dx, stage, round(age, 2), sex, box)
    manifest = CohortManifest(config.id_prefix, tuple(records), config.shape, embedded=volumes)
    return manifest, truth


def generate_ood_cohort(
    config: SyntheticConfig, offset: float, seed: int | None = None
) -> tuple[CohortManifest, GroundTruth]:
    """Domain-shifted cohort: same design, intensity offset ``offset`` and a fresh seed.

    Passing ``seed=config.seed`` reproduces :func:`generate_cohort` apart from
    the offset.
    """
    if seed is None:
        seed = config.seed + OOD_SEED_STRIDE
    return generate_cohort(replace(config, site_offset=offset, seed=seed))


def write_cohort(manifest: CohortManifest, truth: GroundTruth | None, directory: str | Path,
                 name: str | None = None) -> Path:
    """Write volumes, ``<name>.csv`` and ``<name>_truth.json`` under ``directory``."""
    directory = Path(directory)
    name = name or manifest.name
    for rec in manifest.records:
        write_volume(manifest.load_volume(rec), directory / rec.volume_ref)
    path = write_manifest(manifest, directory / f"{name}.csv")
    if truth is not None:
        subset = {sid: truth.to_json()[sid] for sid in manifest.subject_ids}
        (directory / f"{name}_truth.json").write_text(json.dumps(subset, indent=1, sort_keys=True) + "\n")
    return path


def load_ground_truth(path: str | Path, shape: Sequence[int]) -> dict[str, np.ndarray | None]:
    """Read a ground-truth sidecar into ``subject_id -> boolean mask`` (None for controls)."""
    raw = json.loads(Path(path).read_text())
    masks = {}
    for sid, entry in raw.items():
        box = entry["mask_box"]
        if box is None:
            masks[sid] = None
            continue
        m = np.zeros(tuple(shape), dtype=bool)
        m[tuple(slice(a, b) for a, b in zip(box["lo"], box["hi"]))] = True
        masks[sid] = m
    return masks


def config_to_json(config: SyntheticConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()}
