"""Volume container, on-disk volume format, and per-image standardization.

A volume on disk is a raw little-endian float32 file in C order plus a JSON
sidecar next to it (same stem, ``.json``)::

    {"shape": [32, 38, 32], "voxel_size_mm": 2.0, "dtype": "f32le", "order": "C"}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

CANONICAL_SHAPE = (91, 109, 91)
DESK_SHAPE = (32, 38, 32)
VOLUME_DTYPE = "f32le"


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class VolumeHeader:
    shape: tuple[int, int, int]
    voxel_size_mm: float = 2.0
    dtype: str = VOLUME_DTYPE
    order: str = "C"

    def to_json(self) -> dict:
        return {"shape": list(self.shape), "voxel_size_mm": self.voxel_size_mm, "dtype": self.dtype, "order": self.order}


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    voxel_size_mm: float = 2.0

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ShapeError(f"volume must be 3D, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("volume contains non-finite values")
        if self.voxel_size_mm <= 0:
            raise ValueError("voxel_size_mm must be positive")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def read_volume_header(path: str | Path) -> VolumeHeader:
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    if meta.get("dtype") != VOLUME_DTYPE or meta.get("order") != "C":
        raise ValueError(f"{path}: unsupported dtype/order {meta.get('dtype')}/{meta.get('order')}")
    header = VolumeHeader(tuple(int(s) for s in meta["shape"]), float(meta.get("voxel_size_mm", 2.0)))
    expected = 4 * int(np.prod(header.shape))
    actual = path.stat().st_size
    if actual != expected:
        raise ValueError(f"{path}: {actual} bytes on disk, header implies {expected}")
    return header


def read_volume(path: str | Path) -> Volume:
    header = read_volume_header(path)
    data = np.fromfile(path, dtype="<f4").reshape(header.shape)
    return Volume(data, header.voxel_size_mm)


def write_volume(volume: Volume, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    volume.data.astype("<f4", copy=False).tofile(path)
    header = VolumeHeader(volume.shape, volume.voxel_size_mm)
    sidecar_path(path).write_text(json.dumps(header.to_json()) + "\n")
    return path


def z_transform(volume: Volume) -> Volume:
    """Standardize a volume to mean 0 and SD 1 over all of its voxels.

    Statistics are accumulated in float64; the SD uses the population (n)
    convention so the result satisfies ``data.std() == 1``.
    """
    data = volume.data.astype(np.float64)
    mean = data.mean()
    sd = data.std()
    if not sd > 0 or not np.isfinite(sd):
        raise ValueError("cannot z-transform a constant volume (SD = 0)")
    return Volume(((data - mean) / sd).astype(np.float32), volume.voxel_size_mm)


def check_shape(volume: Volume | np.ndarray, canonical: Sequence[int]) -> None:
    shape = tuple(volume.shape)
    canonical = tuple(int(s) for s in canonical)
    if shape != canonical:
        raise ShapeError(f"volume shape {shape} does not match canonical shape {canonical}")
