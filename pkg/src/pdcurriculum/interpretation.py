"""Occlusion sensitivity heatmaps and slice overlays."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .model import MultiTaskModel
from .preprocessing import Volume, check_shape, write_volume


class EdgeMode(str, Enum):
    CLAMP_EXTRA_POSITION = "clamp_extra_position"
    INTERIOR_ONLY = "interior_only"


@dataclass(frozen=True)
class OcclusionConfig:
    patch_size: int = 16
    stride: int = 4
    fill_value: float = 0.0
    edge_mode: EdgeMode = EdgeMode.CLAMP_EXTRA_POSITION
    batch_size: int = 16

    def __post_init__(self):
        object.__setattr__(self, "edge_mode", EdgeMode(self.edge_mode))
        if not 1 <= self.stride <= self.patch_size:
            raise ValueError(f"need 1 <= stride <= patch_size, got stride={self.stride}, patch={self.patch_size}")

    def validate_for(self, shape) -> None:
        if self.patch_size > min(shape):
            raise ValueError(f"patch_size {self.patch_size} exceeds smallest axis of {tuple(shape)}")


def occlusion_positions(axis_len: int, patch: int, stride: int,
                        edge_mode: EdgeMode | str = EdgeMode.CLAMP_EXTRA_POSITION) -> list[int]:
    """Patch start offsets along one axis."""
    if patch > axis_len:
        raise ValueError(f"patch {patch} longer than axis {axis_len}")
    if not 1 <= stride <= patch:
        raise ValueError(f"need 1 <= stride <= patch, got {stride}")
    offsets = list(range(0, axis_len - patch + 1, stride))
    last = axis_len - patch
    if EdgeMode(edge_mode) is EdgeMode.CLAMP_EXTRA_POSITION and offsets[-1] != last:
        offsets.append(last)
    return offsets


def coverage_counts(shape, config: OcclusionConfig) -> np.ndarray:
    """How many patch placements cover each voxel."""
    per_axis = []
    for n in shape:
        c = np.zeros(n, dtype=np.int64)
        for start in occlusion_positions(n, config.patch_size, config.stride, config.edge_mode):
            c[start:start + config.patch_size] += 1
        per_axis.append(c)
    return per_axis[0][:, None, None] * per_axis[1][None, :, None] * per_axis[2][None, None, :]


def _probability_fn(model) -> Callable[[torch.Tensor], torch.Tensor]:
    if isinstance(model, MultiTaskModel):
        return model.dx_probability
    return lambda x: torch.as_tensor(model(x)).reshape(-1)


@torch.no_grad()
def occlusion_sensitivity(model, volume: Volume | np.ndarray, config: OcclusionConfig = OcclusionConfig()) -> np.ndarray:
    """Coverage-normalized drop in patient probability when each region is occluded.

    ``model`` is a :class:`MultiTaskModel` or any callable mapping a batch of
    shape (B, 1, X, Y, Z) to patient probabilities. Positive values mark
    regions whose occlusion lowers the patient probability.
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float32)
    if isinstance(model, MultiTaskModel):
        check_shape(data, model.config.input_shape)
        model.eval()
        dtype = next(model.parameters()).dtype
    else:
        dtype = torch.float32
    config.validate_for(data.shape)
    prob = _probability_fn(model)
    base = torch.from_numpy(np.ascontiguousarray(data)).to(dtype)[None, None]
    p0 = float(prob(base)[0])

    p = config.patch_size
    axes = [occlusion_positions(n, p, config.stride, config.edge_mode) for n in data.shape]
    corners = list(itertools.product(*axes))
    total = np.zeros(data.shape, dtype=np.float64)
    count = np.zeros(data.shape, dtype=np.int64)
    for start in range(0, len(corners), config.batch_size):
        chunk = corners[start:start + config.batch_size]
        batch = base.repeat(len(chunk), 1, 1, 1, 1)
        for i, (a, b, c) in enumerate(chunk):
            batch[i, 0, a:a + p, b:b + p, c:c + p] = config.fill_value
        deltas = p0 - prob(batch).double().numpy()
        for (a, b, c), d in zip(chunk, deltas):
            total[a:a + p, b:b + p, c:c + p] += d
            count[a:a + p, b:b + p, c:c + p] += 1
    heat = np.zeros_like(total)
    covered = count > 0
    heat[covered] = total[covered] / count[covered]
    return heat


def _render_slice(image: np.ndarray) -> np.ndarray:
    lo, hi = float(image.min()), float(image.max())
    scale = (image - lo) / (hi - lo) if hi > lo else np.zeros_like(image)
    return np.repeat(scale[..., None], 3, axis=-1)


def overlay_slice(image: np.ndarray, heat: np.ndarray, heat_max: float, max_alpha: float = 0.6) -> np.ndarray:
    """RGB uint8 render of ``image`` with positive heat alpha-blended on top in the 'hot' colormap."""
    from matplotlib import colormaps

    base = _render_slice(image)
    if heat_max > 0:
        level = np.clip(heat / heat_max, 0.0, 1.0)
        color = colormaps["hot"](level)[..., :3]
        alpha = (max_alpha * level)[..., None]
        base = (1 - alpha) * base + alpha * color
    return np.round(base * 255).astype(np.uint8)


def mid_slices(array: np.ndarray) -> dict[str, np.ndarray]:
    x, y, z = (n // 2 for n in array.shape)
    return {"sagittal": array[x, :, :], "coronal": array[:, y, :], "axial": array[:, :, z]}


def export_overlay(heatmap: np.ndarray, volume: Volume | np.ndarray, path: str | Path) -> dict[str, Path]:
    """Write the heatmap volume and three mid-plane overlay PNGs.

    ``path`` is a file stem: ``<stem>.f32`` (+ ``.json`` sidecar) holds the raw
    heatmap and ``<stem>_<plane>.png`` the overlays.
    """
    from PIL import Image

    data = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float32)
    check_shape(heatmap, data.shape)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    written = {"heatmap": write_volume(Volume(heatmap.astype(np.float32)), path.with_suffix(".f32"))}
    heat_max = float(max(heatmap.max(), 0.0))
    heat_slices = mid_slices(heatmap)
    for plane, image in mid_slices(data).items():
        rgb = overlay_slice(image, heat_slices[plane], heat_max)
        out = path.with_name(f"{path.name}_{plane}.png")
        Image.fromarray(rgb).save(out)
        written[plane] = out
    return written
