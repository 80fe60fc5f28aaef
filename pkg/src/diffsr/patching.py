"""Sliding-window patch extraction, exceedance filtering and reassembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoverageError, PatchError
from .field import Field, Scene, Units


@dataclass(frozen=True)
class Patch:
    scene_id: str
    row0: int
    col0: int
    size: int
    satellite: tuple[Field, ...]
    radar: Field

    @property
    def patch_id(self) -> str:
        return f"{self.scene_id}_r{self.row0:04d}_c{self.col0:04d}"


@dataclass(frozen=True)
class FilterPolicy:
    """Keep a patch only if at least ``gamma`` valid pixels exceed ``value_threshold`` dBZ."""

    gamma: int = 1000
    value_threshold: float = 6.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not np.isfinite(self.value_threshold):
            raise ValueError("value_threshold must be finite")


def patch_offsets(rows: int, cols: int, size: int, stride: int) -> list[tuple[int, int]]:
    if stride < 1:
        raise PatchError(f"stride must be >= 1, got {stride}")
    if size < 1 or size > min(rows, cols):
        raise PatchError(f"patch size {size} does not fit a {rows}x{cols} image")
    return [
        (r, c)
        for r in range(0, rows - size + 1, stride)
        for c in range(0, cols - size + 1, stride)
    ]


def patchify(scene: Scene, size: int, stride: int) -> list[Patch]:
    rows, cols = scene.shape
    return [
        Patch(
            scene_id=scene.timestamp,
            row0=r,
            col0=c,
            size=size,
            satellite=tuple(f.crop(r, c, size) for f in scene.satellite),
            radar=scene.radar.crop(r, c, size),
        )
        for r, c in patch_offsets(rows, cols, size, stride)
    ]


def exceedance_count(radar: Field, value_threshold: float) -> int:
    return int(np.count_nonzero((radar.values > value_threshold) & radar.mask))


def filter_patches(patches, policy: FilterPolicy = FilterPolicy()) -> list[Patch]:
    return [p for p in patches if exceedance_count(p.radar, policy.value_threshold) >= policy.gamma]


def depatchify(patches, rows: int, cols: int, units: Units | None = None) -> Field:
    """Reassemble patch radar crops onto a ``rows x cols`` grid.

    Any object with ``row0``, ``col0`` and a ``radar`` Field works as a patch.
    Overlaps are averaged with uniform weights; a pixel is valid in the
    output if any covering patch marks it valid.
    """
    patches = list(patches)
    if not patches:
        raise CoverageError("no patches to reassemble")
    acc = np.zeros((rows, cols), dtype=np.float64)
    weight = np.zeros((rows, cols), dtype=np.float64)
    covered = np.zeros((rows, cols), dtype=bool)
    valid = np.zeros((rows, cols), dtype=bool)
    for p in patches:
        f = p.radar
        h, w = f.shape
        if p.row0 < 0 or p.col0 < 0 or p.row0 + h > rows or p.col0 + w > cols:
            raise PatchError(f"patch at ({p.row0}, {p.col0}) falls outside a {rows}x{cols} grid")
        sl = (slice(p.row0, p.row0 + h), slice(p.col0, p.col0 + w))
        acc[sl] += np.where(f.mask, f.values, 0.0)
        weight[sl] += f.mask
        covered[sl] = True
        valid[sl] |= f.mask
        units = units or f.units
    if not covered.all():
        r, c = np.argwhere(~covered)[0]
        raise CoverageError(f"pixel ({r}, {c}) is not covered by any patch")
    out = np.divide(acc, weight, out=np.zeros_like(acc), where=weight > 0)
    return Field(out, units, valid)
