"""Procedural paired satellite/radar scenes.

Radar is a sum of anisotropic Gaussian storm cells over a smoothed-noise
background. The three infrared channels are progressively blurrier, linearly
cooled copies of the radar field plus sensor noise, so contours are
recoverable from the satellite stack but fine structure is only partly so.
The lightning channel fires (with probability 1/2) where blurred radar
exceeds a threshold.

All randomness comes from a Philox-4x64 stream keyed by the scene seed, drawn
in a fixed order, so scenes are reproducible bit-for-bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DiffSRError, ShapeError
from .field import SATELLITE_CHANNELS, Field, Scene, Units, read_field, write_field
from .substrate import philox

BT_RANGE = (180.0, 320.0)


@dataclass(frozen=True)
class StormParams:
    n_cells: tuple = (1, 12)
    cell_amp: tuple = (20.0, 55.0)
    cell_sigma: tuple = (2.0, 12.0)
    background_level: tuple = (0.0, 12.0)
    background_smoothing: float = 4.0
    bt_slope: float = -1.5
    bt_base: float = 280.0
    channel_blur: tuple = (1.0, 2.0, 4.0)
    channel_slope_scale: tuple = (1.0, 0.8, 0.6)
    noise_sd: tuple = (0.5, 0.5, 0.5, 0.0)
    lightning_threshold: float = 40.0
    lightning_blur: float = 2.0
    flash_scale: float = 5.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.n_cells
        if not 1 <= lo <= hi <= 12:
            raise ValueError("n_cells range must lie within [1, 12]")
        for name, (bound_lo, bound_hi) in {"cell_amp": (20, 55), "cell_sigma": (2, 12),
                                           "background_level": (0, 12)}.items():
            lo, hi = getattr(self, name)
            if not bound_lo <= lo <= hi <= bound_hi:
                raise ValueError(f"{name} range must lie within [{bound_lo}, {bound_hi}]")
        b = self.channel_blur
        if len(b) != 3 or not (b[0] < b[1] < b[2]):
            raise ValueError("channel_blur must be three strictly increasing sigmas")
        if len(set(self.channel_slope_scale)) != 3:
            raise ValueError("channel slopes must be distinct")
        if len(self.noise_sd) != len(SATELLITE_CHANNELS):
            raise ValueError("noise_sd needs one entry per satellite channel")


def _cells(rng, params: StormParams, rows: int, cols: int, n: int) -> np.ndarray:
    rr, cc = np.mgrid[0:rows, 0:cols].astype(np.float64)
    out = np.zeros((rows, cols))
    for _ in range(n):
        cy, cx = rng.uniform(0, rows), rng.uniform(0, cols)
        amp = rng.uniform(*params.cell_amp)
        sy, sx = rng.uniform(*params.cell_sigma, size=2)
        theta = rng.uniform(0, np.pi)
        dy, dx = rr - cy, cc - cx
        u = np.cos(theta) * dx + np.sin(theta) * dy
        v = -np.sin(theta) * dx + np.cos(theta) * dy
        out += amp * np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
    return out


def gen_scene(params: StormParams, rows: int, cols: int, n_cells: int | None = None,
              scene_id: str | None = None) -> Scene:
    if rows < 32 or cols < 32:
        raise ShapeError(f"scenes must be at least 32x32, got {rows}x{cols}")
    rng = philox(params.seed)
    n = int(rng.integers(params.n_cells[0], params.n_cells[1] + 1))
    if n_cells is not None:
        n = n_cells
    storms = _cells(rng, params, rows, cols, n)
    level = rng.uniform(*params.background_level)
    bg = gaussian_filter(rng.standard_normal((rows, cols)), params.background_smoothing, mode="wrap")
    span = bg.max() - bg.min()
    bg = level * (bg - bg.min()) / span if span > 0 else np.zeros_like(bg)
    radar = np.clip(storms + bg, 0.0, 60.0)

    channels = []
    for k in range(3):
        blurred = gaussian_filter(radar, params.channel_blur[k], mode="nearest")
        slope = params.bt_slope * params.channel_slope_scale[k]
        bt = params.bt_base + slope * blurred + params.noise_sd[k] * rng.standard_normal((rows, cols))
        channels.append(Field(np.clip(bt, *BT_RANGE), Units.BRIGHTNESS_K))
    active = gaussian_filter(radar, params.lightning_blur, mode="nearest") > params.lightning_threshold
    flashes = active & (rng.random((rows, cols)) < 0.5)
    glm = params.flash_scale * flashes + params.noise_sd[3] * rng.standard_normal((rows, cols))
    channels.append(Field(np.clip(glm, 0.0, None), Units.FLASH_DENSITY))
    return Scene(tuple(channels), Field(radar, Units.DBZ), scene_id or f"scene{params.seed:06d}")


def gen_dataset(n: int, rows: int, cols: int, master_seed: int, params: StormParams = StormParams(),
                out_dir=None) -> list[Scene]:
    """Scene ``i`` uses seed ``master_seed + i``. Writes RGF files and a
    manifest when ``out_dir`` is given."""
    if n < 1:
        raise ValueError("n must be >= 1")
    scenes = [
        gen_scene(StormParams(**{**params.__dict__, "seed": master_seed + i}), rows, cols)
        for i in range(n)
    ]
    if out_dir is not None:
        write_scenes(scenes, out_dir)
    return scenes


# --- manifests --------------------------------------------------------------

MANIFEST = "manifest.json"


class ManifestError(DiffSRError):
    pass


def _atomic_write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def write_scenes(scenes, out_dir) -> Path:
    """One RGF per field plus ``manifest.json``, written last."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for s in scenes:
            sat_paths = []
            for name, f in zip(SATELLITE_CHANNELS, s.satellite):
                fn = f"{s.timestamp}_{name}.rgf"
                write_field(f, out / fn)
                sat_paths.append(fn)
            write_field(s.radar, out / f"{s.timestamp}_radar.rgf")
            entries.append({"id": s.timestamp, "radar": f"{s.timestamp}_radar.rgf", "satellite": sat_paths})
        path = out / MANIFEST
        _atomic_write_json(path, {"scenes": entries})
    except OSError as exc:
        raise ManifestError(f"cannot write dataset under {out}: {exc}") from exc
    return path


def write_prediction_manifest(fields: dict, out_dir, suffix: str = "pred") -> Path:
    """Manifest for radar-only fields keyed by scene id."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for sid, f in fields.items():
        fn = f"{sid}_{suffix}.rgf"
        write_field(f, out / fn)
        entries.append({"id": sid, "radar": fn})
    path = out / MANIFEST
    _atomic_write_json(path, {"scenes": entries})
    return path


def read_manifest(path) -> list[dict]:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
        entries = data["scenes"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    out = []
    for e in entries:
        item = {"id": e["id"], "radar": base / e["radar"]}
        if "satellite" in e:
            item["satellite"] = [base / p for p in e["satellite"]]
        out.append(item)
    return out


def load_scenes(path) -> list[Scene]:
    scenes = []
    for e in read_manifest(path):
        if "satellite" not in e:
            raise ManifestError(f"{path}: entry {e['id']} has no satellite channels")
        scenes.append(Scene(tuple(read_field(p) for p in e["satellite"]), read_field(e["radar"]), e["id"]))
    return scenes


def load_radar(path) -> dict[str, Field]:
    return {e["id"]: read_field(e["radar"]) for e in read_manifest(path)}
