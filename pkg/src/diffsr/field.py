"""Gridded scalar fields, scenes, normalization and the RGF file format.

RGF layout: one UTF-8 JSON header line terminated by ``\\n``, then
``rows * cols`` little-endian float32 values in row-major order, then (only
when the header says ``"mask": true``) the validity mask packed with
``numpy.packbits`` in row-major order.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DtypeMismatchError, FormatError, ShapeError, UnitsError

DBZ_MIN = 0.0
DBZ_MAX = 60.0

SATELLITE_CHANNELS = ("ABI-C07", "ABI-C09", "ABI-C13", "GLM")


class Units(str, enum.Enum):
    DBZ = "dBZ"
    BRIGHTNESS_K = "brightness-temperature-K"
    FLASH_DENSITY = "flash-density"
    NORMALIZED = "normalized"


@dataclass(frozen=True, eq=False)
class Field:
    """A single-variable 2-D grid. Values are stored as float32 and frozen."""

    values: np.ndarray
    units: Units
    mask: np.ndarray | None = None

    def __post_init__(self):
        units = Units(self.units)
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ShapeError(f"field values must be a non-empty 2-D grid, got shape {values.shape}")
        if self.mask is None:
            mask = np.ones(values.shape, dtype=bool)
        else:
            mask = np.array(self.mask, dtype=bool, copy=True)
            if mask.shape != values.shape:
                raise ShapeError(f"mask shape {mask.shape} != values shape {values.shape}")
        if units is Units.DBZ:
            with np.errstate(invalid="ignore"):
                values = np.where(mask, np.clip(values, DBZ_MIN, DBZ_MAX), values)
        values = values.astype(np.float32)
        if not np.all(np.isfinite(values[mask])):
            raise ValueError("field values must be finite wherever the mask is valid")
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "units", units)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, Field):
            return NotImplemented
        return (
            self.units is other.units
            and self.shape == other.shape
            and self.values.tobytes() == other.values.tobytes()
            and np.array_equal(self.mask, other.mask)
        )

    def crop(self, row0: int, col0: int, size: int) -> "Field":
        sl = (slice(row0, row0 + size), slice(col0, col0 + size))
        return Field(self.values[sl], self.units, self.mask[sl])


@dataclass(frozen=True)
class Scene:
    """Aligned satellite channel stack and radar truth for one timestamp."""

    satellite: tuple[Field, ...]
    radar: Field
    timestamp: str

    def __post_init__(self):
        sat = tuple(self.satellite)
        if len(sat) != len(SATELLITE_CHANNELS):
            raise ShapeError(f"expected {len(SATELLITE_CHANNELS)} satellite channels, got {len(sat)}")
        if self.radar.units is not Units.DBZ:
            raise UnitsError("scene radar must be in dBZ")
        for f in sat:
            if f.shape != self.radar.shape:
                raise ShapeError("satellite and radar fields must share a shape")
            if not np.array_equal(f.mask, self.radar.mask):
                raise ShapeError("satellite and radar fields must share a mask")
        object.__setattr__(self, "satellite", sat)

    @property
    def shape(self) -> tuple[int, int]:
        return self.radar.shape

    def satellite_stack(self) -> np.ndarray:
        return np.stack([f.values for f in self.satellite])


@dataclass(frozen=True)
class NormSpec:
    """Maps physical units to model space.

    Reflectivity uses a fixed linear map of ``[dbz_min, dbz_max]`` onto
    ``[model_lo, model_hi]``; each satellite channel uses ``(v - offset) / scale``.
    """

    dbz_min: float = DBZ_MIN
    dbz_max: float = DBZ_MAX
    model_lo: float = -1.0
    model_hi: float = 1.0
    sat_offset: tuple[float, ...] = (250.0, 250.0, 250.0, 2.5)
    sat_scale: tuple[float, ...] = (70.0, 70.0, 70.0, 2.5)

    def __post_init__(self):
        if not self.dbz_max > self.dbz_min:
            raise ValueError("dbz_max must exceed dbz_min")
        if not self.model_hi > self.model_lo:
            raise ValueError("model_hi must exceed model_lo")
        object.__setattr__(self, "sat_offset", tuple(float(v) for v in self.sat_offset))
        object.__setattr__(self, "sat_scale", tuple(float(v) for v in self.sat_scale))
        if len(self.sat_offset) != len(self.sat_scale):
            raise ValueError("sat_offset and sat_scale lengths differ")
        if any(s == 0 for s in self.sat_scale):
            raise ValueError("satellite scales must be nonzero")

    @classmethod
    def from_scenes(cls, scenes, **kwargs) -> "NormSpec":
        """Per-channel min/max of the given scenes mapped onto [-1, 1]."""
        offsets, scales = [], []
        for k in range(len(SATELLITE_CHANNELS)):
            vals = np.concatenate([s.satellite[k].values[s.satellite[k].mask].ravel() for s in scenes])
            lo, hi = float(vals.min()), float(vals.max())
            offsets.append((hi + lo) / 2)
            scales.append((hi - lo) / 2 if hi > lo else 1.0)
        return cls(sat_offset=tuple(offsets), sat_scale=tuple(scales), **kwargs)

    def to_dict(self) -> dict:
        return {
            "dbz_min": self.dbz_min,
            "dbz_max": self.dbz_max,
            "model_lo": self.model_lo,
            "model_hi": self.model_hi,
            "sat_offset": list(self.sat_offset),
            "sat_scale": list(self.sat_scale),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    # array-level maps, used by the training code
    def refl_to_model(self, dbz):
        span = self.model_hi - self.model_lo
        clipped = np.clip(dbz, self.dbz_min, self.dbz_max)
        return self.model_lo + (clipped - self.dbz_min) / (self.dbz_max - self.dbz_min) * span

    def model_to_refl(self, v):
        span = self.model_hi - self.model_lo
        out = self.dbz_min + (v - self.model_lo) / span * (self.dbz_max - self.dbz_min)
        return np.clip(out, self.dbz_min, self.dbz_max)

    def sat_to_model(self, stack: np.ndarray) -> np.ndarray:
        off = np.asarray(self.sat_offset).reshape(-1, 1, 1)
        scale = np.asarray(self.sat_scale).reshape(-1, 1, 1)
        return (stack - off) / scale


def normalize_refl(f: Field, spec: NormSpec = NormSpec()) -> Field:
    if not isinstance(f, Field):
        raise ShapeError("normalize_refl expects a Field")
    if f.units is not Units.DBZ:
        raise UnitsError(f"normalize_refl expects dBZ, got {f.units.value}")
    v = spec.refl_to_model(f.values.astype(np.float64))
    return Field(np.where(f.mask, v, f.values), Units.NORMALIZED, f.mask)


def denormalize_refl(f: Field, spec: NormSpec = NormSpec()) -> Field:
    if f.units is not Units.NORMALIZED:
        raise UnitsError(f"denormalize_refl expects normalized units, got {f.units.value}")
    v = spec.model_to_refl(f.values.astype(np.float64))
    return Field(np.where(f.mask, v, f.values), Units.DBZ, f.mask)


# --- RGF format -------------------------------------------------------------

_DTYPE = "f32"
_ENDIAN = "LE"


def write_field(f: Field, path) -> None:
    path = Path(path)
    has_mask = not bool(f.mask.all())
    header = {
        "shape": list(f.shape),
        "units": f.units.value,
        "mask": has_mask,
        "endianness": _ENDIAN,
        "dtype": _DTYPE,
    }
    payload = f.values.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)
        if has_mask:
            fh.write(np.packbits(f.mask.ravel()).tobytes())


def read_field(path) -> Field:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header terminator")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
        rows, cols = (int(n) for n in header["shape"])
        units = Units(header["units"])
        has_mask = bool(header["mask"])
        dtype, endian = header["dtype"], header["endianness"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    if dtype != _DTYPE:
        raise DtypeMismatchError(f"{path}: unsupported dtype {dtype!r}, expected {_DTYPE!r}")
    if endian != _ENDIAN:
        raise FormatError(f"{path}: unsupported endianness {endian!r}")
    body = raw[nl + 1 :]
    n = rows * cols
    mask_bytes = (n + 7) // 8 if has_mask else 0
    if len(body) != 4 * n + mask_bytes:
        raise FormatError(f"{path}: payload is {len(body)} bytes, expected {4 * n + mask_bytes}")
    values = np.frombuffer(body[: 4 * n], dtype="<f4").reshape(rows, cols)
    mask = None
    if has_mask:
        bits = np.frombuffer(body[4 * n :], dtype=np.uint8)
        mask = np.unpackbits(bits)[:n].astype(bool).reshape(rows, cols)
    return Field(values, units, mask)
