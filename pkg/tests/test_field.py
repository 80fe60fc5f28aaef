import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from diffsr.errors import DtypeMismatchError, FormatError, ShapeError, UnitsError
from diffsr.field import (Field, NormSpec, Scene, Units, denormalize_refl, normalize_refl, read_field,
                          write_field)

from conftest import make_scene


def dbz(values):
    return Field(np.atleast_2d(np.asarray(values, dtype=float)), Units.DBZ)


@pytest.mark.parametrize("value, expected", [(0.0, -1.0), (30.0, 0.0), (75.0, 1.0)])
def test_normalize_refl_examples(value, expected):
    assert normalize_refl(dbz([value])).values[0, 0] == pytest.approx(expected, abs=1e-7)


@pytest.mark.parametrize("value, expected", [(-1.0, 0.0), (0.0, 30.0)])
def test_denormalize_refl_examples(value, expected):
    f = Field([[value]], Units.NORMALIZED)
    assert denormalize_refl(f).values[0, 0] == pytest.approx(expected, abs=1e-6)


def test_units_are_checked():
    with pytest.raises(UnitsError):
        normalize_refl(Field([[1.0]], Units.NORMALIZED))
    with pytest.raises(UnitsError):
        denormalize_refl(dbz([1.0]))


def test_dbz_clipped_on_creation():
    f = dbz([-5.0, 30.0, 99.0])
    np.testing.assert_array_equal(f.values, [[0.0, 30.0, 60.0]])


def test_mask_is_preserved_by_normalization():
    mask = np.array([[True, False]])
    f = Field([[10.0, np.nan]], Units.DBZ, mask)
    out = normalize_refl(f)
    np.testing.assert_array_equal(out.mask, mask)
    assert np.isnan(out.values[0, 1])


def test_non_finite_valid_pixel_rejected():
    with pytest.raises(ValueError):
        Field([[np.nan]], Units.BRIGHTNESS_K)


@given(arrays(np.float64, 16, elements=st.floats(-1.0, 1.0)))
def test_normalized_round_trip(v):
    f = Field(v.reshape(4, 4), Units.NORMALIZED)
    back = normalize_refl(denormalize_refl(f))
    np.testing.assert_allclose(back.values, f.values, atol=1e-6)


@given(arrays(np.float64, 12, elements=st.floats(-1e6, 1e6)))
def test_dbz_round_trip_is_clip(x):
    f = Field(x.reshape(3, 4), Units.DBZ)
    back = denormalize_refl(normalize_refl(f))
    np.testing.assert_allclose(back.values, np.clip(x, 0, 60).reshape(3, 4), atol=1e-5)


@given(st.floats(-100, 100), st.floats(-100, 100))
def test_normalize_monotone(a, b):
    lo, hi = sorted((a, b))
    out = normalize_refl(dbz([lo, hi])).values[0]
    assert out[0] <= out[1]


def test_scene_requires_four_aligned_channels():
    s = make_scene(8, 8)
    with pytest.raises(ShapeError):
        Scene(s.satellite[:3], s.radar, "x")
    with pytest.raises(ShapeError):
        Scene(s.satellite, Field(np.zeros((4, 4)), Units.DBZ), "x")


def test_normspec_validation():
    with pytest.raises(ValueError):
        NormSpec(dbz_min=10, dbz_max=5)
    with pytest.raises(ValueError):
        NormSpec(sat_scale=(1.0, 0.0, 1.0, 1.0))


# --- RGF --------------------------------------------------------------------

@given(arrays(np.float32, (3, 5), elements=st.floats(-1e6, 1e6, width=32)),
       arrays(bool, (3, 5)))
def test_rgf_round_trip_bit_exact(tmp_path_factory, values, mask):
    path = tmp_path_factory.mktemp("rgf") / "f.rgf"
    f = Field(values, Units.BRIGHTNESS_K, mask)
    write_field(f, path)
    g = read_field(path)
    assert g == f
    assert g.values.tobytes() == f.values.tobytes()


def test_rgf_payload_size(tmp_path):
    path = tmp_path / "z.rgf"
    write_field(Field(np.zeros((2, 3)), Units.NORMALIZED), path)
    raw = path.read_bytes()
    header, payload = raw.split(b"\n", 1)
    assert len(payload) == 24
    assert json.loads(header) == {"shape": [2, 3], "units": "normalized", "mask": False,
                                  "endianness": "LE", "dtype": "f32"}


def test_rgf_dtype_mismatch(tmp_path):
    path = tmp_path / "bad.rgf"
    header = {"shape": [1, 1], "units": "dBZ", "mask": False, "endianness": "LE", "dtype": "f64"}
    path.write_bytes(json.dumps(header).encode() + b"\n" + b"\0" * 8)
    with pytest.raises(DtypeMismatchError):
        read_field(path)


def test_rgf_truncated_and_malformed(tmp_path):
    good = tmp_path / "g.rgf"
    write_field(Field(np.ones((4, 4)), Units.DBZ), good)
    raw = good.read_bytes()
    (tmp_path / "t.rgf").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        read_field(tmp_path / "t.rgf")
    (tmp_path / "m.rgf").write_bytes(b"{not json\n" + raw.split(b"\n", 1)[1])
    with pytest.raises(FormatError):
        read_field(tmp_path / "m.rgf")
    (tmp_path / "n.rgf").write_bytes(b"no newline at all")
    with pytest.raises(FormatError):
        read_field(tmp_path / "n.rgf")
