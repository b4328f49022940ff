import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sglab.extremes import ExtremalProcessSample, centering
from sglab.io import (
    BadFlags,
    BadMagic,
    FieldFormatError,
    PointsFormatError,
    TruncatedPayload,
    decode_field,
    decode_points,
    encode_field,
    encode_points,
    read_field,
    read_points,
    write_field,
    write_points,
)
from sglab.rng import stream


def test_zero_field_file_is_44_bytes(tmp_path):
    p = tmp_path / "z.fld"
    write_field(p, np.zeros((2, 2)))
    data = p.read_bytes()
    assert len(data) == 44
    assert data[:4] == b"FLD1"
    assert struct.unpack("<II", data[4:12]) == (2, 0)
    assert data[12:] == bytes(32)


def test_random_field_round_trip_is_bitwise(tmp_path):
    f = stream(0, "io").standard_normal((64, 64))
    p = tmp_path / "f.fld"
    write_field(p, f)
    g = read_field(p)
    assert g.tobytes() == f.tobytes()
    assert g.flags.writeable


@given(arrays(np.float64, (4, 4), elements=st.floats(allow_nan=True, allow_infinity=True)))
@settings(max_examples=50)
def test_round_trip_preserves_every_bit(f):
    assert decode_field(encode_field(f)).tobytes() == np.ascontiguousarray(f).tobytes()


def test_field_errors_are_distinct():
    good = encode_field(np.ones((4, 4)))
    with pytest.raises(TruncatedPayload, match="truncated payload"):
        decode_field(good[:-1])
    with pytest.raises(TruncatedPayload):
        decode_field(good[:6])
    with pytest.raises(BadMagic):
        decode_field(b"FLD2" + good[4:])
    with pytest.raises(BadMagic):
        decode_field(b"XY")
    with pytest.raises(BadFlags):
        decode_field(good[:8] + struct.pack("<I", 1) + good[12:])
    with pytest.raises(FieldFormatError):
        decode_field(good + b"\0")
    codes = {BadMagic.code, TruncatedPayload.code, BadFlags.code}
    assert len(codes) == 3
    with pytest.raises(ValueError):
        encode_field(np.ones((2, 3)))


def sample(k, seed=1):
    rng = stream(seed, "pts")
    eps = 1 / 64
    return ExtremalProcessSample(rng.random((k, 2)), rng.standard_normal(k), 0.3, eps, centering(eps))


def test_points_round_trip_exact(tmp_path):
    s = sample(1000)
    p = tmp_path / "p.jsonl"
    write_points(p, s)
    t = read_points(p)
    np.testing.assert_array_equal(t.locations, s.locations)
    np.testing.assert_array_equal(t.heights, s.heights)
    assert (t.r, t.epsilon, t.m_eps) == (s.r, s.epsilon, s.m_eps)


def test_empty_sample_is_header_only():
    text = encode_points(sample(0))
    assert text.count("\n") == 1
    assert len(decode_points(text)) == 0


def test_centering_mismatch_warns():
    s = sample(3)
    bad = ExtremalProcessSample(s.locations, s.heights, s.r, s.epsilon, s.m_eps + 0.01)
    with pytest.warns(UserWarning, match="m_eps"):
        decode_points(encode_points(bad))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        decode_points(encode_points(s))
        decode_points(encode_points(bad), check_centering=False)


@pytest.mark.parametrize(
    "text, line",
    [
        ("", 1),
        ("not json\n", 1),
        ('{"r": 0.1, "epsilon": 0.01}\n', 1),
        ('{"r": 0.1, "epsilon": 0.01, "m_eps": 1.0}\n{"x": [0.1, 0.2], "h": 1}\n{"x": [0.1], "h": 1}\n', 3),
        ('{"r": 0.1, "epsilon": 0.01, "m_eps": 1.0}\n{"x": [0.1, 0.2]}\n', 2),
    ],
)
def test_malformed_points_report_line(text, line):
    with pytest.raises(PointsFormatError) as err:
        decode_points(text, check_centering=False)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=20))
@settings(max_examples=50)
def test_point_heights_survive_text(hs):
    s = ExtremalProcessSample(np.zeros((len(hs), 2)), np.array(hs), 0.0, 0.5, 0.0)
    t = decode_points(encode_points(s), check_centering=False)
    assert t.heights.tolist() == hs
