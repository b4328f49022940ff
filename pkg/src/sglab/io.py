"""Binary field files and JSON-lines point files.

Field file: ``b"FLD1"``, ``u32`` little-endian ``n``, ``u32`` little-endian flags
(always 0), then ``n*n`` little-endian float64 values in row-major site order.

Point file: a header object ``{"r", "epsilon", "m_eps"}`` on the first line, then
one ``{"x": [x0, x1], "h": h}`` per line.  Floats are written in shortest
round-trip form, so reading returns the exact values written.
"""
from __future__ import annotations

import json
import math
import struct
import warnings
from pathlib import Path

import numpy as np

from .extremes import ExtremalProcessSample, centering
from .spectral import as_values

MAGIC = b"FLD1"
_HEADER = struct.Struct("<4sII")


class FieldFormatError(ValueError):
    code = "field_format"


class BadMagic(FieldFormatError):
    code = "bad_magic"


class TruncatedPayload(FieldFormatError):
    code = "truncated_payload"


class BadFlags(FieldFormatError):
    code = "bad_flags"


class PointsFormatError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def encode_field(field) -> bytes:
    values = np.ascontiguousarray(as_values(field), dtype="<f8")
    n = values.shape[-1]
    if values.shape != (n, n):
        raise ValueError("expected a square field")
    return _HEADER.pack(MAGIC, n, 0) + values.tobytes()


def decode_field(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        if not MAGIC.startswith(data[:4]):
            raise BadMagic("bad magic")
        raise TruncatedPayload("truncated payload")
    magic, n, flags = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic("bad magic")
    if flags != 0:
        raise BadFlags(f"unsupported flags {flags}")
    need = _HEADER.size + 8 * n * n
    if len(data) < need:
        raise TruncatedPayload("truncated payload")
    if len(data) > need:
        raise FieldFormatError("trailing bytes after payload")
    return np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(n, n).astype(np.float64)


def write_field(path, field) -> None:
    Path(path).write_bytes(encode_field(field))


def read_field(path) -> np.ndarray:
    return decode_field(Path(path).read_bytes())


def _f(x) -> float:
    return float(x)


def encode_points(sample: ExtremalProcessSample) -> str:
    lines = [json.dumps({"r": _f(sample.r), "epsilon": _f(sample.epsilon), "m_eps": _f(sample.m_eps)})]
    for (a, b), h in zip(sample.locations, sample.heights):
        lines.append(json.dumps({"x": [_f(a), _f(b)], "h": _f(h)}))
    return "\n".join(lines) + "\n"


def decode_points(text: str, check_centering: bool = True) -> ExtremalProcessSample:
    lines = text.splitlines()
    if not lines:
        raise PointsFormatError(1, "missing header")
    try:
        head = json.loads(lines[0])
        r, eps, m = float(head["r"]), float(head["epsilon"]), float(head["m_eps"])
    except (ValueError, KeyError, TypeError) as exc:
        raise PointsFormatError(1, f"malformed header ({exc})") from None
    locs, hs = [], []
    for k, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            x = [float(v) for v in obj["x"]]
            h = float(obj["h"])
            if len(x) != 2:
                raise ValueError("x must have two coordinates")
        except (ValueError, KeyError, TypeError) as exc:
            raise PointsFormatError(k, f"malformed point ({exc})") from None
        locs.append(x)
        hs.append(h)
    if check_centering and 0 < eps < math.exp(-1) and m != centering(eps):
        warnings.warn(f"header m_eps={m!r} differs from centering({eps!r})={centering(eps)!r}", stacklevel=2)
    return ExtremalProcessSample(np.array(locs, dtype=float).reshape(-1, 2), np.array(hs, dtype=float), r, eps, m)


def write_points(path, sample: ExtremalProcessSample) -> None:
    Path(path).write_text(encode_points(sample), encoding="utf-8")


def read_points(path, check_centering: bool = True) -> ExtremalProcessSample:
    return decode_points(Path(path).read_text(encoding="utf-8"), check_centering)
