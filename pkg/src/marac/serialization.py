"""Exact JSON encoding of float64 arrays (base64 of little-endian bytes)."""

import base64
import json

import numpy as np

from .exceptions import FormatError


def encode_array(a):
    a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
    return {"shape": list(a.shape), "dtype": "f64le", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d):
    try:
        if d.get("dtype", "f64le") != "f64le":
            raise FormatError(f"unsupported dtype {d['dtype']!r}")
        raw = base64.b64decode(d["data"])
        shape = tuple(d["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed array record: {exc}") from None
    n = int(np.prod(shape)) if shape else 1
    if len(raw) != 8 * n:
        raise FormatError(f"array payload has {len(raw)} bytes, expected {8 * n}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(float)


def encode_list(arrays):
    return [encode_array(a) for a in arrays]


def decode_list(items):
    return [decode_array(d) for d in items]


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
