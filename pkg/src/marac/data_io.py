"""Series bundles on disk, CSV ingestion, chronological splits and centering.

A bundle directory holds ``manifest.json``, ``x.bin`` (T*M*N little-endian
float64, frame-major then row-major), ``z.bin`` (T*D float64) and optionally
``grid.json``.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ContractError, FormatError
from .kernels import KernelContext, context_from_dict, save_grid_json
from .series import MatrixSeries, as_series

LAYOUT = "frame-major,row-major"


@dataclass
class SeriesBundle:
    series: MatrixSeries
    split: tuple
    manifest: dict = field(default_factory=dict)
    ctx: Optional[KernelContext] = None


def _check_split(split, T):
    train_end, val_end = (int(s) for s in split)
    if not 0 < train_end <= val_end <= T:
        raise FormatError(f"split ({train_end}, {val_end}) violates 0 < train_end <= val_end <= {T}")
    return train_end, val_end


def write_bundle(series, split, path, ctx=None, extra=None):
    series = as_series(series)
    split = _check_split(split, series.T)
    os.makedirs(path, exist_ok=True)
    manifest = {
        "M": series.M,
        "N": series.N,
        "T": series.T,
        "D": series.D,
        "dtype": "f64le",
        "layout": LAYOUT,
        "grid": "grid.json" if ctx is not None else None,
        "split": {"train_end": split[0], "val_end": split[1]},
    }
    if extra:
        manifest.update(extra)
    np.ascontiguousarray(series.X, dtype="<f8").tofile(os.path.join(path, "x.bin"))
    np.ascontiguousarray(series.z, dtype="<f8").tofile(os.path.join(path, "z.bin"))
    if ctx is not None:
        save_grid_json(ctx, os.path.join(path, "grid.json"))
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def _read_floats(path, count, name):
    if not os.path.exists(path):
        raise FormatError(f"{name} is missing")
    size = os.path.getsize(path)
    if size != 8 * count:
        raise FormatError(f"{name} has {size} bytes, manifest implies {8 * count}")
    return np.fromfile(path, dtype="<f8").astype(float)


def read_bundle(path):
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise FormatError(f"{path}: manifest.json is missing")
    with open(mpath) as fh:
        manifest = json.load(fh)
    try:
        M, N, T, D = (int(manifest[k]) for k in ("M", "N", "T", "D"))
        split = manifest["split"]
        split = (split["train_end"], split["val_end"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"manifest.json is missing field {exc}") from None
    if manifest.get("dtype", "f64le") != "f64le":
        raise FormatError(f"manifest.json: unsupported dtype {manifest['dtype']!r}")
    if manifest.get("layout", LAYOUT) != LAYOUT:
        raise FormatError(f"manifest.json: unsupported layout {manifest['layout']!r}")
    X = _read_floats(os.path.join(path, "x.bin"), T * M * N, "x.bin").reshape(T, M, N)
    z = _read_floats(os.path.join(path, "z.bin"), T * D, "z.bin").reshape(T, D)
    ctx = None
    if manifest.get("grid"):
        with open(os.path.join(path, manifest["grid"])) as fh:
            ctx = context_from_dict(json.load(fh))
    return SeriesBundle(MatrixSeries(X, z), _check_split(split, T), manifest, ctx)


def _read_long_csv(path, keys):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [k for k in keys + ["value"] if k not in (reader.fieldnames or [])]
        if missing:
            raise FormatError(f"{path}: header lacks columns {missing}")
        rows = []
        for line, row in enumerate(reader, start=2):
            try:
                rows.append((tuple(int(row[k]) for k in keys), float(row["value"])))
            except ValueError:
                raise FormatError(f"{path}:{line}: cannot parse {row}") from None
    return rows


def _fill(rows, shape, path, names):
    out = np.full(shape, np.nan)
    for idx, v in rows:
        if any(i < 0 or i >= s for i, s in zip(idx, shape)):
            raise FormatError(f"{path}: index {dict(zip(names, idx))} out of range")
        out[idx] = v
    holes = np.argwhere(np.isnan(out))
    if len(holes):
        key = tuple(int(i) for i in holes[0])
        raise FormatError(f"{path}: missing cell {dict(zip(names, key))}")
    return out


def ingest_csv(x_csv, z_csv=None):
    """Long-format CSVs (``t,i,j,value`` and ``t,d,value``, 0-based) to a dense series."""
    xrows = _read_long_csv(x_csv, ["t", "i", "j"])
    if not xrows:
        raise FormatError(f"{x_csv}: no rows")
    shape = tuple(max(r[0][k] for r in xrows) + 1 for k in range(3))
    X = _fill(xrows, shape, x_csv, ("t", "i", "j"))
    if z_csv is None:
        return MatrixSeries(X, np.zeros((shape[0], 0)))
    zrows = _read_long_csv(z_csv, ["t", "d"])
    D = max(r[0][1] for r in zrows) + 1 if zrows else 0
    z = _fill(zrows, (shape[0], D), z_csv, ("t", "d"))
    return MatrixSeries(X, z)


def chronological_split(T, train=0.7, val=0.15):
    train_end = int(round(train * T))
    val_end = int(round((train + val) * T))
    return _check_split((train_end, val_end), T)


@dataclass
class TrainMeans:
    X: np.ndarray
    z: np.ndarray

    def decenter(self, frames):
        return np.asarray(frames) + self.X


def center_by_train_mean(series, split):
    """Subtract training-window means from every frame and auxiliary vector."""
    series = as_series(series)
    train_end = split[0] if isinstance(split, (tuple, list)) else int(split)
    if train_end < 1:
        raise ContractError("training window is empty")
    means = TrainMeans(series.X[:train_end].mean(axis=0), series.z[:train_end].mean(axis=0))
    centered = MatrixSeries(series.X - means.X, series.z - means.z, series.timestamps)
    return centered, means
