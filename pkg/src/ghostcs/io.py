"""File formats: binary grids, bucket/profile tables, PGM previews.

Binary grid layout (little-endian)::

    offset  0  4 bytes  magic  b"GIG1" (real) or b"GIC1" (complex)
    offset  4  u32      rows
    offset  8  u32      cols
    offset 12  u32      reserved, 0
    offset 16  f64      pitch in metres
    offset 24  rows*cols f64 (real) or (re, im) f64 pairs (complex), row-major
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .optics import IntensityGrid, OpticalField

__all__ = [
    "FormatError",
    "GRID_FORMAT_VERSION",
    "write_grid",
    "read_grid",
    "read_grid_raw",
    "write_pgm",
    "write_buckets",
    "read_buckets",
    "write_profile",
    "write_json",
    "read_json",
    "save_measurement_set",
    "load_measurement_set",
]

GRID_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIId")
_REAL, _COMPLEX = b"GIG1", b"GIC1"


class FormatError(ValueError):
    """Malformed or unsupported file."""


def write_grid(grid, path):
    """Write an :class:`IntensityGrid`, :class:`OpticalField` or
    ``(array, pitch)`` pair."""
    if isinstance(grid, tuple):
        data, pitch = grid
    else:
        data, pitch = grid.data, grid.pitch
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError("grids must be 2-D")
    if np.iscomplexobj(data):
        magic = _COMPLEX
        payload = np.ascontiguousarray(data, dtype="<c16")
    else:
        magic = _REAL
        payload = np.ascontiguousarray(data, dtype="<f8")
    if np.isnan(payload).any():
        raise ValueError("refusing to write a grid containing NaN")
    rows, cols = data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, rows, cols, 0, float(pitch)))
        fh.write(payload.tobytes())


def read_grid_raw(path):
    """Return ``(array, pitch)`` from a GIG1/GIC1 file."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, rows, cols, reserved, pitch = _HEADER.unpack_from(raw)
    if magic not in (_REAL, _COMPLEX):
        raise FormatError(f"{path}: bad magic {magic!r}")
    if reserved != 0:
        raise FormatError(f"{path}: unsupported header (reserved field {reserved})")
    dtype = "<f8" if magic == _REAL else "<c16"
    expected = _HEADER.size + rows * cols * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: size {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size).reshape(rows, cols)
    return data.astype(data.dtype.newbyteorder("=")), pitch


def read_grid(path, wavelength=None):
    """Read a grid file back into an :class:`IntensityGrid` (GIG1) or an
    :class:`OpticalField` (GIC1, needs ``wavelength``)."""
    data, pitch = read_grid_raw(path)
    if np.iscomplexobj(data):
        if wavelength is None:
            raise ValueError("complex grids need a wavelength to become an OpticalField")
        return OpticalField(data, pitch, wavelength)
    return IntensityGrid(data, pitch)


def write_pgm(data, path):
    """16-bit binary PGM, max-normalized, negatives clamped."""
    data = np.clip(np.asarray(getattr(data, "data", data), dtype=np.float64), 0, None)
    peak = data.max()
    scaled = np.zeros(data.shape) if peak <= 0 else data / peak
    pixels = np.round(scaled * 65535).astype(">u2")
    rows, cols = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n65535\n".encode("ascii"))
        fh.write(pixels.tobytes())


def write_buckets(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "seed", "bucket"])
        for i, rec in enumerate(records):
            w.writerow([i, rec.seed, repr(float(rec.bucket))])


def read_buckets(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["index", "seed", "bucket"]:
            raise FormatError(f"{path}: expected header index,seed,bucket, got {header}")
        rows = [(int(i), int(s), float(b)) for i, s, b in reader]
    if [r[0] for r in rows] != list(range(len(rows))):
        raise FormatError(f"{path}: indices are not 0..{len(rows) - 1}")
    return rows


def write_profile(x, values, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x_meters", "value"])
        for xi, vi in zip(x, values):
            w.writerow([repr(float(xi)), repr(float(vi))])


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def save_measurement_set(ms, directory):
    """Write frames, buckets and the object mask under ``directory``.

    Returns the relative paths written, in write order.
    """
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    written = []
    for i, rec in enumerate(ms.records):
        name = f"frames/frame_{i:05d}.gig"
        write_grid(rec.reference_frame, directory / name)
        written.append(name)
    write_buckets(ms.records, directory / "buckets.csv")
    written.append("buckets.csv")
    if ms.object_truth is not None:
        write_grid(ms.object_truth, directory / "object.gig")
        written.append("object.gig")
    return written


def load_measurement_set(directory, layout):
    """Inverse of :func:`save_measurement_set`; ``layout`` comes from the manifest."""
    from .forward import MeasurementSet, RealizationRecord
    from .optics import TransmissionMask

    directory = Path(directory)
    rows = read_buckets(directory / "buckets.csv")
    if not rows:
        raise FormatError(f"{directory}: empty bucket table")
    records = []
    for i, seed, bucket in rows:
        frame = read_grid(directory / "frames" / f"frame_{i:05d}.gig")
        records.append(RealizationRecord(frame, bucket, seed))
    obj = None
    if (directory / "object.gig").exists():
        data, pitch = read_grid_raw(directory / "object.gig")
        obj = TransmissionMask(data, pitch)
    return MeasurementSet(layout, records, obj)
