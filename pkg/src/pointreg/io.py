"""Point-cloud file formats.

Two formats are supported:

* ASCII PLY with float vertex properties ``x, y, z`` and optional
  ``intensity``.
* A compact binary format: magic bytes ``FREG``, format version as 32-bit
  unsigned little-endian, point count as 64-bit unsigned little-endian, then
  ``count`` records of four 32-bit little-endian floats (x, y, z, intensity).

Readers reject unknown magic bytes and versions. The binary format stores a
fixed intensity column; clouds without intensity are written with 1.0, the
same constant the feature encoder substitutes for missing intensity.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import PointCloud

FREG_MAGIC = b"FREG"
FREG_VERSION = 1

_FREG_HEADER = struct.Struct("<4sIQ")


class CloudFormatError(ValueError):
    """A point-cloud file is malformed or has an unsupported format."""


def save_freg(cloud: PointCloud, path) -> None:
    path = Path(path)
    intensity = cloud.intensity
    if intensity is None:
        intensity = np.ones(len(cloud))
    records = np.column_stack([cloud.coords, intensity]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_FREG_HEADER.pack(FREG_MAGIC, FREG_VERSION, len(cloud)))
        fh.write(records.tobytes())


def load_freg(path) -> PointCloud:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _FREG_HEADER.size:
        raise CloudFormatError(f"{path}: truncated header")
    magic, version, count = _FREG_HEADER.unpack_from(data)
    if magic != FREG_MAGIC:
        raise CloudFormatError(f"{path}: bad magic {magic!r}")
    if version != FREG_VERSION:
        raise CloudFormatError(f"{path}: unsupported version {version}")
    expected = _FREG_HEADER.size + 16 * count
    if len(data) != expected:
        raise CloudFormatError(
            f"{path}: expected {expected} bytes for {count} points, found {len(data)}"
        )
    records = np.frombuffer(data, dtype="<f4", offset=_FREG_HEADER.size)
    records = records.reshape(count, 4).astype(np.float64)
    return PointCloud(records[:, :3], records[:, 3])


def save_ply(cloud: PointCloud, path) -> None:
    path = Path(path)
    has_intensity = cloud.intensity is not None
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    header += [f"property float {name}" for name in ("x", "y", "z")]
    if has_intensity:
        header.append("property float intensity")
    header.append("end_header")
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        if has_intensity:
            rows = np.column_stack([cloud.coords, cloud.intensity])
        else:
            rows = cloud.coords
        for row in rows:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_ply(path) -> PointCloud:
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError(f"{path}: not a PLY file")
    properties: list[str] = []
    count = None
    body_start = None
    in_vertex = False
    for lineno, line in enumerate(lines[1:], start=1):
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1:2] != ["ascii"]:
                raise CloudFormatError(f"{path}: only ascii PLY is supported")
        elif tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                count = int(tokens[2])
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] not in ("float", "float32", "double", "float64"):
                raise CloudFormatError(
                    f"{path}: unsupported vertex property type {tokens[1]!r}"
                )
            properties.append(tokens[2])
        elif tokens[0] == "end_header":
            body_start = lineno + 1
            break
    if body_start is None or count is None:
        raise CloudFormatError(f"{path}: incomplete PLY header")
    for name in ("x", "y", "z"):
        if name not in properties:
            raise CloudFormatError(f"{path}: missing vertex property {name!r}")
    body = lines[body_start : body_start + count]
    if len(body) < count:
        raise CloudFormatError(f"{path}: expected {count} vertex rows, found {len(body)}")
    try:
        values = np.array([row.split() for row in body], dtype=np.float64)
    except ValueError as exc:
        raise CloudFormatError(f"{path}: malformed vertex row ({exc})") from exc
    if values.ndim != 2 or values.shape[1] != len(properties):
        raise CloudFormatError(f"{path}: vertex rows do not match the property list")
    cols = {name: values[:, i] for i, name in enumerate(properties)}
    coords = np.column_stack([cols["x"], cols["y"], cols["z"]])
    intensity = cols.get("intensity")
    return PointCloud(coords, intensity)


def save_cloud(cloud: PointCloud, path) -> None:
    """Write PLY for a .ply extension, the FREG binary format otherwise."""
    path = Path(path)
    if path.suffix.lower() == ".ply":
        save_ply(cloud, path)
    else:
        save_freg(cloud, path)


def load_cloud(path) -> PointCloud:
    """Load a cloud, sniffing the format from the leading bytes."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == FREG_MAGIC:
        return load_freg(path)
    if head[:3] == b"ply":
        return load_ply(path)
    raise CloudFormatError(f"{path}: unrecognized point-cloud format")
