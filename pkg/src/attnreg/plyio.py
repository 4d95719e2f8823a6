"""ASCII PLY point-cloud reading and writing.

Reads x/y/z plus optional nx/ny/nz vertex properties (normals are estimated
when absent) and tolerates extra properties. Binary PLY is not supported.
"""

from __future__ import annotations

import numpy as np

from .errors import DataFormatError
from .geometry import PointCloud, estimate_normals

_POSITION_NAMES = ("x", "y", "z")
_NORMAL_NAMES = ("nx", "ny", "nz")


def read_ply(path) -> PointCloud:
    with open(path, "r", encoding="ascii", errors="replace") as handle:
        lines = [line.strip() for line in handle]
    if not lines or lines[0] != "ply":
        raise DataFormatError(f"{path}: not a PLY file")
    try:
        end = lines.index("end_header")
    except ValueError:
        raise DataFormatError(f"{path}: missing end_header") from None

    vertex_count = None
    properties: list[str] = []
    in_vertex_element = False
    for line in lines[1:end]:
        if not line or line.startswith("comment"):
            continue
        parts = line.split()
        if parts[0] == "format":
            if parts[1] != "ascii":
                raise DataFormatError(f"{path}: only ascii PLY is supported, got {parts[1]}")
        elif parts[0] == "element":
            in_vertex_element = parts[1] == "vertex"
            if in_vertex_element:
                try:
                    vertex_count = int(parts[2])
                except (IndexError, ValueError):
                    raise DataFormatError(f"{path}: malformed vertex element") from None
        elif parts[0] == "property" and in_vertex_element:
            if len(parts) != 3 or parts[1] == "list":
                raise DataFormatError(f"{path}: unsupported vertex property {line!r}")
            properties.append(parts[2])
    if vertex_count is None:
        raise DataFormatError(f"{path}: no vertex element")
    for name in _POSITION_NAMES:
        if name not in properties:
            raise DataFormatError(f"{path}: missing vertex property {name!r}")

    rows = []
    for line in lines[end + 1:]:
        if not line:
            continue
        values = line.split()
        if len(values) != len(properties):
            raise DataFormatError(
                f"{path}: vertex row has {len(values)} values, expected {len(properties)}"
            )
        try:
            rows.append([float(v) for v in values])
        except ValueError:
            raise DataFormatError(f"{path}: non-numeric vertex value in {line!r}") from None
        if len(rows) == vertex_count:
            break
    if len(rows) != vertex_count:
        raise DataFormatError(f"{path}: expected {vertex_count} vertices, found {len(rows)}")
    table = np.asarray(rows, dtype=np.float64)
    columns = {name: table[:, i] for i, name in enumerate(properties)}
    positions = np.column_stack([columns[n] for n in _POSITION_NAMES])

    if all(n in columns for n in _NORMAL_NAMES):
        normals = np.column_stack([columns[n] for n in _NORMAL_NAMES])
        lengths = np.linalg.norm(normals, axis=1)
        degenerate = lengths < 1e-12
        # rescale only out-of-tolerance rows so our own files round-trip bit-exactly
        fix = ~degenerate & (np.abs(lengths - 1.0) > 1e-6)
        normals[fix] /= lengths[fix, None]
        normals[degenerate] = (0.0, 0.0, 1.0)
    else:
        k = min(20, vertex_count - 1)
        if k >= 3:
            normals = estimate_normals(positions, k)
        else:
            normals = np.tile((0.0, 0.0, 1.0), (vertex_count, 1))
    return PointCloud(positions, normals)


def write_ply(path, cloud: PointCloud) -> None:
    """Write positions and normals; floats use shortest round-trip repr."""
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
        "property double nx",
        "property double ny",
        "property double nz",
        "end_header",
    ]
    for p, n in zip(cloud.positions, cloud.normals):
        lines.append(" ".join(repr(float(v)) for v in (*p, *n)))
    with open(path, "w", encoding="ascii", newline="\n") as handle:
        handle.write("\n".join(lines) + "\n")
