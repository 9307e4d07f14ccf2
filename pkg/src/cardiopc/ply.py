"""ASCII PLY serialization for labeled point clouds and triangle meshes.

Layout written by this package:
  * vertex properties: double x, y, z + uchar class (anatomical label)
  * clouds carry the cardiac phase as a header comment "phase=ED" / "phase=ES"
  * meshes add "element face" with "property list uchar int vertex_indices"

Coordinates are printed with %.17g so a write/read round trip is bit-exact
for float64. The reader accepts float or double scalar types and any integer
face-count type, but only ASCII files.
"""
from __future__ import annotations

import os

import numpy as np

from .errors import InvalidArgumentError
from .geometry import LabeledPointCloud, Phase

_FLOAT_TYPES = {"float", "float32", "double", "float64"}
_INT_TYPES = {"char", "uchar", "int8", "uint8", "short", "ushort", "int16",
              "uint16", "int", "uint", "int32", "uint32"}


def _format_vertex(p, label) -> str:
    return "%.17g %.17g %.17g %d" % (p[0], p[1], p[2], label)


def write_labeled_cloud(path, cloud: LabeledPointCloud) -> None:
    """Write a labeled point cloud as ASCII PLY with a phase comment."""
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment phase={cloud.phase.value}",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar class",
        "end_header",
    ]
    for p, lab in zip(cloud.points, cloud.labels):
        lines.append(_format_vertex(p, lab))
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def write_labeled_mesh(path, vertices, faces, labels, phase: Phase) -> None:
    """Write a labeled triangle mesh as ASCII PLY."""
    verts = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.uint8)
    if verts.ndim != 2 or verts.shape[1] != 3:
        raise InvalidArgumentError("vertices must have shape (N, 3)")
    if lab.shape != (verts.shape[0],):
        raise InvalidArgumentError("labels must have one entry per vertex")
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment phase={Phase(phase).value}",
        f"element vertex {verts.shape[0]}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar class",
        f"element face {f.shape[0]}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for p, c in zip(verts, lab):
        lines.append(_format_vertex(p, c))
    for tri in f:
        lines.append("3 %d %d %d" % (tri[0], tri[1], tri[2]))
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


class _PlyHeader:
    def __init__(self):
        self.comments: list[str] = []
        # list of (element_name, count, [(prop_kind, prop_name), ...])
        # prop_kind is "scalar:<type>" or "list:<count_type>:<item_type>"
        self.elements: list[tuple[str, int, list]] = []


def _parse_header(lines) -> tuple[_PlyHeader, int]:
    if not lines or lines[0].strip() != "ply":
        raise InvalidArgumentError("not a PLY file (missing 'ply' magic)")
    header = _PlyHeader()
    i = 1
    current_props = None
    while i < len(lines):
        parts = lines[i].strip().split()
        i += 1
        if not parts:
            continue
        kw = parts[0]
        if kw == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise InvalidArgumentError("only ascii PLY is supported")
        elif kw == "comment":
            header.comments.append(" ".join(parts[1:]))
        elif kw == "element":
            if len(parts) != 3:
                raise InvalidArgumentError(f"malformed element line: {lines[i-1]!r}")
            current_props = []
            header.elements.append((parts[1], int(parts[2]), current_props))
        elif kw == "property":
            if current_props is None:
                raise InvalidArgumentError("property before any element")
            if parts[1] == "list":
                if len(parts) != 5:
                    raise InvalidArgumentError(f"malformed list property: {lines[i-1]!r}")
                current_props.append((f"list:{parts[2]}:{parts[3]}", parts[4]))
            else:
                if len(parts) != 3:
                    raise InvalidArgumentError(f"malformed property: {lines[i-1]!r}")
                current_props.append((f"scalar:{parts[1]}", parts[2]))
        elif kw == "end_header":
            return header, i
        else:
            raise InvalidArgumentError(f"unsupported header keyword: {kw!r}")
    raise InvalidArgumentError("PLY header missing end_header")


def _phase_from_comments(comments) -> Phase:
    for c in comments:
        c = c.strip()
        if c.startswith("phase="):
            value = c[len("phase="):].strip()
            try:
                return Phase(value)
            except ValueError:
                raise InvalidArgumentError(f"unknown phase {value!r}") from None
    raise InvalidArgumentError("PLY file has no 'phase=' comment")


def _read_elements(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    header, body_start = _parse_header(lines)
    data = {}
    row = body_start
    for name, count, props in header.elements:
        rows = []
        for _ in range(count):
            if row >= len(lines):
                raise InvalidArgumentError(f"truncated PLY body in element {name!r}")
            rows.append(lines[row].split())
            row += 1
        data[name] = (props, rows)
    return header, data


def _vertex_arrays(props, rows):
    names = [p[1] for p in props]
    for kind, name in props:
        if not kind.startswith("scalar:"):
            raise InvalidArgumentError("list property in vertex element")
        scalar_type = kind.split(":", 1)[1]
        if scalar_type not in _FLOAT_TYPES | _INT_TYPES:
            raise InvalidArgumentError(f"unsupported vertex type {scalar_type!r}")
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise InvalidArgumentError(f"vertex element missing property {axis!r}")
    if "class" not in names:
        raise InvalidArgumentError("vertex element missing property 'class'")
    ix, iy, iz = names.index("x"), names.index("y"), names.index("z")
    ic = names.index("class")
    n = len(rows)
    pts = np.empty((n, 3), dtype=np.float64)
    lab = np.empty(n, dtype=np.int64)
    for k, parts in enumerate(rows):
        if len(parts) != len(names):
            raise InvalidArgumentError(f"vertex row {k} has {len(parts)} fields, "
                                       f"expected {len(names)}")
        pts[k, 0] = float(parts[ix])
        pts[k, 1] = float(parts[iy])
        pts[k, 2] = float(parts[iz])
        lab[k] = int(parts[ic])
    return pts, lab


def read_labeled_cloud(path) -> LabeledPointCloud:
    """Read a labeled point cloud written by write_labeled_cloud."""
    header, data = _read_elements(path)
    if "vertex" not in data:
        raise InvalidArgumentError("PLY file has no vertex element")
    pts, lab = _vertex_arrays(*data["vertex"])
    phase = _phase_from_comments(header.comments)
    return LabeledPointCloud(pts, lab, phase)


def read_labeled_mesh(path):
    """Read a labeled triangle mesh. Returns (vertices, faces, labels, phase)."""
    header, data = _read_elements(path)
    if "vertex" not in data or "face" not in data:
        raise InvalidArgumentError("mesh PLY needs vertex and face elements")
    pts, lab = _vertex_arrays(*data["vertex"])
    props, rows = data["face"]
    if len(props) != 1 or not props[0][0].startswith("list:"):
        raise InvalidArgumentError("face element must have a single list property")
    faces = np.empty((len(rows), 3), dtype=np.int64)
    for k, parts in enumerate(rows):
        if len(parts) != 4 or parts[0] != "3":
            raise InvalidArgumentError(f"face row {k} is not a triangle")
        faces[k] = [int(parts[1]), int(parts[2]), int(parts[3])]
    if faces.size and (faces.min() < 0 or faces.max() >= pts.shape[0]):
        raise InvalidArgumentError("face indices out of range")
    phase = _phase_from_comments(header.comments)
    return pts, faces, lab.astype(np.uint8), phase
