"""Clinical biomarkers from reconstructed meshes and from stacked 2D contours.

Volumes come from two independent routes that the evaluation stage compares:
signed-tetrahedron integration of closed 3D meshes, and disk summation of
planar slice contour areas (Simpson-style). Units: mm internally, volumes
reported in ml (1000 mm^3), mass in g.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, fields

import numpy as np

from .errors import (
    InvalidAnatomyError,
    InvalidArgumentError,
    InvalidContourError,
    InvalidTopologyError,
)
from .meshing import TriMesh, boundary_loop_vertices, check_topology

MYOCARDIAL_DENSITY_G_PER_ML = 1.05


def cap_basal_hole(mesh: TriMesh) -> TriMesh:
    """Close a single boundary loop with a centroid fan.

    An already-closed mesh is returned unchanged. The fan vertex is the loop
    centroid, and fan faces adopt the orientation induced by the existing
    boundary edges, so a consistently wound input stays consistently wound.
    """
    report = check_topology(mesh)
    if not report.is_edge_manifold:
        raise InvalidTopologyError("cannot cap a non-edge-manifold mesh")
    if report.boundary_loops == 0:
        return mesh
    if report.boundary_loops != 1:
        raise InvalidTopologyError(
            f"expected at most one boundary loop, found {report.boundary_loops}")
    loop = boundary_loop_vertices(mesh)[0]
    centroid = mesh.vertices[loop].mean(axis=0)
    new_verts = np.vstack([mesh.vertices, centroid[None, :]])
    c_idx = mesh.n_vertices

    # boundary directed edges appear exactly once; the cap traverses each in
    # the opposite direction to keep the global winding consistent
    directed = set()
    counts: dict[tuple[int, int], int] = {}
    for tri in mesh.faces:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            directed.add((int(a), int(b)))
            e = (int(a), int(b)) if a < b else (int(b), int(a))
            counts[e] = counts.get(e, 0) + 1
    cap_faces = []
    for (a, b) in sorted(directed):
        e = (a, b) if a < b else (b, a)
        if counts[e] == 1:
            cap_faces.append((b, a, c_idx))
    new_faces = np.vstack([mesh.faces, np.array(cap_faces, dtype=np.int64)])
    return TriMesh(new_verts, new_faces, mesh.cls)


def mesh_volume(mesh: TriMesh) -> float:
    """Enclosed volume of a closed oriented mesh in ml.

    Signed tetrahedra against the origin (divergence theorem); the absolute
    value makes the result independent of global winding direction.
    """
    report = check_topology(mesh)
    if not report.is_edge_manifold or report.boundary_loops != 0:
        raise InvalidTopologyError("mesh_volume requires a closed edge-manifold mesh")
    if not report.is_oriented:
        raise InvalidTopologyError("mesh_volume requires consistent winding")
    tri = mesh.vertices[mesh.faces]
    signed = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])) / 6.0
    return abs(float(np.sum(signed))) / 1000.0


def lv_mass(epi: TriMesh, endo: TriMesh,
            density: float = MYOCARDIAL_DENSITY_G_PER_ML) -> float:
    """Myocardial mass in g: wall volume between epi and endo times density."""
    v_epi = mesh_volume(epi)
    v_endo = mesh_volume(endo)
    if v_epi <= v_endo:
        raise InvalidAnatomyError(
            f"epicardial volume {v_epi:.1f} ml not larger than endocardial {v_endo:.1f} ml")
    return (v_epi - v_endo) * density


def _planar_coordinates(points: np.ndarray) -> np.ndarray:
    """Project a near-planar 3D polygon to 2D coordinates in its own plane."""
    centered = points - points.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    residual = float(s[2]) if len(s) == 3 else 0.0
    extent = float(s[0])
    if extent <= 0:
        raise InvalidContourError("contour is degenerate (zero extent)")
    if residual > max(1e-6 * extent, 1e-3):
        raise InvalidContourError(
            f"contour is not planar (out-of-plane spread {residual:.2g} mm)")
    return centered @ vt[:2].T


def _self_intersects(xy: np.ndarray) -> bool:
    """Segment-pair crossing test for the closed polygon xy."""
    n = xy.shape[0]
    seg_a = xy
    seg_b = np.roll(xy, -1, axis=0)

    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) \
             - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])

    for i in range(n):
        a1, a2 = seg_a[i], seg_b[i]
        # skip adjacent segments (shared endpoints)
        js = [j for j in range(i + 2, n) if not (i == 0 and j == n - 1)]
        if not js:
            continue
        b1, b2 = seg_a[js], seg_b[js]
        d1 = orient(a1[None, :], a2[None, :], b1)
        d2 = orient(a1[None, :], a2[None, :], b2)
        d3 = orient(b1, b2, np.broadcast_to(a1, b1.shape))
        d4 = orient(b1, b2, np.broadcast_to(a2, b1.shape))
        if np.any((d1 * d2 < 0) & (d3 * d4 < 0)):
            return True
    return False


def polygon_area(points) -> float:
    """Area (mm^2) of a closed planar simple polygon given as (N, 3) points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 3:
        raise InvalidContourError("contour needs at least 3 points of shape (N, 3)")
    if not np.all(np.isfinite(pts)):
        raise InvalidContourError("contour contains non-finite values")
    xy = _planar_coordinates(pts)
    if _self_intersects(xy):
        raise InvalidContourError("contour is self-intersecting")
    x, y = xy[:, 0], xy[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    area = 0.5 * abs(float(np.sum(x * yn - xn * y)))
    if area <= 0.0:
        raise InvalidContourError("contour has zero area")
    return area


def simpsons_volume(contours, slice_thickness: float, slice_gap: float) -> float:
    """Disk-summation volume in ml from per-slice closed contours.

    Each contour contributes shoelace area times the disk height
    (thickness + gap). Contours are (N, 3) arrays of ordered points, one per
    slice, implicitly closed (last connects to first).
    """
    if slice_thickness <= 0 or slice_gap < 0:
        raise InvalidArgumentError("slice_thickness must be > 0 and slice_gap >= 0")
    contours = list(contours)
    if len(contours) < 3:
        raise InvalidContourError(
            f"need at least 3 slice contours, got {len(contours)}")
    height = slice_thickness + slice_gap
    total = 0.0
    for c in contours:
        total += polygon_area(c) * height
    return total / 1000.0


def ejection_metrics(edv: float, esv: float) -> tuple[float, float]:
    """Stroke volume (ml) and ejection fraction (%) from phase volumes."""
    if edv <= 0.0:
        raise InvalidAnatomyError(f"EDV must be positive, got {edv}")
    if esv <= 0.0:
        raise InvalidAnatomyError(f"ESV must be positive, got {esv}")
    if esv > edv:
        raise InvalidAnatomyError(
            f"ESV {esv:.1f} ml exceeds EDV {edv:.1f} ml; refusing to clamp")
    sv = edv - esv
    ef = 100.0 * sv / edv
    return sv, ef


@dataclass(frozen=True)
class ClinicalRecord:
    """Per-case biomarker row. method is 'mesh3d' or 'simpson2d'."""

    case_id: str
    method: str
    lv_edv_ml: float
    lv_esv_ml: float
    lv_sv_ml: float
    lv_ef_pct: float
    lv_mass_g: float
    rv_edv_ml: float
    rv_esv_ml: float
    rv_sv_ml: float
    rv_ef_pct: float

    def __post_init__(self):
        if self.method not in ("mesh3d", "simpson2d"):
            raise InvalidArgumentError(f"unknown method {self.method!r}")
        for edv, esv, sv, ef in ((self.lv_edv_ml, self.lv_esv_ml, self.lv_sv_ml,
                                  self.lv_ef_pct),
                                 (self.rv_edv_ml, self.rv_esv_ml, self.rv_sv_ml,
                                  self.rv_ef_pct)):
            if edv <= 0 or esv <= 0:
                raise InvalidAnatomyError("volumes must be positive")
            if abs(sv - (edv - esv)) > 1e-9:
                raise InvalidAnatomyError("SV inconsistent with EDV - ESV")
            if abs(ef - 100.0 * sv / edv) > 1e-9:
                raise InvalidAnatomyError("EF inconsistent with SV / EDV")
            if not (0.0 <= ef < 100.0):
                raise InvalidAnatomyError(f"EF {ef:.1f}% out of range")


def make_record(case_id: str, method: str, lv_edv: float, lv_esv: float,
                lv_mass_g: float, rv_edv: float, rv_esv: float) -> ClinicalRecord:
    """Build a consistent record, deriving SV/EF from the volumes."""
    lv_sv, lv_ef = ejection_metrics(lv_edv, lv_esv)
    rv_sv, rv_ef = ejection_metrics(rv_edv, rv_esv)
    return ClinicalRecord(case_id=case_id, method=method,
                          lv_edv_ml=lv_edv, lv_esv_ml=lv_esv,
                          lv_sv_ml=lv_sv, lv_ef_pct=lv_ef, lv_mass_g=lv_mass_g,
                          rv_edv_ml=rv_edv, rv_esv_ml=rv_esv,
                          rv_sv_ml=rv_sv, rv_ef_pct=rv_ef)


_NUMERIC_FIELDS = ("lv_edv_ml", "lv_esv_ml", "lv_sv_ml", "lv_ef_pct",
                   "lv_mass_g", "rv_edv_ml", "rv_esv_ml", "rv_sv_ml",
                   "rv_ef_pct")


def write_records_csv(path, records) -> None:
    names = [f.name for f in fields(ClinicalRecord)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for r in records:
            writer.writerow([getattr(r, n) if isinstance(getattr(r, n), str)
                             else "%.6f" % getattr(r, n) for n in names])


def summarize_records(records, by: str = "method") -> dict:
    """Population summary: mean and SD of each metric, grouped by a key."""
    groups: dict[str, list[ClinicalRecord]] = {}
    for r in records:
        groups.setdefault(getattr(r, by), []).append(r)
    out = {}
    for key in sorted(groups):
        rows = groups[key]
        stats = {}
        for name in _NUMERIC_FIELDS:
            vals = np.array([getattr(r, name) for r in rows], dtype=np.float64)
            stats[name] = {"mean": float(np.mean(vals)),
                           "sd": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
                           "n": int(len(vals))}
        out[str(key)] = stats
    return out


def write_summary_json(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
