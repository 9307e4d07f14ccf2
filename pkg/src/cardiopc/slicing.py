"""Simulated cine-MRI acquisition: slice planes, contours, misalignment.

Turns a 3D anatomy into the sparse, misaligned stack of per-slice contours a
clinical short-axis protocol would yield: a parallel SAX stack aligned to the
(jittered) LV long axis plus two long-axis views, per-class contours from
plane-mesh intersection resampled along periodic B-splines, one rigid
misalignment transform per slice, and pooled fixed-size point clouds with
paired ground truth for the dataset on disk.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import splev, splprep

from ._rng import STAGE_MISALIGN, STAGE_PLANES, STAGE_SHAPE, rng_for
from .errors import (
    FitFailureError,
    InvalidArgumentError,
    InvalidContourError,
    InvalidSampleError,
    SlicingError,
    SplitError,
)
from .geometry import (
    ALL_CLASSES,
    AnatomicalClass,
    LabeledPointCloud,
    NearestNeighborIndex,
    Phase,
    RigidTransform,
)
from .meshing import TriMesh, boundary_loop_vertices
from .shape_model import (
    ShapeSample,
    build_template,
    generate_modes,
    mesh_to_ground_truth_cloud,
    sample_shape,
)
from . import ply as ply_io

_PLANE_TOL = 1e-9


@dataclass(frozen=True)
class SliceProtocol:
    """Acquisition geometry. Spacing between SAX planes is thickness + gap."""

    n_sax: int = 10
    slice_thickness_mm: float = 8.0
    slice_gap_mm: float = 2.0
    basal_fraction: float = 0.9
    landmark_jitter_sd_mm: float = 1.0
    lax_azimuths_deg: tuple = (60.0, 150.0)
    n_contour_points: int = 64

    def __post_init__(self):
        if self.n_sax < 1:
            raise InvalidArgumentError("n_sax must be >= 1")
        if self.slice_thickness_mm <= 0 or self.slice_gap_mm < 0:
            raise InvalidArgumentError("slice thickness/gap out of range")
        if not (0.0 < self.basal_fraction <= 1.0):
            raise InvalidArgumentError("basal_fraction must be in (0, 1]")
        if self.landmark_jitter_sd_mm < 0:
            raise InvalidArgumentError("landmark jitter SD must be >= 0")
        if len(self.lax_azimuths_deg) != 2:
            raise InvalidArgumentError("exactly two LAX azimuths expected")
        if self.n_contour_points < 8:
            raise InvalidArgumentError("n_contour_points must be >= 8")

    @property
    def sax_spacing_mm(self) -> float:
        return self.slice_thickness_mm + self.slice_gap_mm


def _unit(vec: np.ndarray, name: str) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    n = np.linalg.norm(v)
    if v.shape != (3,) or not np.isfinite(n) or n < 1e-12:
        raise InvalidArgumentError(f"{name} must be a finite nonzero 3-vector")
    return v / n


@dataclass(frozen=True)
class SlicePlane:
    """Oriented plane with an in-plane right-handed basis (u, v, normal)."""

    origin: np.ndarray
    normal: np.ndarray
    u: np.ndarray
    v: np.ndarray
    kind: str
    index: int

    def __post_init__(self):
        object.__setattr__(self, "origin",
                           np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "normal", _unit(self.normal, "normal"))
        object.__setattr__(self, "u", _unit(self.u, "u"))
        object.__setattr__(self, "v", _unit(self.v, "v"))
        if self.kind not in ("SAX", "LAX_2CH", "LAX_4CH"):
            raise InvalidArgumentError(f"unknown plane kind {self.kind!r}")
        for a, b, names in ((self.u, self.v, "u,v"),
                            (self.u, self.normal, "u,normal"),
                            (self.v, self.normal, "v,normal")):
            if abs(float(a @ b)) > 1e-10:
                raise InvalidArgumentError(f"basis not orthogonal: {names}")
        if np.linalg.norm(np.cross(self.u, self.v) - self.normal) > 1e-10:
            raise InvalidArgumentError("basis must satisfy u x v = normal")
        for arr in (self.origin, self.normal, self.u, self.v):
            arr.setflags(write=False)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.origin) @ self.normal

    def to_plane_coords(self, points: np.ndarray) -> np.ndarray:
        rel = np.asarray(points, dtype=np.float64) - self.origin
        return np.stack([rel @ self.u, rel @ self.v], axis=1)

    def from_plane_coords(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return self.origin + xy[:, :1] * self.u + xy[:, 1:2] * self.v

    def as_dict(self) -> dict:
        return {
            "origin": self.origin.tolist(),
            "normal": self.normal.tolist(),
            "u": self.u.tolist(),
            "v": self.v.tolist(),
            "kind": self.kind,
            "index": self.index,
        }


def _polyline_self_intersects(xy: np.ndarray) -> bool:
    """Proper crossing test between non-adjacent segments of a closed loop."""
    n = xy.shape[0]
    a = xy
    b = xy[(np.arange(n) + 1) % n]

    def orient(p, q, r):
        # p, q broadcast as (n,1,2) rows; r as (1,n,2) columns
        return ((q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1])
                - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0]))

    p1, p2 = a[:, None, :], b[:, None, :]
    p3, p4 = a[None, :, :], b[None, :, :]
    d1 = orient(p3, p4, p1)
    d2 = orient(p3, p4, p2)
    d3 = orient(p1, p2, p3)
    d4 = orient(p1, p2, p4)
    crossing = ((d1 > 0) != (d2 > 0)) & ((d3 > 0) != (d4 > 0))
    idx = np.arange(n)
    adjacent = (idx[:, None] == idx[None, :]) \
        | (idx[:, None] == (idx[None, :] + 1) % n) \
        | ((idx[:, None] + 1) % n == idx[None, :])
    return bool(np.any(crossing & ~adjacent))


@dataclass(frozen=True)
class Contour:
    """Ordered closed polyline (implicit last-to-first edge) in one plane."""

    points: np.ndarray
    cls: AnatomicalClass
    plane: SlicePlane

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 8:
            raise InvalidContourError("contour needs >= 8 points of shape (M, 3)")
        if not np.all(np.isfinite(pts)):
            raise InvalidContourError("contour contains non-finite points")
        resid = np.abs(self.plane.signed_distance(pts))
        if float(resid.max()) > _PLANE_TOL:
            raise InvalidContourError(
                f"contour off-plane by {resid.max():.3e} mm")
        steps = np.linalg.norm(np.diff(pts, axis=0, append=pts[:1]), axis=1)
        if float(steps.min()) < 1e-12:
            raise InvalidContourError("contour has duplicate consecutive points")
        if _polyline_self_intersects(self.plane.to_plane_coords(pts)):
            raise InvalidContourError("contour self-intersects in plane coords")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "cls", AnatomicalClass(self.cls))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class MisalignmentLevel:
    name: str
    translation_sd: float
    rotation_sd: float


MISALIGNMENT_LEVELS = {
    "none": MisalignmentLevel("none", 0.0, 0.0),
    "mild": MisalignmentLevel("mild", 1.5, 0.5),
    "medium": MisalignmentLevel("medium", 2.5, 1.5),
    "strong": MisalignmentLevel("strong", 3.5, 2.5),
    "severe": MisalignmentLevel("severe", 5.0, 3.5),
}
LEVEL_ORDER = ("none", "mild", "medium", "strong", "severe")


def misalignment_level(name: str) -> MisalignmentLevel:
    try:
        return MISALIGNMENT_LEVELS[str(name).lower()]
    except KeyError:
        raise InvalidArgumentError(
            f"unknown misalignment level {name!r}; "
            f"expected one of {LEVEL_ORDER}") from None


@dataclass(frozen=True)
class SparseSample:
    """Misaligned acquisition of one anatomy, pooled to fixed size.

    cloud is the network-ready point cloud (n_per_class points per class,
    pooled with replacement). slice_points/slice_labels keep the per-slice
    misaligned contours (one entry per plane, possibly empty) so slice
    structure stays available for scoring.
    """

    cloud: LabeledPointCloud
    slice_points: tuple
    slice_labels: tuple
    transforms: tuple
    pivots: tuple
    planes: tuple
    level: MisalignmentLevel
    gt_cloud: LabeledPointCloud | None = None
    split: str | None = None

    @property
    def phase(self) -> Phase:
        return self.cloud.phase


def plan_slices(sample: ShapeSample, protocol: SliceProtocol | None = None,
                rng: np.random.Generator | None = None) -> list:
    """Slice planes for one acquisition.

    The long axis runs from the LV endo apex (vertex farthest from the basal
    rim centroid) to the rim centroid; both landmarks get N(0, jitter_sd)
    noise per coordinate (apex drawn first). The SAX stack is normal to the
    jittered axis, topmost plane at basal_fraction of the axis length,
    stepping toward the apex; the two LAX planes contain the jittered axis at
    the protocol azimuths measured from the SAX u basis vector.
    """
    protocol = protocol or SliceProtocol()
    rng = rng if rng is not None else np.random.default_rng(0)
    endo = sample.mesh(AnatomicalClass.LV_ENDO)
    loops = boundary_loop_vertices(endo)
    if len(loops) != 1:
        raise InvalidArgumentError(
            f"LV endo surface must have exactly 1 basal rim, found {len(loops)}")
    base = endo.vertices[loops[0]].mean(axis=0)
    dists = np.linalg.norm(endo.vertices - base, axis=1)
    apex = endo.vertices[int(np.argmax(dists))]
    if np.linalg.norm(base - apex) < 1e-9:
        raise InvalidArgumentError("degenerate landmarks: apex equals base")
    apex = apex + protocol.landmark_jitter_sd_mm * rng.standard_normal(3)
    base = base + protocol.landmark_jitter_sd_mm * rng.standard_normal(3)
    axis = base - apex
    length = float(np.linalg.norm(axis))
    if length < 1e-9:
        raise InvalidArgumentError("degenerate landmarks: apex equals base")
    z = axis / length
    ref = np.array([1.0, 0.0, 0.0]) if abs(z[0]) <= 0.9 else np.array([0.0, 1.0, 0.0])
    u0 = np.cross(z, ref)
    u0 /= np.linalg.norm(u0)
    v0 = np.cross(z, u0)

    planes = []
    top = protocol.basal_fraction * length
    for i in range(protocol.n_sax):
        origin = apex + (top - i * protocol.sax_spacing_mm) * z
        planes.append(SlicePlane(origin, z, u0, v0, "SAX", len(planes)))
    mid = 0.5 * (apex + base)
    for kind, az_deg in zip(("LAX_2CH", "LAX_4CH"), protocol.lax_azimuths_deg):
        az = np.deg2rad(az_deg)
        d = np.cos(az) * u0 + np.sin(az) * v0
        normal = np.cross(d, z)
        normal /= np.linalg.norm(normal)
        planes.append(SlicePlane(mid, normal, d, z, kind, len(planes)))
    return planes


def _intersect_at_offset(verts, faces, plane: SlicePlane, offset: float):
    """One plane-mesh intersection attempt; None signals a degenerate cut."""
    d = plane.signed_distance(verts) - offset
    if float(np.abs(d).min()) < 1e-12:
        return None
    below = d < 0
    crossing = faces[np.sum(below[faces], axis=1) % 3 != 0]

    def edge_key(a, b):
        return (a, b) if a < b else (b, a)

    point_cache = {}

    def edge_point(a, b):
        key = edge_key(a, b)
        if key not in point_cache:
            ka, kb = key
            t = d[ka] / (d[ka] - d[kb])
            point_cache[key] = verts[ka] + t * (verts[kb] - verts[ka])
        return point_cache[key]

    segments = []
    for tri in crossing:
        keys = []
        for e in range(3):
            a, b = int(tri[e]), int(tri[(e + 1) % 3])
            if below[a] != below[b]:
                edge_point(a, b)
                keys.append(edge_key(a, b))
        if len(keys) != 2:
            return None
        segments.append(tuple(keys))

    adjacency = {}
    for ka, kb in segments:
        adjacency.setdefault(ka, []).append(kb)
        adjacency.setdefault(kb, []).append(ka)
    if any(len(nb) > 2 for nb in adjacency.values()):
        return None

    visited = set()
    chains = []
    endpoints = sorted(k for k, nb in adjacency.items() if len(nb) == 1)
    starts = endpoints + sorted(adjacency)
    for start in starts:
        if start in visited:
            continue
        chain = [start]
        visited.add(start)
        while True:
            nxt = [k for k in adjacency[chain[-1]] if k not in visited]
            if not nxt:
                break
            nxt = sorted(nxt)[0]
            chain.append(nxt)
            visited.add(nxt)
        chains.append(np.array([point_cache[k] for k in chain]))
    return chains


def slice_contours(mesh: TriMesh, plane: SlicePlane) -> list:
    """Intersect one class surface with a plane; ordered closed contours.

    Open chains (the cut crossing the basal rim) are closed with an implicit
    straight chord. Degenerate cuts (a vertex exactly on the plane) retry
    with the plane offset by +-1e-6 mm, re-projecting the result onto the
    nominal plane; loops under 8 points are sub-resolution slivers and are
    dropped.
    """
    chains = None
    for offset in (0.0, 1e-6, -1e-6):
        chains = _intersect_at_offset(mesh.vertices, mesh.faces, plane, offset)
        if chains is not None:
            break
    if chains is None:
        raise SlicingError(
            f"degenerate plane-mesh intersection persists for plane "
            f"{plane.kind}#{plane.index}")

    contours = []
    for pts in chains:
        if pts.shape[0] < 8:
            continue
        pts = pts - np.outer(plane.signed_distance(pts), plane.normal)
        xy = plane.to_plane_coords(pts)
        area = 0.5 * float(np.sum(xy[:, 0] * np.roll(xy[:, 1], -1)
                                  - np.roll(xy[:, 0], -1) * xy[:, 1]))
        if area < 0.0:
            pts = pts[::-1]
            xy = xy[::-1]
        start = int(np.lexsort((xy[:, 1], xy[:, 0]))[0])
        pts = np.roll(pts, -start, axis=0)
        contours.append(Contour(pts, mesh.cls, plane))
    return contours


def resample_contour_bspline(contour: Contour, n_out: int,
                             smoothing: float | None = None) -> Contour:
    """Periodic cubic least-squares B-spline fit, resampled at equal arc length.

    The smoothing budget defaults to a near-interpolating 1e-6 mm^2 per point,
    so clean contours are followed closely. A fit whose residual at the data
    sites exceeds 2 mm signals a corrupt contour.
    """
    if n_out < 8:
        raise InvalidArgumentError("n_out must be >= 8")
    xy = contour.plane.to_plane_coords(contour.points)
    closed = np.vstack([xy, xy[:1]])
    s = smoothing if smoothing is not None else len(closed) * 1e-6
    try:
        tck, u = splprep([closed[:, 0], closed[:, 1]], per=1, k=3, s=s, quiet=1)
    except (ValueError, TypeError) as exc:
        raise FitFailureError(f"periodic spline fit failed: {exc}") from exc
    fx, fy = splev(u, tck)
    resid = np.hypot(fx - closed[:, 0], fy - closed[:, 1])
    if float(resid.max()) > 2.0:
        raise FitFailureError(
            f"spline fit residual {resid.max():.2f} mm exceeds 2 mm")

    dense = 4096
    uu = np.linspace(0.0, 1.0, dense + 1)
    dx, dy = splev(uu, tck)
    curve = np.stack([dx, dy], axis=1)
    steps = np.linalg.norm(np.diff(curve, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(steps)])
    targets = arc[-1] * np.arange(n_out) / n_out
    u_new = np.interp(targets, arc, uu)
    rx, ry = splev(u_new, tck)
    pts = contour.plane.from_plane_coords(np.stack([rx, ry], axis=1))
    return Contour(pts, contour.cls, contour.plane)


def sample_misalignment(level: MisalignmentLevel,
                        rng: np.random.Generator) -> RigidTransform:
    """Six i.i.d. zero-mean normal parameters: translations xyz, then
    rotations xyz. Zero SDs (level none) give the identity exactly while
    consuming the same number of draws."""
    t = rng.normal(0.0, level.translation_sd, 3)
    angles = rng.normal(0.0, level.rotation_sd, 3)
    return RigidTransform(rotation_deg=angles, translation=t)


def _extract_slice(sample: ShapeSample, plane: SlicePlane,
                   n_contour_points: int):
    # An unusable cross-section (self-crossing near a thin RV horn, or a fit
    # that will not converge) drops that class from this slice, like an
    # uninterpretable acquisition; class coverage is enforced globally later.
    pts_list, lbl_list = [], []
    for cls in ALL_CLASSES:
        try:
            contours = slice_contours(sample.mesh(cls), plane)
        except (InvalidContourError, FitFailureError):
            continue
        for contour in contours:
            try:
                res = resample_contour_bspline(contour, n_contour_points)
            except (InvalidContourError, FitFailureError):
                continue
            pts_list.append(res.points)
            lbl_list.append(np.full(len(res), int(cls), dtype=np.uint8))
    if not pts_list:
        return np.empty((0, 3)), np.empty(0, dtype=np.uint8)
    return np.vstack(pts_list), np.concatenate(lbl_list)


def assemble_sparse(sample: ShapeSample, planes, level: MisalignmentLevel,
                    rng: np.random.Generator, n_per_class: int,
                    n_contour_points: int = 64) -> SparseSample:
    """Slice, misalign per slice, pool to a fixed-size labeled cloud.

    One transform is drawn per plane (in plane order, even for empty cuts, so
    the draw stream does not depend on anatomy) and applied to all of that
    slice's contours about their common centroid. Pooled per-class points are
    then resampled with replacement to exactly n_per_class each.
    """
    if n_per_class < 1:
        raise InvalidArgumentError("n_per_class must be >= 1")
    slice_pts, slice_lbls, transforms, pivots = [], [], [], []
    for plane in planes:
        pts, lbls = _extract_slice(sample, plane, n_contour_points)
        tf = sample_misalignment(level, rng)
        if len(pts):
            pivot = pts.mean(axis=0)
            moved = tf.apply(pts, pivot)
        else:
            pivot = np.zeros(3)
            moved = pts
        slice_pts.append(moved)
        slice_lbls.append(lbls)
        transforms.append(tf)
        pivots.append(pivot)

    all_pts = np.vstack(slice_pts)
    all_lbls = np.concatenate(slice_lbls)
    out_pts, out_lbls = [], []
    for cls in ALL_CLASSES:
        pool = all_pts[all_lbls == int(cls)]
        if pool.shape[0] == 0:
            raise InvalidSampleError(
                f"class {cls.name} absent from every slice")
        idx = rng.integers(0, pool.shape[0], n_per_class)
        out_pts.append(pool[idx])
        out_lbls.append(np.full(n_per_class, int(cls), dtype=np.uint8))
    cloud = LabeledPointCloud(np.vstack(out_pts), np.concatenate(out_lbls),
                              sample.phase)
    return SparseSample(cloud=cloud,
                        slice_points=tuple(slice_pts),
                        slice_labels=tuple(slice_lbls),
                        transforms=tuple(transforms),
                        pivots=tuple(np.asarray(p) for p in pivots),
                        planes=tuple(planes),
                        level=level)


def misalignment_score(sample: SparseSample) -> float:
    """Mean nearest-neighbor distance from each slice's points to the union
    of all other slices' points."""
    slices = [p for p in sample.slice_points if p.shape[0] > 0]
    if len(slices) < 2:
        raise InvalidArgumentError("misalignment score needs >= 2 slices")
    dists = []
    for i, pts in enumerate(slices):
        others = np.vstack([s for j, s in enumerate(slices) if j != i])
        d, _ = NearestNeighborIndex(others).query(pts)
        dists.append(d)
    return float(np.mean(np.concatenate(dists)))


@dataclass(frozen=True)
class DatasetConfig:
    """Dataset generation parameters; splits are by shape at 80/5/15."""

    out_dir: str
    level_name: str = "medium"
    n_shapes: int = 100
    transforms_per_shape: int = 2
    seed: int = 0
    k_modes: int = 10
    n_per_class: int = 400
    p_gt_per_class: int = 768
    n_contour_points: int = 64
    phases: tuple = (Phase.ED, Phase.ES)
    protocol: SliceProtocol = field(default_factory=SliceProtocol)

    def __post_init__(self):
        misalignment_level(self.level_name)
        if self.n_shapes < 1 or self.transforms_per_shape < 1:
            raise InvalidArgumentError("n_shapes and transforms_per_shape >= 1")
        if self.n_shapes * self.transforms_per_shape * 0.05 < 1.0:
            raise SplitError(
                "dataset too small: n_shapes * transforms_per_shape * 0.05 < 1")

    def split_counts(self) -> dict:
        n_train = round(0.8 * self.n_shapes)
        n_val = max(1, round(0.05 * self.n_shapes))
        n_test = self.n_shapes - n_train - n_val
        if min(n_train, n_val, n_test) < 1:
            raise SplitError(
                f"splits {n_train}/{n_val}/{n_test} need >= 1 shape each")
        return {"train": n_train, "val": n_val, "test": n_test}


def _split_of_shape(shape_idx: int, counts: dict) -> str:
    if shape_idx < counts["train"]:
        return "train"
    if shape_idx < counts["train"] + counts["val"]:
        return "val"
    return "test"


def _write_sample(directory: str, sparse: SparseSample, meta: dict) -> None:
    os.makedirs(directory, exist_ok=True)
    ply_io.write_labeled_cloud(os.path.join(directory, "sparse.ply"),
                               sparse.cloud)
    ply_io.write_labeled_cloud(os.path.join(directory, "gt.ply"),
                               sparse.gt_cloud)
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, "contours.json"), "w") as fh:
        json.dump(_contour_records(sparse), fh, sort_keys=True)
        fh.write("\n")


def _contour_records(sparse: SparseSample) -> list:
    """Per-slice ordered contour points, keyed by class, in acquisition pose.

    The pooled cloud loses slice identity, so disk-summation volume
    estimates need this sidecar.
    """
    records = []
    for plane, pts, labels in zip(sparse.planes, sparse.slice_points,
                                  sparse.slice_labels):
        by_class = {}
        for c in AnatomicalClass:
            sel = np.asarray(labels) == int(c)
            if np.any(sel):
                by_class[str(int(c))] = np.asarray(pts)[sel].tolist()
        records.append({"kind": plane.kind, "points_by_class": by_class})
    return records


def load_slice_contours(directory: str) -> list:
    """Read back contours.json: [{kind, points_by_class: {class: (N,3)}}]."""
    with open(os.path.join(directory, "contours.json")) as fh:
        records = json.load(fh)
    for rec in records:
        rec["points_by_class"] = {
            int(k): np.asarray(v, dtype=np.float64)
            for k, v in rec["points_by_class"].items()}
    return records


def _generate_one(cfg: DatasetConfig, template, modes, level, counts,
                  shape_idx: int, phase: Phase, replica: int) -> dict:
    phase_i = 0 if phase == Phase.ED else 1
    shape = sample_shape(template, modes, phase,
                         rng_for(cfg.seed, STAGE_SHAPE, shape_idx, phase_i))
    gt = mesh_to_ground_truth_cloud(shape, cfg.p_gt_per_class)
    planes = plan_slices(shape, cfg.protocol,
                         rng_for(cfg.seed, STAGE_PLANES, shape_idx, phase_i,
                                 replica))
    sparse = assemble_sparse(shape, planes, level,
                             rng_for(cfg.seed, STAGE_MISALIGN, shape_idx,
                                     phase_i, replica),
                             cfg.n_per_class, cfg.n_contour_points)
    split = _split_of_shape(shape_idx, counts)
    sparse = replace(sparse, gt_cloud=gt, split=split)
    sample_id = f"s{shape_idx:04d}_{phase.value.lower()}_r{replica}"
    rel_dir = os.path.join(level.name, split, sample_id)
    meta = {
        "sample_id": sample_id,
        "shape_index": shape_idx,
        "phase": phase.value,
        "replica": replica,
        "split": split,
        "level": {"name": level.name,
                  "translation_sd": level.translation_sd,
                  "rotation_sd": level.rotation_sd},
        "seeds": {
            "master": cfg.seed,
            "shape_stream": [STAGE_SHAPE, shape_idx, phase_i],
            "plane_stream": [STAGE_PLANES, shape_idx, phase_i, replica],
            "misalign_stream": [STAGE_MISALIGN, shape_idx, phase_i, replica],
        },
        "counts": {"n_per_class": cfg.n_per_class,
                   "p_gt_per_class": cfg.p_gt_per_class,
                   "n_contour_points": cfg.n_contour_points},
        "coefficients": [float(v) for v in shape.z],
        "transforms": [
            {"rotation_deg": t.rotation_deg.tolist(),
             "translation": t.translation.tolist(),
             "pivot": p.tolist()}
            for t, p in zip(sparse.transforms, sparse.pivots)],
        "planes": [p.as_dict() for p in sparse.planes],
        "misalignment_score": misalignment_score(sparse),
    }
    _write_sample(os.path.join(cfg.out_dir, rel_dir), sparse, meta)
    return {"sample_id": sample_id, "path": rel_dir, "split": split,
            "shape_index": shape_idx, "phase": phase.value, "replica": replica,
            "seeds": meta["seeds"]}


def generate_dataset(cfg: DatasetConfig, n_workers: int = 1,
                     splits: tuple | None = None) -> dict:
    """Write the dataset tree and return its manifest.

    Layout: out_dir/{level}/{split}/{sample_id}/{sparse.ply, gt.ply,
    meta.json, contours.json} plus out_dir/{level}/manifest.json. All
    randomness is drawn from streams keyed by (master seed, stage, shape,
    phase, replica), so the output is identical for any worker count and a
    sample is bitwise independent of which splits are materialized. splits
    restricts generation to a subset (e.g. ("test",) for an extra
    evaluation-only misalignment level); None writes all three.
    """
    level = misalignment_level(cfg.level_name)
    counts = cfg.split_counts()
    if splits is None:
        splits = ("train", "val", "test")
    if not set(splits) <= {"train", "val", "test"}:
        raise InvalidArgumentError(f"unknown split names in {splits!r}")
    template = build_template()
    modes = generate_modes(template, k_modes=cfg.k_modes, seed=cfg.seed)
    tasks = [(shape_idx, phase, replica)
             for shape_idx in range(cfg.n_shapes)
             for phase in cfg.phases
             for replica in range(cfg.transforms_per_shape)
             if _split_of_shape(shape_idx, counts) in splits]
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            rows = list(pool.map(
                lambda t: _generate_one(cfg, template, modes, level, counts, *t),
                tasks))
    else:
        rows = [_generate_one(cfg, template, modes, level, counts, *t)
                for t in tasks]
    manifest = {
        "level": level.name,
        "seed": cfg.seed,
        "n_shapes": cfg.n_shapes,
        "transforms_per_shape": cfg.transforms_per_shape,
        "phases": [p.value for p in cfg.phases],
        "split_shape_counts": counts,
        "splits_materialized": sorted(splits),
        "split_sample_counts": {
            s: sum(1 for r in rows if r["split"] == s)
            for s in ("train", "val", "test")},
        "counts": {"n_per_class": cfg.n_per_class,
                   "p_gt_per_class": cfg.p_gt_per_class,
                   "n_contour_points": cfg.n_contour_points},
        "samples": rows,
    }
    level_dir = os.path.join(cfg.out_dir, level.name)
    os.makedirs(level_dir, exist_ok=True)
    with open(os.path.join(level_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_sparse_sample(directory: str):
    """Read back one dataset sample: (sparse cloud, gt cloud, meta dict)."""
    sparse = ply_io.read_labeled_cloud(os.path.join(directory, "sparse.ply"))
    gt = ply_io.read_labeled_cloud(os.path.join(directory, "gt.ply"))
    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    return sparse, gt, meta
