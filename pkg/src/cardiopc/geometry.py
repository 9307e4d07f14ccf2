"""Core geometric types, rigid transforms, nearest-neighbor search, and
point-set surface distance metrics.

Conventions used throughout the package:
  * coordinates are millimeters, float64, shape (N, 3)
  * anatomical classes are encoded 0 = LV endocardium, 1 = LV epicardium,
    2 = RV endocardium
  * all value types are immutable after construction; arrays handed to a
    constructor are copied and marked read-only
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidArgumentError


class AnatomicalClass(IntEnum):
    LV_ENDO = 0
    LV_EPI = 1
    RV_ENDO = 2


ALL_CLASSES = (AnatomicalClass.LV_ENDO, AnatomicalClass.LV_EPI, AnatomicalClass.RV_ENDO)


class Phase(str, Enum):
    ED = "ED"
    ES = "ES"


def _as_points(obj, name: str = "points") -> np.ndarray:
    """Validate and return an (N, 3) float64 array of finite coordinates."""
    arr = np.asarray(obj, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidArgumentError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise InvalidArgumentError(f"{name} must be nonempty")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Point3:
    """A single 3D point in millimeters."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(np.isfinite(v) for v in (self.x, self.y, self.z)):
            raise InvalidArgumentError("Point3 coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "Point3":
        a = np.asarray(arr, dtype=np.float64).reshape(3)
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class LabeledPointCloud:
    """Points with per-point anatomical class labels and a cardiac phase.

    Attributes:
        points: (N, 3) float64, millimeters. Read-only copy of the input.
        labels: (N,) uint8 with values in {0, 1, 2}.
        phase: cardiac phase the cloud belongs to (ED or ES).
    """

    points: np.ndarray
    labels: np.ndarray
    phase: Phase

    def __post_init__(self):
        pts = _as_points(self.points)
        lab = np.asarray(self.labels)
        if lab.shape != (pts.shape[0],):
            raise InvalidArgumentError(
                f"labels must have shape ({pts.shape[0]},), got {lab.shape}"
            )
        if lab.size and (lab.min() < 0 or lab.max() > 2):
            raise InvalidArgumentError("labels must be in {0, 1, 2}")
        lab = lab.astype(np.uint8)
        lab.setflags(write=False)
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "phase", Phase(self.phase))

    def __len__(self) -> int:
        return self.points.shape[0]

    def class_points(self, cls: AnatomicalClass) -> np.ndarray:
        """Points belonging to one anatomical class (possibly empty)."""
        return self.points[self.labels == int(cls)]

    def class_counts(self) -> dict:
        return {c: int(np.sum(self.labels == int(c))) for c in ALL_CLASSES}

    @property
    def has_all_classes(self) -> bool:
        return all(n > 0 for n in self.class_counts().values())


def _rotation_matrix(rotation_deg: np.ndarray) -> np.ndarray:
    """3x3 rotation for intrinsic x-y-z Euler angles in degrees.

    The composite is R = Rx @ Ry @ Rz, applied to column vectors. Equivalent
    extrinsic reading: rotate about fixed z, then y, then x.
    """
    ax, ay, az = np.deg2rad(np.asarray(rotation_deg, dtype=np.float64))
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]], dtype=np.float64)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]], dtype=np.float64)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]], dtype=np.float64)
    return rx @ ry @ rz


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (degrees about x, y, z; intrinsic, applied x then y then z)
    plus translation (mm), rotating about a caller-supplied pivot point."""

    rotation_deg: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation_deg, dtype=np.float64).reshape(3)
        tra = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(tra))):
            raise InvalidArgumentError("transform parameters must be finite")
        object.__setattr__(self, "rotation_deg", _frozen(rot))
        object.__setattr__(self, "translation", _frozen(tra))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.zeros(3), np.zeros(3))

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.rotation_deg == 0.0) and np.all(self.translation == 0.0))

    def matrix(self) -> np.ndarray:
        return _rotation_matrix(self.rotation_deg)

    def apply(self, points: np.ndarray, pivot: np.ndarray) -> np.ndarray:
        """p' = R (p - pivot) + pivot + t"""
        pts = _as_points(points)
        piv = np.asarray(pivot, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(piv)):
            raise InvalidArgumentError("pivot must be finite")
        return (pts - piv) @ self.matrix().T + piv + self.translation

    def apply_inverse(self, points: np.ndarray, pivot: np.ndarray) -> np.ndarray:
        """Exact inverse of apply() about the same pivot."""
        pts = _as_points(points)
        piv = np.asarray(pivot, dtype=np.float64).reshape(3)
        return (pts - piv - self.translation) @ self.matrix() + piv


def apply_rigid(transform: RigidTransform, cloud: LabeledPointCloud,
                pivot: np.ndarray) -> LabeledPointCloud:
    """Apply a rigid transform to every point of a labeled cloud.

    Labels and phase are preserved; only coordinates change.
    """
    moved = transform.apply(cloud.points, pivot)
    return LabeledPointCloud(moved, cloud.labels, cloud.phase)


class NearestNeighborIndex:
    """KD-tree nearest-neighbor index that exactly reproduces a linear scan.

    Distances are recomputed with the same expression a linear scan would use,
    and ties on the minimum distance resolve to the lowest point index, so
    results are bitwise identical to the brute-force reference regardless of
    tree internals.
    """

    def __init__(self, points):
        pts = _as_points(points)
        self._points = _frozen(pts)
        self._tree = cKDTree(self._points)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def __len__(self) -> int:
        return self._points.shape[0]

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest reference point for each query.

        Returns:
            (distances, indices): float64 (M,) Euclidean distances and the
            int64 (M,) indices of the nearest reference points.
        """
        q = _as_points(queries, "queries")
        n = self._points.shape[0]
        if n == 1:
            idx = np.zeros(q.shape[0], dtype=np.int64)
        else:
            d2, i2 = self._tree.query(q, k=2)
            idx = i2[:, 0].astype(np.int64)
            # Where the two best tree distances coincide the tree's winner is
            # arbitrary; re-resolve those queries against the full candidate
            # ball so the lowest index wins, as argmin over a scan would.
            tied = np.nonzero(d2[:, 1] <= d2[:, 0] * (1.0 + 1e-12))[0]
            for row in tied:
                r = d2[row, 0] * (1.0 + 1e-9) + 1e-300
                cand = sorted(self._tree.query_ball_point(q[row], r))
                cd = np.sqrt(np.sum((self._points[cand] - q[row]) ** 2, axis=1))
                idx[row] = cand[int(np.argmin(cd))]
        dist = np.sqrt(np.sum((self._points[idx] - q) ** 2, axis=1))
        return dist, idx


def _directed_nn_distances(src: np.ndarray, dst_index: NearestNeighborIndex) -> np.ndarray:
    return dst_index.query(src)[0]


def chamfer_distance(points_a, points_b) -> float:
    """Symmetric Chamfer distance between two point sets.

    Mean Euclidean (not squared) nearest-neighbor distance in each direction,
    averaged: 0.5 * (mean_a min_b ||a-b|| + mean_b min_a ||b-a||). Exactly
    symmetric in its arguments.
    """
    a = _as_points(points_a, "points_a")
    b = _as_points(points_b, "points_b")
    d_ab = _directed_nn_distances(a, NearestNeighborIndex(b))
    d_ba = _directed_nn_distances(b, NearestNeighborIndex(a))
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def hausdorff_distance(points_a, points_b) -> float:
    """Symmetric Hausdorff distance: max over both directed max-min distances."""
    a = _as_points(points_a, "points_a")
    b = _as_points(points_b, "points_b")
    d_ab = _directed_nn_distances(a, NearestNeighborIndex(b))
    d_ba = _directed_nn_distances(b, NearestNeighborIndex(a))
    return max(float(np.max(d_ab)), float(np.max(d_ba)))


def mean_surface_distance(points_a, points_b) -> float:
    """Symmetric mean surface distance: average of the two directed means."""
    a = _as_points(points_a, "points_a")
    b = _as_points(points_b, "points_b")
    d_ab = _directed_nn_distances(a, NearestNeighborIndex(b))
    d_ba = _directed_nn_distances(b, NearestNeighborIndex(a))
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def per_class_metric(metric, cloud_a: LabeledPointCloud,
                     cloud_b: LabeledPointCloud) -> dict:
    """Evaluate a two-point-set metric separately for each anatomical class.

    Raises InvalidArgumentError if either cloud is missing a class, since a
    silently skipped class would bias any downstream average.
    """
    out = {}
    for c in ALL_CLASSES:
        pa = cloud_a.class_points(c)
        pb = cloud_b.class_points(c)
        if pa.shape[0] == 0 or pb.shape[0] == 0:
            raise InvalidArgumentError(f"class {c.name} missing from one cloud")
        out[c] = metric(pa, pb)
    return out


def averaged_over_classes(metric, cloud_a: LabeledPointCloud,
                          cloud_b: LabeledPointCloud) -> float:
    """Uniform (unweighted) average of a per-class metric over all classes."""
    vals = per_class_metric(metric, cloud_a, cloud_b)
    return float(sum(vals[c] for c in ALL_CLASSES) / len(ALL_CLASSES))


def icosphere(radius: float, subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Geodesic sphere mesh: subdivided icosahedron projected to the sphere.

    Returns (vertices, faces) with outward-wound faces. Subdivision s gives
    20·4^s faces.
    """
    if radius <= 0:
        raise InvalidArgumentError("radius must be positive")
    if subdivisions < 0 or subdivisions > 7:
        raise InvalidArgumentError("subdivisions must be in [0, 7]")
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts[0])
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(verts)
    for _ in range(subdivisions):
        midpoint: dict = {}

        def mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius
    f = np.array(faces, dtype=np.int64)
    # force outward winding regardless of the seed table's convention
    tri = v[f]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    centroid = tri.mean(axis=1)
    flip = np.einsum("ij,ij->i", n, centroid) < 0
    f[flip] = f[flip][:, [0, 2, 1]]
    return v, f


def sample_mesh_surface(vertices, faces, n_points: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Draw points uniformly by area from a triangle mesh surface.

    Faces are chosen with probability proportional to area, then a uniform
    barycentric point is drawn on each chosen face. Deterministic given rng.
    """
    verts = _as_points(vertices, "vertices")
    f = np.asarray(faces, dtype=np.int64)
    if f.ndim != 2 or f.shape[1] != 3 or f.shape[0] == 0:
        raise InvalidArgumentError(f"faces must have shape (F, 3), got {f.shape}")
    if n_points <= 0:
        raise InvalidArgumentError("n_points must be positive")
    tri = verts[f]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    area = 0.5 * np.sqrt(np.sum(cross ** 2, axis=1))
    total = float(np.sum(area))
    if total <= 0.0:
        raise InvalidArgumentError("mesh has zero total surface area")
    chosen = rng.choice(f.shape[0], size=n_points, p=area / total)
    u = rng.random(n_points)
    v = rng.random(n_points)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    t = tri[chosen]
    return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])
