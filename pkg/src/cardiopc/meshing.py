"""Triangle meshes, point-cloud normal estimation, ball-pivoting surface
reconstruction, and topology validation.

Ball pivoting rolls a ball of fixed radius over the point set; a triangle is
created wherever the ball rests on three points without containing any other.
Vertices of the output are always a subset of the input points. The pivoting
front never attaches a third face to an edge, so meshes are edge-manifold by
construction. All processing orders are fixed, so identical inputs yield
identical face lists.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidArgumentError, MeshingFailureError
from .geometry import AnatomicalClass, _as_points, _frozen

# triangles thinner than this are never emitted by the pivoting front
_MIN_FACE_AREA = 1e-6  # mm^2


@dataclass(frozen=True)
class TriMesh:
    """Immutable triangle mesh with an anatomical class tag.

    Attributes:
        vertices: (N, 3) float64 mm, read-only.
        faces: (F, 3) int64 vertex indices, read-only.
        cls: anatomical class of the surface.
    """

    vertices: np.ndarray
    faces: np.ndarray
    cls: AnatomicalClass

    def __post_init__(self):
        verts = _as_points(self.vertices, "vertices")
        f = np.asarray(self.faces, dtype=np.int64)
        if f.ndim != 2 or f.shape[1] != 3 or f.shape[0] == 0:
            raise InvalidArgumentError(f"faces must have shape (F, 3), got {f.shape}")
        if f.min() < 0 or f.max() >= verts.shape[0]:
            raise InvalidArgumentError("face indices out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise InvalidArgumentError("face with repeated vertex index")
        f.setflags(write=False)
        object.__setattr__(self, "vertices", _frozen(verts))
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "cls", AnatomicalClass(self.cls))

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return 0.5 * np.sqrt(np.sum(cross ** 2, axis=1))


@dataclass(frozen=True)
class TopologyReport:
    """Mesh topology summary.

    boundary_loops is None when the mesh is not edge-manifold, since loop
    counting is only well defined on edge-manifold meshes.
    """

    is_edge_manifold: bool
    is_vertex_manifold: bool
    connected_components: int
    boundary_loops: int | None
    is_oriented: bool

    def as_dict(self) -> dict:
        return {
            "is_edge_manifold": self.is_edge_manifold,
            "is_vertex_manifold": self.is_vertex_manifold,
            "connected_components": self.connected_components,
            "boundary_loops": self.boundary_loops,
            "is_oriented": self.is_oriented,
        }


@dataclass(frozen=True)
class TopologyExpectation:
    """Per-class pass criteria for reconstructed surfaces."""

    boundary_loops: int
    connected_components: int = 1

    def passes(self, report: TopologyReport) -> bool:
        return (report.is_edge_manifold
                and report.is_vertex_manifold
                and report.is_oriented
                and report.connected_components == self.connected_components
                and report.boundary_loops == self.boundary_loops)


# LV surfaces keep the basal opening; the RV surface is closed.
CLASS_EXPECTATIONS = {
    AnatomicalClass.LV_ENDO: TopologyExpectation(boundary_loops=1),
    AnatomicalClass.LV_EPI: TopologyExpectation(boundary_loops=1),
    AnatomicalClass.RV_ENDO: TopologyExpectation(boundary_loops=0),
}


@dataclass(frozen=True)
class BallPivotConfig:
    """Radii are absolute mm, ascending; normal_k is the neighborhood size
    used for normal estimation."""

    radii: tuple
    normal_k: int = 12

    def __post_init__(self):
        radii = tuple(float(r) for r in self.radii)
        if not radii or any(r <= 0 for r in radii):
            raise InvalidArgumentError("radii must be positive")
        if any(b <= a for a, b in zip(radii, radii[1:])):
            raise InvalidArgumentError("radii must be strictly ascending")
        object.__setattr__(self, "radii", radii)


# Multiples of the median nearest-neighbor spacing. The RV crescent thins out
# near its tips, so its passes reach further.
CLASS_RADIUS_FACTORS = {
    AnatomicalClass.LV_ENDO: (1.5, 2.0, 3.0),
    AnatomicalClass.LV_EPI: (1.5, 2.0, 3.0),
    AnatomicalClass.RV_ENDO: (1.5, 2.5, 4.0),
}


def median_nn_spacing(points) -> float:
    """Median distance from each point to its nearest distinct neighbor."""
    pts = _as_points(points)
    if pts.shape[0] < 2:
        raise InvalidArgumentError("need at least 2 points")
    d, _ = cKDTree(pts).query(pts, k=2)
    return float(np.median(d[:, 1]))


def default_config(cls: AnatomicalClass, points) -> BallPivotConfig:
    spacing = median_nn_spacing(points)
    factors = CLASS_RADIUS_FACTORS[AnatomicalClass(cls)]
    return BallPivotConfig(radii=tuple(f * spacing for f in factors))


def smooth_points(points, k: int = 16, passes: int = 3) -> np.ndarray:
    """Project every point onto its k-NN PCA plane, repeatedly.

    Collapses normal-direction scatter (for example the overlapping-patch
    fuzz of a learned dense completion) into a single sheet so that ball
    pivoting sees one surface instead of two. Tangential positions are
    preserved up to the plane fit, so the cloud keeps its coverage.
    """
    pts = _as_points(points).copy()
    if passes < 0 or k < 3:
        raise InvalidArgumentError("passes must be >= 0 and k >= 3")
    if pts.shape[0] < k + 1:
        raise InvalidArgumentError(f"need at least k+1={k + 1} points")
    for _ in range(passes):
        tree = cKDTree(pts)
        _, nbr = tree.query(pts, k=k)
        out = np.empty_like(pts)
        for i in range(pts.shape[0]):
            local = pts[nbr[i]]
            center = local.mean(axis=0)
            vt = np.linalg.svd(local - center, full_matrices=False)[2]
            normal = vt[2]
            out[i] = pts[i] - np.dot(pts[i] - center, normal) * normal
        pts = out
    return pts


def thin_points(points, min_spacing: float) -> np.ndarray:
    """Greedy subset with pairwise spacing >= min_spacing, order-stable.

    Points are visited in index order and a point is dropped when an
    already-kept point lies closer than min_spacing, which caps the local
    density without moving anything. Already well-spaced clouds pass
    through unchanged.
    """
    pts = _as_points(points)
    if min_spacing <= 0:
        raise InvalidArgumentError("min_spacing must be positive")
    tree = cKDTree(pts)
    keep = np.ones(pts.shape[0], dtype=bool)
    for i in range(pts.shape[0]):
        if not keep[i]:
            continue
        for j in tree.query_ball_point(pts[i], min_spacing):
            if j > i and keep[j]:
                keep[j] = False
    return pts[keep]


def estimate_normals(points, k: int = 12) -> np.ndarray:
    """Per-point oriented unit normals from local PCA plane fits.

    The smallest-eigenvalue direction of each point's k-NN covariance gives
    the unoriented normal; orientation is propagated over the k-NN graph in
    BFS order and the whole field is flipped to point away from the centroid
    on average, matching the outward convention of the surface generators.
    """
    pts = _as_points(points)
    n = pts.shape[0]
    if n < k + 1:
        raise InvalidArgumentError(f"need at least k+1={k + 1} points, got {n}")
    tree = cKDTree(pts)
    _, nbr = tree.query(pts, k=k + 1)
    normals = np.empty((n, 3), dtype=np.float64)
    for i in range(n):
        local = pts[nbr[i]] - pts[nbr[i]].mean(axis=0)
        cov = local.T @ local
        w, v = np.linalg.eigh(cov)
        normals[i] = v[:, 0]

    # BFS orientation propagation: each point adopts the sign agreeing with
    # the neighbor it was discovered from.
    visited = np.zeros(n, dtype=bool)
    for start in range(n):
        if visited[start]:
            continue
        visited[start] = True
        queue = deque([start])
        while queue:
            i = queue.popleft()
            for j in nbr[i][1:]:
                if visited[j]:
                    continue
                visited[j] = True
                if np.dot(normals[i], normals[j]) < 0.0:
                    normals[j] = -normals[j]
                queue.append(j)

    centroid = pts.mean(axis=0)
    outward = np.sum(np.einsum("ij,ij->i", normals, pts - centroid))
    if outward < 0.0:
        normals = -normals
    lengths = np.sqrt(np.sum(normals ** 2, axis=1))
    return normals / lengths[:, None]


def _circumcircle(a, b, c_pts):
    """Circumcenter and squared circumradius of triangles (a, b, c_k).

    Vectorized over the candidate third vertices c_pts (K, 3). Returns
    (centers (K,3), r2 (K,), normals (K,3) unnormalized, valid (K,) bool).
    """
    ab = b - a
    ac = c_pts - a
    ab_x_ac = np.cross(ab[None, :], ac)
    denom = 2.0 * np.sum(ab_x_ac ** 2, axis=1)
    valid = denom > 1e-24
    safe = np.where(valid, denom, 1.0)
    ab2 = float(np.dot(ab, ab))
    ac2 = np.sum(ac ** 2, axis=1)
    to_center = (np.cross(ab_x_ac, ab[None, :]) * ac2[:, None]
                 + np.cross(ac, ab_x_ac) * ab2) / safe[:, None]
    centers = a[None, :] + to_center
    r2 = np.sum(to_center ** 2, axis=1)
    return centers, r2, ab_x_ac, valid


class _Front:
    """Pivoting state: face list, per-edge face counts, directed-edge set."""

    def __init__(self, points: np.ndarray):
        self.points = points
        self.faces: list[tuple[int, int, int]] = []
        self.face_set: set[tuple[int, int, int]] = set()
        self.edge_count: dict[tuple[int, int], int] = {}
        self.directed: set[tuple[int, int]] = set()
        self.edge_center: dict[tuple[int, int], np.ndarray] = {}
        self.edge_opposite: dict[tuple[int, int], int] = {}
        self.used = np.zeros(points.shape[0], dtype=bool)

    @staticmethod
    def _und(i: int, j: int) -> tuple[int, int]:
        return (i, j) if i < j else (j, i)

    def can_add(self, i: int, j: int, k: int) -> bool:
        """True if face (i, j, k) keeps the mesh edge-manifold and oriented."""
        if tuple(sorted((i, j, k))) in self.face_set:
            return False
        for a, b in ((i, j), (j, k), (k, i)):
            if self.edge_count.get(self._und(a, b), 0) >= 2:
                return False
            if (a, b) in self.directed:
                return False
        return True

    def add_face(self, i: int, j: int, k: int, center: np.ndarray) -> None:
        self.faces.append((i, j, k))
        self.face_set.add(tuple(sorted((i, j, k))))
        opposite = {(i, j): k, (j, k): i, (k, i): j}
        for a, b in ((i, j), (j, k), (k, i)):
            self.directed.add((a, b))
            self.edge_count[self._und(a, b)] = self.edge_count.get(self._und(a, b), 0) + 1
            self.edge_center[(a, b)] = center
            self.edge_opposite[(a, b)] = opposite[(a, b)]
        self.used[[i, j, k]] = True

    def boundary_directed_edges(self) -> list[tuple[int, int]]:
        out = []
        for (a, b) in self.directed:
            if self.edge_count[self._und(a, b)] == 1:
                out.append((a, b))
        out.sort()
        return out


def _pivot_candidates(front: _Front, tree: cKDTree, a: int, b: int,
                      center: np.ndarray, radius: float):
    """Best (angle, k, new_center) for rolling the ball over directed edge
    (a, b), or None. The new face would be (b, a, k)."""
    pts = front.points
    pa, pb = pts[a], pts[b]
    mid = 0.5 * (pa + pb)
    local = tree.query_ball_point(mid, 3.0 * radius + 1e-9)
    local = np.array(sorted(local), dtype=np.int64)
    opposite = front.edge_opposite[(a, b)]
    cand_mask = (local != a) & (local != b) & (local != opposite)
    cand = local[cand_mask]
    if cand.size == 0:
        return None
    centers, r2, face_n, valid = _circumcircle(pb, pa, pts[cand])
    # face (b, a, k): normal direction cross(pa - pb, pk - pb)
    valid &= r2 <= radius * radius * (1.0 + 1e-12)
    area2 = np.sqrt(np.sum(face_n ** 2, axis=1))
    valid &= 0.5 * area2 > _MIN_FACE_AREA
    if not np.any(valid):
        return None
    h = np.sqrt(np.maximum(radius * radius - r2, 0.0))
    unit_n = face_n / np.where(area2 > 0, area2, 1.0)[:, None]
    ball_centers = centers + unit_n * h[:, None]

    # rotation angle of the ball center around the directed edge
    axis = pb - pa
    axis = axis / np.linalg.norm(axis)
    u0 = center - mid
    u0 = u0 - axis * np.dot(u0, axis)
    u1 = ball_centers - mid
    u1 = u1 - axis[None, :] * (u1 @ axis)[:, None]
    cross = np.cross(np.broadcast_to(u0, u1.shape), u1)
    ang = np.arctan2(cross @ axis, u1 @ u0)
    ang = np.mod(ang, 2.0 * np.pi)
    ang[ang < 1e-12] = 2.0 * np.pi  # a zero pivot would recreate the old face

    # empty-ball test against the local neighborhood
    diff = pts[local][None, :, :] - ball_centers[:, None, :]
    d2 = np.sum(diff ** 2, axis=2)
    limit = (radius - 1e-9) ** 2
    inside = d2 < limit
    # contact points themselves sit on the sphere, not inside; mask them out
    inside[:, (local == a) | (local == b)] = False
    cand_col = {int(c): i for i, c in enumerate(local)}
    for row, k in enumerate(cand):
        inside[row, cand_col[int(k)]] = False
    empty = ~np.any(inside, axis=1)
    valid &= empty

    order = np.lexsort((cand, ang))
    for pos in order:
        if not valid[pos]:
            continue
        k = int(cand[pos])
        if front.can_add(b, a, k):
            return float(ang[pos]), k, ball_centers[pos]
    return None


def _find_seed(front: _Front, tree: cKDTree, normals: np.ndarray,
               radius: float, start: int):
    """First valid seed triangle at or after point index `start`."""
    pts = front.points
    n = pts.shape[0]
    for i in range(start, n):
        if front.used[i]:
            continue
        nbr = tree.query_ball_point(pts[i], 2.0 * radius)
        nbr = [j for j in sorted(nbr) if j != i]
        if len(nbr) < 2:
            continue
        d = np.sqrt(np.sum((pts[nbr] - pts[i]) ** 2, axis=1))
        nbr = [j for _, j in sorted(zip(d, nbr))][:30]
        for x in range(len(nbr)):
            for y in range(x + 1, len(nbr)):
                j, k = nbr[x], nbr[y]
                tri = np.array([k], dtype=np.int64)
                centers, r2, face_n, valid = _circumcircle(pts[i], pts[j], pts[tri])
                if not valid[0] or r2[0] > radius * radius:
                    continue
                nf = face_n[0]
                area2 = np.linalg.norm(nf)
                if 0.5 * area2 <= _MIN_FACE_AREA:
                    continue
                nf = nf / area2
                # wind so the face normal agrees with the vertex normals
                if np.dot(nf, normals[i] + normals[j] + normals[k]) < 0.0:
                    j, k = k, j
                    nf = -nf
                h = float(np.sqrt(max(radius * radius - r2[0], 0.0)))
                center = centers[0] + nf * h
                local = tree.query_ball_point(center, radius - 1e-9)
                if any(p not in (i, j, k) for p in local):
                    continue
                if not front.can_add(i, j, k):
                    continue
                return i, j, k, center
    return None


def _prune_bowties(faces: list) -> list:
    """Drop faces until every vertex's incident faces form a single fan.

    At each offending vertex the fan with the most faces survives (ties go
    to the fan holding the earliest-created face), which removes the thin
    secondary fans the pivoting front can leave on noisy input. Iterates to
    a fixed point because a removal can expose a new bowtie elsewhere.
    """
    faces = list(faces)
    while True:
        vfaces: dict[int, list[int]] = {}
        for fi, tri in enumerate(faces):
            for v in tri:
                vfaces.setdefault(int(v), []).append(fi)
        drop: set[int] = set()
        for v in sorted(vfaces):
            incident = vfaces[v]
            if len(incident) < 2:
                continue
            parent = {f: f for f in incident}

            def find(x):
                while parent[x] != x:
                    parent[x] = parent[parent[x]]
                    x = parent[x]
                return x

            by_other: dict[int, list[int]] = {}
            for f in incident:
                for u in faces[f]:
                    if u != v:
                        by_other.setdefault(int(u), []).append(f)
            for group in by_other.values():
                for f in group[1:]:
                    a, b = find(group[0]), find(f)
                    if a != b:
                        parent[b] = a
            fans: dict[int, list[int]] = {}
            for f in incident:
                fans.setdefault(find(f), []).append(f)
            if len(fans) > 1:
                ranked = sorted(fans.values(),
                                key=lambda fl: (-len(fl), min(fl)))
                for fl in ranked[1:]:
                    drop.update(fl)
        if not drop:
            return faces
        faces = [tri for fi, tri in enumerate(faces) if fi not in drop]


def _largest_component(faces: list) -> list:
    """Faces of the largest vertex-connected component.

    Noisy completions sometimes yield a handful of stray points whose faces
    form a detached satellite; only the main surface is worth keeping. Ties
    go to the component holding the earliest-created face.
    """
    parent: dict[int, int] = {}

    def find(x):
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for tri in faces:
        a = find(int(tri[0]))
        for v in (int(tri[1]), int(tri[2])):
            b = find(v)
            if a != b:
                parent[b] = a
    groups: dict[int, list[int]] = {}
    for fi, tri in enumerate(faces):
        groups.setdefault(find(int(tri[0])), []).append(fi)
    best = min(groups.values(), key=lambda fl: (-len(fl), fl[0]))
    keep = set(best)
    return [tri for fi, tri in enumerate(faces) if fi in keep]


def _boundary_cycles(faces: list) -> list:
    """Closed boundary vertex cycles, traced along directed boundary edges.

    Assumes a vertex-manifold mesh (run _prune_bowties first) so every
    boundary vertex has exactly one outgoing boundary edge. Open chains,
    which cannot appear on manifold meshes, are discarded.
    """
    count: dict[tuple, int] = {}
    directed = set()
    for tri in faces:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (a, b) if a < b else (b, a)
            count[key] = count.get(key, 0) + 1
            directed.add((a, b))
    nxt = {}
    for a, b in sorted(directed):
        key = (a, b) if a < b else (b, a)
        if count[key] == 1:
            nxt[a] = b
    cycles, seen = [], set()
    for start in sorted(nxt):
        if start in seen:
            continue
        cycle, cur = [start], nxt[start]
        seen.add(start)
        while cur not in seen and cur in nxt:
            cycle.append(cur)
            seen.add(cur)
            cur = nxt[cur]
        if cur == start and len(cycle) >= 3:
            cycles.append(cycle)
    return cycles


def _fill_holes(pts: np.ndarray, faces: list, mask: np.ndarray) -> list:
    """Ear-fill boundary cycles, leaving mask-protected openings alone.

    A cycle where at least half of the edges join two masked points is an
    intended opening (a basal rim) and is skipped. Every other cycle gets
    one ear per round, shortest chord first; an ear is only placed when it
    keeps the mesh edge-manifold and consistently oriented, so slit-like
    cycles zip shut and impossible corners are simply left for the caller's
    wider-radius retry. Terminates because each placed face removes at
    least one boundary edge.
    """
    faces = list(faces)
    face_set = {tuple(sorted(tri)) for tri in faces}
    while True:
        count: dict[tuple, int] = {}
        directed = set()
        for tri in faces:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]),
                         (tri[2], tri[0])):
                key = (a, b) if a < b else (b, a)
                count[key] = count.get(key, 0) + 1
                directed.add((a, b))
        placed = False
        # Cycles are vertex-disjoint on a vertex-manifold mesh, so one ear
        # per cycle can be placed against the same edge maps.
        for cycle in _boundary_cycles(faces):
            n = len(cycle)
            masked_edges = sum(
                1 for i in range(n)
                if mask[cycle[i]] and mask[cycle[(i + 1) % n]])
            if 2 * masked_edges >= n:
                continue
            best = None
            for i in range(n):
                a, b, c = cycle[i - 1], cycle[i], cycle[(i + 1) % n]
                if a == c or tuple(sorted((a, c, b))) in face_set:
                    continue
                chord = (a, c) if a < c else (c, a)
                if count.get(chord, 0) >= 2 or (a, c) in directed:
                    continue
                key = (float(np.linalg.norm(pts[a] - pts[c])), b)
                if best is None or key < best[0]:
                    best = (key, a, b, c)
            if best is None:
                continue
            _, a, b, c = best
            faces.append((a, c, b))
            face_set.add(tuple(sorted((a, c, b))))
            placed = True
        if not placed:
            return faces


def ball_pivot(points, normals, cfg: BallPivotConfig,
               no_fill_mask=None) -> TriMesh:
    """Reconstruct a triangle mesh by multi-radius ball pivoting.

    no_fill_mask marks points whose boundary edges are left alone by the
    larger-radius passes (used to keep intended openings from being bridged).
    After the pivoting passes the mesh is repaired: bowtie vertex fans are
    pruned, detached satellite components are dropped, and remaining holes
    are ear-filled, except openings whose edges mostly join masked points,
    which stay open. The class tag of the
    returned mesh is LV_ENDO; callers relabel via dataclasses.replace or
    build through mesh_with_retry.
    """
    pts = _as_points(points)
    nrm = np.asarray(normals, dtype=np.float64)
    if nrm.shape != pts.shape:
        raise InvalidArgumentError("normals must match points shape")
    mask = np.zeros(pts.shape[0], dtype=bool)
    if no_fill_mask is not None:
        mask = np.asarray(no_fill_mask, dtype=bool)
        if mask.shape != (pts.shape[0],):
            raise InvalidArgumentError("no_fill_mask must have one flag per point")

    tree = cKDTree(pts)
    front = _Front(pts)
    queue: deque[tuple[int, int]] = deque()

    def drain():
        while queue:
            a, b = queue.popleft()
            und = _Front._und(a, b)
            if front.edge_count.get(und, 0) != 1 or (b, a) in front.directed:
                continue
            res = _pivot_candidates(front, tree, a, b, front.edge_center[(a, b)], radius)
            if res is None:
                continue
            _, k, new_center = res
            front.add_face(b, a, k, new_center)
            for ea, eb in ((a, k), (k, b)):
                if front.edge_count[_Front._und(ea, eb)] == 1:
                    queue.append((ea, eb))

    for pass_idx, radius in enumerate(cfg.radii):
        if pass_idx > 0:
            for a, b in front.boundary_directed_edges():
                if mask[a] and mask[b]:
                    continue
                queue.append((a, b))
            drain()
        seed_from = 0
        while True:
            seed = _find_seed(front, tree, nrm, radius, seed_from)
            if seed is None:
                break
            i, j, k, center = seed
            seed_from = i
            front.add_face(i, j, k, center)
            for ea, eb in ((i, j), (j, k), (k, i)):
                queue.append((ea, eb))
            drain()

    if not front.faces:
        raise MeshingFailureError("no seed triangle found for any radius")

    repaired = _prune_bowties(front.faces)
    repaired = _largest_component(repaired)
    repaired = _fill_holes(pts, repaired, mask)
    repaired = _prune_bowties(repaired)
    if not repaired:
        raise MeshingFailureError("repair removed every face")

    faces = np.array(repaired, dtype=np.int64)
    used = np.unique(faces)
    remap = np.full(pts.shape[0], -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    return TriMesh(pts[used], remap[faces], AnatomicalClass.LV_ENDO)


def _edge_face_counts(faces: np.ndarray) -> dict:
    counts: dict[tuple[int, int], int] = {}
    for tri in faces:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            e = (int(a), int(b)) if a < b else (int(b), int(a))
            counts[e] = counts.get(e, 0) + 1
    return counts


def _connected_components(n_vertices: int, faces: np.ndarray) -> int:
    parent = list(range(n_vertices))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for tri in faces:
        a = find(int(tri[0]))
        for v in (int(tri[1]), int(tri[2])):
            b = find(v)
            if a != b:
                parent[b] = a
    roots = {find(v) for v in np.unique(faces)}
    return len(roots)


def _vertex_manifold(n_vertices: int, faces: np.ndarray) -> bool:
    """Each vertex's incident faces must form a single fan (open or closed)."""
    link: list[list[tuple[int, int]]] = [[] for _ in range(n_vertices)]
    for tri in faces:
        t = [int(v) for v in tri]
        for idx in range(3):
            v = t[idx]
            link[v].append((t[(idx + 1) % 3], t[(idx + 2) % 3]))
    for v in range(n_vertices):
        edges = link[v]
        if not edges:
            continue
        deg: dict[int, int] = {}
        for a, b in edges:
            deg[a] = deg.get(a, 0) + 1
            deg[b] = deg.get(b, 0) + 1
        if any(c > 2 for c in deg.values()):
            return False
        # single connected chain or cycle over the link graph
        adj: dict[int, list[int]] = {}
        for a, b in edges:
            adj.setdefault(a, []).append(b)
            adj.setdefault(b, []).append(a)
        start = next(iter(adj))
        seen = {start}
        stack = [start]
        while stack:
            node = stack.pop()
            for nxt in adj[node]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        if len(seen) != len(adj):
            return False
        odd = sum(1 for c in deg.values() if c == 1)
        if odd not in (0, 2):
            return False
    return True


def _count_boundary_loops(faces: np.ndarray, counts: dict) -> int:
    boundary = [e for e, c in counts.items() if c == 1]
    if not boundary:
        return 0
    adj: dict[int, list[int]] = {}
    for a, b in boundary:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    seen: set[int] = set()
    loops = 0
    for start in sorted(adj):
        if start in seen:
            continue
        loops += 1
        seen.add(start)
        stack = [start]
        while stack:
            node = stack.pop()
            for nxt in adj[node]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
    return loops


def _is_oriented(faces: np.ndarray, counts: dict) -> bool:
    directed: set[tuple[int, int]] = set()
    for tri in faces:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (int(a), int(b))
            if key in directed:
                return False
            directed.add(key)
    # every interior edge must appear once in each direction
    for (a, b), c in counts.items():
        if c == 2 and not ((a, b) in directed and (b, a) in directed):
            return False
    return True


def check_topology(mesh: TriMesh) -> TopologyReport:
    """Compute the topology report; never raises on bad topology."""
    faces = mesh.faces
    counts = _edge_face_counts(faces)
    edge_manifold = all(c <= 2 for c in counts.values())
    vertex_manifold = edge_manifold and _vertex_manifold(mesh.n_vertices, faces)
    components = _connected_components(mesh.n_vertices, faces)
    loops = _count_boundary_loops(faces, counts) if edge_manifold else None
    oriented = _is_oriented(faces, counts)
    return TopologyReport(
        is_edge_manifold=edge_manifold,
        is_vertex_manifold=vertex_manifold,
        connected_components=components,
        boundary_loops=loops,
        is_oriented=oriented,
    )


def boundary_loop_vertices(mesh: TriMesh) -> list[list[int]]:
    """Ordered vertex cycles of each boundary loop.

    Requires an edge-manifold mesh whose boundary vertices each touch exactly
    two boundary edges.
    """
    counts = _edge_face_counts(mesh.faces)
    if any(c > 2 for c in counts.values()):
        raise InvalidArgumentError("boundary loops undefined on non-manifold mesh")
    boundary = [e for e, c in counts.items() if c == 1]
    adj: dict[int, list[int]] = {}
    for a, b in boundary:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    if any(len(v) != 2 for v in adj.values()):
        raise InvalidArgumentError("boundary is not a union of simple loops")
    seen: set[int] = set()
    loops = []
    for start in sorted(adj):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        prev, node = None, start
        while True:
            nxt = [v for v in adj[node] if v != prev]
            step = nxt[0] if nxt else prev
            if step == start:
                break
            loop.append(step)
            seen.add(step)
            prev, node = node, step
        loops.append(loop)
    return loops


def mesh_with_retry(points, cls: AnatomicalClass, max_attempts: int = 4,
                    no_fill_mask=None, base_config: BallPivotConfig | None = None) -> TriMesh:
    """Mesh a point cloud, retrying with adjusted hyperparameters on failure.

    Each retry widens all radii by 1.25x, prepends a smaller radius, and
    enlarges the normal-estimation neighborhood. Raises MeshingFailureError
    with all attempts' reports if no attempt passes the class expectation.
    """
    if max_attempts < 1:
        raise InvalidArgumentError("max_attempts must be >= 1")
    cls = AnatomicalClass(cls)
    cfg = base_config if base_config is not None else default_config(cls, points)
    expectation = CLASS_EXPECTATIONS[cls]
    attempts = []
    for attempt in range(max_attempts):
        try:
            normals = estimate_normals(points, k=cfg.normal_k)
            mesh = ball_pivot(points, normals, cfg, no_fill_mask=no_fill_mask)
            mesh = TriMesh(mesh.vertices, mesh.faces, cls)
            report = check_topology(mesh)
            if expectation.passes(report):
                return mesh
            attempts.append({"config": list(cfg.radii), "normal_k": cfg.normal_k,
                             "report": report.as_dict()})
        except MeshingFailureError as exc:
            attempts.append({"config": list(cfg.radii), "normal_k": cfg.normal_k,
                             "report": str(exc)})
        widened = tuple(r * 1.25 for r in cfg.radii)
        cfg = BallPivotConfig(radii=(0.6 * widened[0],) + widened,
                              normal_k=cfg.normal_k + 4)
    raise MeshingFailureError(
        f"no attempt of {max_attempts} produced a valid {cls.name} mesh",
        attempts=attempts)
