"""Procedural biventricular shape model.

A parametric template (truncated prolate ellipsoids for the LV endocardium
and epicardium, open at the base; a closed crescent surface wrapped around
the LV for the RV) replaces a population-derived statistical shape model.
Synthetic deformation modes are smooth random vector fields, orthonormalized
under a vertex-averaged inner product, with geometrically decaying standard
deviations. Sampled anatomies keep known analytic properties (cavity volumes
of the undeformed template are closed-form), which downstream volume code is
validated against.

Axes: the LV long axis is z, apex at z = -c, basal opening at z = +t*c for
truncation fraction t. The RV sits beside the LV in +x.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._rng import STAGE_MODES, rng_for
from .clinical import cap_basal_hole, mesh_volume
from .errors import (
    DegenerateModelError,
    InvalidAnatomyError,
    InvalidArgumentError,
)
from .geometry import AnatomicalClass, ALL_CLASSES, LabeledPointCloud, Phase
from .meshing import TriMesh
from . import ply as ply_io


@dataclass(frozen=True)
class TemplateParams:
    """Geometric parameters of one phase's template, all mm.

    lv_*_short are equatorial semi-axes, lv_*_long the apex-base semi-axes.
    truncation is the basal cut height as a fraction of the long semi-axis;
    a value >= 1 produces a closed (untruncated) surface. rv_clearance is the
    minimum spacing kept between the RV surface and the LV epicardium.
    """

    lv_endo_short: float
    lv_endo_long: float
    lv_epi_short: float
    lv_epi_long: float
    rv_center_x: float
    rv_center_z: float
    rv_short_x: float
    rv_short_y: float
    rv_long: float
    rv_clearance: float = 2.5
    truncation: float = 0.45
    n_theta: int = 36
    n_rings: int = 32

    def __post_init__(self):
        radii = (self.lv_endo_short, self.lv_endo_long, self.lv_epi_short,
                 self.lv_epi_long, self.rv_short_x, self.rv_short_y, self.rv_long)
        if any(r <= 0 for r in radii):
            raise InvalidArgumentError("all radii and lengths must be positive")
        if self.lv_epi_short <= self.lv_endo_short:
            raise InvalidArgumentError("epicardial short radius must exceed endocardial")
        if self.lv_epi_long <= self.lv_endo_long:
            raise InvalidArgumentError("epicardial long radius must exceed endocardial")
        if self.rv_clearance <= 0:
            raise InvalidArgumentError("rv_clearance must be positive")
        if not (-1.0 < self.truncation):
            raise InvalidArgumentError("truncation must exceed -1")
        if self.n_theta < 8 or self.n_rings < 4:
            raise InvalidArgumentError("resolution too low (n_theta >= 8, n_rings >= 4)")


# Cavity volumes at these defaults: LV endo 119 ml (ED) / 52 ml (ES), wall
# mass about 100 g in both phases.
DEFAULT_PARAMS = {
    Phase.ED: TemplateParams(
        lv_endo_short=27.0, lv_endo_long=48.0,
        lv_epi_short=34.0, lv_epi_long=55.0,
        rv_center_x=40.0, rv_center_z=2.0,
        rv_short_x=28.0, rv_short_y=30.0, rv_long=44.0),
    Phase.ES: TemplateParams(
        lv_endo_short=19.5, lv_endo_long=40.0,
        lv_epi_short=30.5, lv_epi_long=47.0,
        rv_center_x=38.0, rv_center_z=0.0,
        rv_short_x=24.0, rv_short_y=26.0, rv_long=38.0),
}


def truncated_ellipsoid_volume(a: float, c: float, truncation: float) -> float:
    """Closed-form volume (mm^3) of an ellipsoid of revolution cut at
    z = truncation * c and capped flat."""
    t = min(float(truncation), 1.0)
    return np.pi * a * a * c * (t - t ** 3 / 3.0 + 2.0 / 3.0)


def _grid_faces(n_theta: int, n_rows: int, apex: int, base: int | None) -> np.ndarray:
    """Faces for a ring grid with an apex fan and an optional base fan.

    Ring r vertex j has index r*n_theta + j; rows run from base (r=0) toward
    the apex. Winding matches outward normals for surfaces built on the
    standard spherical parametrization used below.
    """
    faces = []
    for r in range(n_rows - 1):
        for j in range(n_theta):
            a = r * n_theta + j
            b = r * n_theta + (j + 1) % n_theta
            c = (r + 1) * n_theta + (j + 1) % n_theta
            d = (r + 1) * n_theta + j
            faces += [[a, d, c], [a, c, b]]
    last = (n_rows - 1) * n_theta
    for j in range(n_theta):
        faces.append([last + j, apex, last + (j + 1) % n_theta])
    if base is not None:
        for j in range(n_theta):
            faces.append([base, j, (j + 1) % n_theta])
    return np.array(faces, dtype=np.int64)


def build_ellipsoid_surface(a: float, c: float, truncation: float,
                            n_theta: int, n_rings: int,
                            cls: AnatomicalClass) -> TriMesh:
    """Surface of revolution: x = a sin(phi) cos(theta), z = c cos(phi).

    truncation < 1 leaves the surface open above phi_base = arccos(truncation)
    (the basal opening); truncation >= 1 closes both poles.
    """
    if a <= 0 or c <= 0:
        raise InvalidArgumentError("semi-axes must be positive")
    closed = truncation >= 1.0
    if closed:
        phis = np.pi * np.arange(1, n_rings) / n_rings
    else:
        phi_base = np.arccos(np.clip(truncation, -1.0, 1.0))
        phis = phi_base + (np.pi - phi_base) * np.arange(n_rings) / n_rings
    thetas = 2.0 * np.pi * np.arange(n_theta) / n_theta
    sin_p, cos_p = np.sin(phis), np.cos(phis)
    verts = np.empty((len(phis) * n_theta, 3), dtype=np.float64)
    for r in range(len(phis)):
        sl = slice(r * n_theta, (r + 1) * n_theta)
        verts[sl, 0] = a * sin_p[r] * np.cos(thetas)
        verts[sl, 1] = a * sin_p[r] * np.sin(thetas)
        verts[sl, 2] = c * cos_p[r]
    extra = [[0.0, 0.0, -c]]
    apex = len(verts)
    base = None
    if closed:
        extra.append([0.0, 0.0, c])
        base = apex + 1
    verts = np.vstack([verts, np.array(extra)])
    faces = _grid_faces(n_theta, len(phis), apex, base)
    return TriMesh(verts, faces, cls)


def _rv_zone_radius(z: np.ndarray, params: TemplateParams) -> np.ndarray:
    """In-plane radius of the keep-out zone around the LV epicardium."""
    frac = 1.0 - (z / params.lv_epi_long) ** 2
    r = params.lv_epi_short * np.sqrt(np.clip(frac, 0.0, None))
    return np.where(frac > 0.0, r + params.rv_clearance, 0.0)


def build_rv_surface(params: TemplateParams) -> TriMesh:
    """Closed crescent surface: an ellipsoid about the RV center whose rays
    toward the LV are clamped at the epicardial keep-out zone, so the inner
    wall wraps around the LV."""
    center = np.array([params.rv_center_x, 0.0, params.rv_center_z])
    if np.hypot(center[0], center[1]) <= _rv_zone_radius(
            np.array([center[2]]), params)[0]:
        raise InvalidArgumentError("RV center lies inside the LV keep-out zone")
    n_theta, n_rings = params.n_theta, params.n_rings
    phis = np.pi * np.arange(1, n_rings) / n_rings
    thetas = 2.0 * np.pi * np.arange(n_theta) / n_theta
    dirs = [np.array([0.0, 0.0, 1.0])]
    for phi in phis:
        for th in thetas:
            dirs.append(np.array([np.sin(phi) * np.cos(th),
                                  np.sin(phi) * np.sin(th),
                                  np.cos(phi)]))
    dirs.append(np.array([0.0, 0.0, -1.0]))
    dirs = np.array(dirs)

    inv2 = (dirs[:, 0] / params.rv_short_x) ** 2 \
        + (dirs[:, 1] / params.rv_short_y) ** 2 \
        + (dirs[:, 2] / params.rv_long) ** 2
    r_ell = 1.0 / np.sqrt(inv2)

    # first entry of each ray into the keep-out zone, by scan plus bisection
    steps = 64
    tt = np.linspace(0.0, 1.0, steps + 1)[None, :] * r_ell[:, None]
    pts = center[None, None, :] + dirs[:, None, :] * tt[:, :, None]
    inside = np.hypot(pts[:, :, 0], pts[:, :, 1]) < _rv_zone_radius(pts[:, :, 2], params)
    hits = inside.any(axis=1)
    first = np.where(hits, np.argmax(inside, axis=1), steps)
    lo = tt[np.arange(len(dirs)), np.maximum(first - 1, 0)]
    hi = tt[np.arange(len(dirs)), first]
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        p = center[None, :] + dirs * mid[:, None]
        m_in = np.hypot(p[:, 0], p[:, 1]) < _rv_zone_radius(p[:, 2], params)
        lo = np.where(hits & ~m_in, mid, lo)
        hi = np.where(hits & m_in, mid, hi)
    radius = np.where(hits, lo, r_ell)
    if np.any(radius <= 1e-6):
        raise InvalidArgumentError("RV surface collapses at the keep-out zone")

    verts = center[None, :] + dirs * radius[:, None]
    # reorder: rings first, then poles, to reuse the shared face builder
    ring_verts = verts[1:-1]
    pole_top, pole_bottom = verts[0], verts[-1]
    all_verts = np.vstack([ring_verts, pole_bottom[None, :], pole_top[None, :]])
    apex = len(ring_verts)
    base = apex + 1
    faces = _grid_faces(n_theta, len(phis), apex, base)
    return TriMesh(all_verts, faces, AnatomicalClass.RV_ENDO)


def _vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted vertex normals (consistent with the face winding)."""
    tri = mesh.vertices[mesh.faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    normals = np.zeros_like(mesh.vertices)
    for col in range(3):
        np.add.at(normals, mesh.faces[:, col], fn)
    lengths = np.linalg.norm(normals, axis=1)
    lengths[lengths == 0.0] = 1.0
    return normals / lengths[:, None]


def check_anatomy(meshes: dict, min_wall_gap: float = 1.0,
                  min_rv_gap: float = 0.3) -> None:
    """Containment checks; raises InvalidAnatomyError on violation.

    The endo and epi surfaces share one grid, so the wall gap is measured
    between corresponding vertices along the endocardial outward normal. RV
    clearance uses the signed offset from the nearest epicardial vertex's
    tangent plane.
    """
    endo = meshes[AnatomicalClass.LV_ENDO]
    epi = meshes[AnatomicalClass.LV_EPI]
    rv = meshes[AnatomicalClass.RV_ENDO]
    if endo.n_vertices != epi.n_vertices:
        raise InvalidArgumentError("endo/epi grids must correspond vertex-wise")
    n_endo = _vertex_normals(endo)
    gap = np.einsum("ij,ij->i", epi.vertices - endo.vertices, n_endo)
    if float(gap.min()) <= min_wall_gap:
        raise InvalidAnatomyError(
            f"LV wall gap {gap.min():.2f} mm at vertex {int(gap.argmin())} "
            f"(needs > {min_wall_gap} mm)")
    n_epi = _vertex_normals(epi)
    _, nearest = cKDTree(epi.vertices).query(rv.vertices)
    side = np.einsum("ij,ij->i", rv.vertices - epi.vertices[nearest], n_epi[nearest])
    if float(side.min()) <= min_rv_gap:
        raise InvalidAnatomyError(
            f"RV surface within {side.min():.2f} mm of the LV epicardium")


@dataclass(frozen=True)
class BiventricularTemplate:
    """Mean shapes for both phases on one shared grid resolution."""

    params: dict
    meshes: dict

    def mesh(self, phase: Phase, cls: AnatomicalClass) -> TriMesh:
        return self.meshes[Phase(phase)][AnatomicalClass(cls)]

    def class_vertex_counts(self) -> dict:
        first = next(iter(self.meshes.values()))
        return {c: first[c].n_vertices for c in ALL_CLASSES}

    def total_vertices(self) -> int:
        return sum(self.class_vertex_counts().values())

    def stacked_vertices(self, phase: Phase) -> np.ndarray:
        ms = self.meshes[Phase(phase)]
        return np.vstack([ms[c].vertices for c in ALL_CLASSES])


def capped_lv_volume(mesh: TriMesh) -> float:
    """Cavity volume (ml) of an open LV surface after capping the base."""
    return mesh_volume(cap_basal_hole(mesh))


def build_template(params: dict | None = None) -> BiventricularTemplate:
    """Construct and validate both phases' surfaces.

    params maps Phase to TemplateParams; defaults produce physiological
    volumes. Raises InvalidArgumentError for parameter violations and
    InvalidAnatomyError if the built surfaces break containment or the
    ED > ES cavity-volume ordering.
    """
    if params is None:
        params = DEFAULT_PARAMS
    if set(params) != {Phase.ED, Phase.ES}:
        raise InvalidArgumentError("params must cover exactly phases ED and ES")
    resolutions = {(p.n_theta, p.n_rings) for p in params.values()}
    if len(resolutions) != 1:
        raise InvalidArgumentError("both phases must share one grid resolution")
    meshes = {}
    for phase, p in params.items():
        phase_meshes = {
            AnatomicalClass.LV_ENDO: build_ellipsoid_surface(
                p.lv_endo_short, p.lv_endo_long, p.truncation,
                p.n_theta, p.n_rings, AnatomicalClass.LV_ENDO),
            AnatomicalClass.LV_EPI: build_ellipsoid_surface(
                p.lv_epi_short, p.lv_epi_long, p.truncation,
                p.n_theta, p.n_rings, AnatomicalClass.LV_EPI),
            AnatomicalClass.RV_ENDO: build_rv_surface(p),
        }
        check_anatomy(phase_meshes)
        meshes[phase] = phase_meshes
    ed_vol = capped_lv_volume(meshes[Phase.ED][AnatomicalClass.LV_ENDO])
    es_vol = capped_lv_volume(meshes[Phase.ES][AnatomicalClass.LV_ENDO])
    if ed_vol <= es_vol:
        raise InvalidAnatomyError(
            f"ED cavity volume {ed_vol:.1f} ml must exceed ES {es_vol:.1f} ml")
    return BiventricularTemplate(params=dict(params), meshes=meshes)


@dataclass(frozen=True)
class ShapeModes:
    """K orthonormal displacement fields per phase.

    fields[phase] has shape (K, V, 3) where V is the total vertex count over
    the three surfaces. Orthonormality is under the vertex-averaged inner
    product <u, v> = mean_i u_i . v_i, so a unit coefficient displaces
    vertices by sds[k] mm in the RMS sense.
    """

    fields: dict
    sds: np.ndarray
    seed: int

    @property
    def k_modes(self) -> int:
        return len(self.sds)

    def gram(self, phase: Phase) -> np.ndarray:
        f = self.fields[Phase(phase)]
        flat = f.reshape(f.shape[0], -1)
        return flat @ flat.T / f.shape[1]


def _mode_inner(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.sum(u * v) / u.shape[0])


def _smooth_field_params(rng: np.random.Generator, n_terms: int = 8):
    terms = []
    for _ in range(n_terms):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        freq = float(rng.integers(1, 4))
        shift = float(rng.uniform(0.0, 2.0 * np.pi))
        amp = float(rng.uniform(0.5, 1.0))
        terms.append((axis, direction, freq, shift, amp))
    return terms


def _evaluate_field(terms, positions: np.ndarray, scale: float) -> np.ndarray:
    out = np.zeros_like(positions)
    for axis, direction, freq, shift, amp in terms:
        proj = positions @ axis
        out += (amp * np.sin(np.pi * freq * proj / scale + shift))[:, None] * direction[None, :]
    return out


def _split_displacement(template: BiventricularTemplate, disp: np.ndarray,
                        phase: Phase) -> dict:
    counts = template.class_vertex_counts()
    meshes = {}
    offset = 0
    for c in ALL_CLASSES:
        base = template.mesh(phase, c)
        n = counts[c]
        meshes[c] = TriMesh(base.vertices + disp[offset:offset + n], base.faces, c)
        offset += n
    return meshes


def generate_modes(template: BiventricularTemplate, k_modes: int = 10,
                   seed: int = 0, sigma0: float = 2.0,
                   decay: float = 0.8) -> ShapeModes:
    """Synthesize K orthonormal smooth deformation modes.

    Each candidate is a sum of low-frequency sinusoidal vector fields
    evaluated at the template vertices, orthogonalized against the accepted
    modes per phase, and kept only if deforming the template by +-3 SD
    preserves anatomy validity in both phases. Rejected candidates are
    resampled (the draw stream keeps advancing, so results stay reproducible
    from the seed alone).
    """
    if k_modes < 1:
        raise InvalidArgumentError("k_modes must be >= 1")
    rng = rng_for(seed, STAGE_MODES)
    scale = max(p.lv_epi_long for p in template.params.values())
    positions = {ph: template.stacked_vertices(ph) for ph in (Phase.ED, Phase.ES)}
    accepted = {ph: [] for ph in (Phase.ED, Phase.ES)}
    sds = sigma0 * decay ** np.arange(k_modes)
    k = 0
    attempts = 0
    while k < k_modes:
        attempts += 1
        if attempts > 100 * k_modes:
            raise DegenerateModelError(
                f"only {k} of {k_modes} modes accepted after {attempts} attempts")
        terms = _smooth_field_params(rng)
        candidate = {}
        ok = True
        for ph in (Phase.ED, Phase.ES):
            field = _evaluate_field(terms, positions[ph], scale)
            for prev in accepted[ph]:
                field = field - _mode_inner(field, prev) * prev
            norm = np.sqrt(_mode_inner(field, field))
            if norm < 1e-8:
                ok = False
                break
            candidate[ph] = field / norm
        if not ok:
            continue
        for ph in (Phase.ED, Phase.ES):
            for sign in (3.0, -3.0):
                try:
                    check_anatomy(_split_displacement(
                        template, sign * sds[k] * candidate[ph], ph))
                except InvalidAnatomyError:
                    ok = False
                    break
            if not ok:
                break
        if not ok:
            continue
        for ph in (Phase.ED, Phase.ES):
            accepted[ph].append(candidate[ph])
        k += 1
    fields = {ph: np.array(accepted[ph]) for ph in (Phase.ED, Phase.ES)}
    return ShapeModes(fields=fields, sds=sds, seed=int(seed))


@dataclass(frozen=True)
class ShapeSample:
    """One deformed anatomy: coefficients, phase, per-class meshes."""

    z: np.ndarray
    phase: Phase
    meshes: dict
    seed: int | None = None

    def mesh(self, cls: AnatomicalClass) -> TriMesh:
        return self.meshes[AnatomicalClass(cls)]


def sample_coefficients(k_modes: int, rng: np.random.Generator,
                        bound: float = 3.0) -> np.ndarray:
    """Standard normal coefficients truncated to [-bound, bound] by redraw."""
    z = rng.standard_normal(k_modes)
    bad = np.abs(z) > bound
    while np.any(bad):
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return z


def shape_from_coefficients(template: BiventricularTemplate, modes: ShapeModes,
                            phase: Phase, z: np.ndarray,
                            seed: int | None = None) -> ShapeSample:
    """Deterministic deformation: vertices = template + sum_k z_k sd_k mode_k."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (modes.k_modes,):
        raise InvalidArgumentError(f"z must have shape ({modes.k_modes},)")
    phase = Phase(phase)
    disp = np.tensordot(z * modes.sds, modes.fields[phase], axes=1)
    meshes = _split_displacement(template, disp, phase)
    return ShapeSample(z=z.copy(), phase=phase, meshes=meshes, seed=seed)


def sample_shape(template: BiventricularTemplate, modes: ShapeModes,
                 phase: Phase, rng: np.random.Generator,
                 max_attempts: int = 100) -> ShapeSample:
    """Draw coefficients until the deformed anatomy passes validity checks."""
    for _ in range(max_attempts):
        z = sample_coefficients(modes.k_modes, rng)
        sample = shape_from_coefficients(template, modes, phase, z)
        try:
            check_anatomy(sample.meshes)
        except InvalidAnatomyError:
            continue
        return sample
    raise DegenerateModelError(
        f"no valid anatomy in {max_attempts} coefficient draws")


def farthest_point_indices(points: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point subset of size m; ties resolve to lowest index."""
    n = points.shape[0]
    if m < 1 or m > n:
        raise InvalidArgumentError(f"m must be in [1, {n}], got {m}")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    dist = np.sqrt(np.sum((points - points[start]) ** 2, axis=1))
    for i in range(1, m):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        d_new = np.sqrt(np.sum((points - points[nxt]) ** 2, axis=1))
        dist = np.minimum(dist, d_new)
    return chosen


def mesh_to_ground_truth_cloud(sample: ShapeSample,
                               p_per_class: int) -> LabeledPointCloud:
    """Farthest-point subsample of each class's mesh vertices, labeled."""
    pts = []
    labels = []
    for c in ALL_CLASSES:
        verts = sample.mesh(c).vertices
        if p_per_class > verts.shape[0]:
            raise InvalidArgumentError(
                f"{c.name} has {verts.shape[0]} vertices, needs >= {p_per_class}")
        idx = farthest_point_indices(verts, p_per_class)
        pts.append(verts[idx])
        labels.append(np.full(p_per_class, int(c), dtype=np.uint8))
    return LabeledPointCloud(np.vstack(pts), np.concatenate(labels), sample.phase)


def save_shape_sample(directory, sample: ShapeSample) -> dict:
    """Write per-class mesh PLYs and a JSON manifest; returns the manifest."""
    os.makedirs(directory, exist_ok=True)
    files = {}
    for c in ALL_CLASSES:
        mesh = sample.mesh(c)
        name = f"{c.name.lower()}.ply"
        labels = np.full(mesh.n_vertices, int(c), dtype=np.uint8)
        ply_io.write_labeled_mesh(os.path.join(directory, name),
                                  mesh.vertices, mesh.faces, labels, sample.phase)
        files[c.name] = name
    manifest = {
        "seed": sample.seed,
        "z": [float(v) for v in sample.z],
        "phase": sample.phase.value,
        "files": files,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_shape_sample(directory) -> ShapeSample:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    meshes = {}
    for c in ALL_CLASSES:
        verts, faces, _, phase = ply_io.read_labeled_mesh(
            os.path.join(directory, manifest["files"][c.name]))
        meshes[c] = TriMesh(verts, faces, c)
    return ShapeSample(z=np.array(manifest["z"], dtype=np.float64),
                       phase=Phase(manifest["phase"]),
                       meshes=meshes, seed=manifest["seed"])
