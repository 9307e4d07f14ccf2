import numpy as np
import pytest

from cardiopc.errors import InvalidArgumentError, MeshingFailureError
from cardiopc.geometry import AnatomicalClass, icosphere
from cardiopc.meshing import (
    BallPivotConfig,
    CLASS_EXPECTATIONS,
    TriMesh,
    _fill_holes,
    _largest_component,
    _prune_bowties,
    ball_pivot,
    boundary_loop_vertices,
    check_topology,
    default_config,
    estimate_normals,
    median_nn_spacing,
    mesh_with_retry,
    smooth_points,
    thin_points,
)

import oracles


def sphere_cloud(n=2000, radius=30.0, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return radius * v


ICOSAHEDRON = icosphere(1.0, 0)
TETRA_VERTS = np.array([[0.0, 0, 0], [10.0, 0, 0], [0.0, 10.0, 0], [0.0, 0, 10.0]])
TETRA_FACES = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])


class TestTriMesh:
    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            TriMesh(TETRA_VERTS, np.array([[0, 1, 4]]), AnatomicalClass.LV_ENDO)
        with pytest.raises(InvalidArgumentError):
            TriMesh(TETRA_VERTS, np.array([[0, 1, 1]]), AnatomicalClass.LV_ENDO)

    def test_face_areas(self):
        mesh = TriMesh(TETRA_VERTS, TETRA_FACES, AnatomicalClass.LV_EPI)
        assert mesh.face_areas()[0] == pytest.approx(50.0)


class TestTopology:
    def test_closed_icosahedron(self):
        v, f = ICOSAHEDRON
        report = check_topology(TriMesh(v, f, AnatomicalClass.RV_ENDO))
        assert report.is_edge_manifold
        assert report.is_vertex_manifold
        assert report.is_oriented
        assert report.connected_components == 1
        assert report.boundary_loops == 0
        assert CLASS_EXPECTATIONS[AnatomicalClass.RV_ENDO].passes(report)

    def test_icosahedron_minus_one_face_has_one_loop(self):
        v, f = ICOSAHEDRON
        report = check_topology(TriMesh(v, f[1:], AnatomicalClass.LV_ENDO))
        assert report.boundary_loops == 1
        assert report.connected_components == 1
        assert CLASS_EXPECTATIONS[AnatomicalClass.LV_ENDO].passes(report)

    def test_two_disjoint_tetrahedra(self):
        verts = np.vstack([TETRA_VERTS, TETRA_VERTS + 100.0])
        faces = np.vstack([TETRA_FACES, TETRA_FACES + 4])
        report = check_topology(TriMesh(verts, faces, AnatomicalClass.RV_ENDO))
        assert report.connected_components == 2
        assert not CLASS_EXPECTATIONS[AnatomicalClass.RV_ENDO].passes(report)

    def test_non_manifold_edge_detected(self):
        verts = np.array([[0.0, 0, 0], [10.0, 0, 0], [0, 10.0, 0],
                          [0, 0, 10.0], [0, -10.0, 0]])
        faces = np.array([[0, 1, 2], [0, 1, 3], [0, 1, 4]])
        report = check_topology(TriMesh(verts, faces, AnatomicalClass.LV_ENDO))
        assert not report.is_edge_manifold
        assert report.boundary_loops is None

    def test_bowtie_vertex_not_vertex_manifold(self):
        # two triangles joined only at vertex 0
        verts = np.array([[0.0, 0, 0], [10.0, 0, 0], [10.0, 10.0, 0],
                          [-10.0, 0, 0], [-10.0, -10.0, 0]])
        faces = np.array([[0, 1, 2], [0, 3, 4]])
        report = check_topology(TriMesh(verts, faces, AnatomicalClass.LV_ENDO))
        assert report.is_edge_manifold
        assert not report.is_vertex_manifold

    def test_inconsistent_winding_detected(self):
        v, f = ICOSAHEDRON
        f = f.copy()
        f[0] = f[0][[0, 2, 1]]
        report = check_topology(TriMesh(v, f, AnatomicalClass.RV_ENDO))
        assert not report.is_oriented

    def test_boundary_loop_vertices_of_open_icosahedron(self):
        v, f = ICOSAHEDRON
        loops = boundary_loop_vertices(TriMesh(v, f[1:], AnatomicalClass.LV_ENDO))
        assert len(loops) == 1
        assert sorted(loops[0]) == sorted(f[0].tolist())


class TestNormals:
    def test_sphere_normals_near_radial(self):
        pts = sphere_cloud(800, 30.0, seed=1)
        normals = estimate_normals(pts, k=12)
        radial = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        cosang = np.einsum("ij,ij->i", normals, radial)
        # oriented outward: nearly all aligned, mean angular error small
        assert np.mean(cosang > 0) > 0.99
        ang = np.degrees(np.arccos(np.clip(np.abs(cosang), -1, 1)))
        assert np.mean(ang) < 5.0

    def test_coplanar_points(self):
        rng = np.random.default_rng(2)
        pts = np.column_stack([rng.normal(0, 10, 100), rng.normal(0, 10, 100),
                               np.zeros(100)])
        normals = estimate_normals(pts, k=8)
        assert np.allclose(np.abs(normals[:, 2]), 1.0, atol=1e-9)

    def test_deterministic(self):
        pts = sphere_cloud(300, 20.0, seed=3)
        n1 = estimate_normals(pts, k=10)
        n2 = estimate_normals(pts, k=10)
        assert np.array_equal(n1, n2)

    def test_too_few_points(self):
        with pytest.raises(InvalidArgumentError):
            estimate_normals(np.zeros((5, 3)), k=8)


class TestBallPivot:
    def test_uniform_sphere_reconstruction_valid_topology(self):
        pts = oracles.fibonacci_sphere(2000, 30.0)
        spacing = median_nn_spacing(pts)
        cfg = BallPivotConfig(radii=(1.5 * spacing, 2.5 * spacing))
        normals = estimate_normals(pts, k=12)
        mesh = ball_pivot(pts, normals, cfg)
        report = check_topology(mesh)
        assert report.is_edge_manifold
        assert report.is_vertex_manifold
        assert report.connected_components == 1
        assert report.boundary_loops == 0
        assert report.is_oriented
        # closed Euler-correct triangulation uses every point: F = 2V - 4
        assert mesh.n_vertices == 2000
        assert mesh.n_faces == 2 * 2000 - 4

    def test_clustered_sphere_closes_with_wider_ladder(self):
        # i.i.d. random sampling has Poisson gaps; a wider multi-radius
        # ladder is needed before every hole closes
        pts = sphere_cloud(2000, 30.0, seed=4)
        spacing = median_nn_spacing(pts)
        cfg = BallPivotConfig(radii=tuple(f * spacing for f in (1.5, 2.0, 3.0, 4.5)))
        mesh = ball_pivot(pts, estimate_normals(pts, 12), cfg)
        report = check_topology(mesh)
        assert report.boundary_loops == 0
        assert report.connected_components == 1
        assert report.is_vertex_manifold

    def test_vertices_are_subset_of_input(self):
        pts = sphere_cloud(500, 25.0, seed=5)
        mesh = ball_pivot(pts, estimate_normals(pts, 12),
                          default_config(AnatomicalClass.LV_ENDO, pts))
        input_set = {tuple(p) for p in pts}
        assert all(tuple(v) in input_set for v in mesh.vertices)

    def test_three_points_single_triangle(self):
        pts = np.array([[0.0, 0, 0], [4.0, 0, 0], [0.0, 4.0, 0]])
        normals = np.tile([0.0, 0.0, 1.0], (3, 1))
        mesh = ball_pivot(pts, normals, BallPivotConfig(radii=(5.0,)))
        assert mesh.n_faces == 1
        assert mesh.n_vertices == 3

    def test_deterministic_face_list(self):
        pts = sphere_cloud(600, 30.0, seed=6)
        cfg = default_config(AnatomicalClass.LV_EPI, pts)
        normals = estimate_normals(pts, 12)
        m1 = ball_pivot(pts, normals, cfg)
        m2 = ball_pivot(pts, normals, cfg)
        assert np.array_equal(m1.faces, m2.faces)
        assert np.array_equal(m1.vertices, m2.vertices)

    def test_no_seed_raises(self):
        pts = sphere_cloud(100, 30.0, seed=7)
        normals = estimate_normals(pts, 12)
        with pytest.raises(MeshingFailureError):
            ball_pivot(pts, normals, BallPivotConfig(radii=(1e-4,)))

    def test_sphere_volume_close_to_analytic(self):
        pts = oracles.fibonacci_sphere(2000, 30.0)
        mesh = ball_pivot(pts, estimate_normals(pts, 12),
                          default_config(AnatomicalClass.RV_ENDO, pts))
        vol = abs(oracles.tetra_signed_volume_sum(mesh.vertices, mesh.faces))
        analytic = 4.0 / 3.0 * np.pi * 30.0 ** 3
        # chordal triangles sit inside the sphere, so a slight deficit remains
        assert vol == pytest.approx(analytic, rel=0.01)


class TestMeshWithRetry:
    def test_clean_sphere_passes(self):
        pts = oracles.fibonacci_sphere(1500, 30.0)
        mesh = mesh_with_retry(pts, AnatomicalClass.RV_ENDO, max_attempts=3)
        assert mesh.cls == AnatomicalClass.RV_ENDO
        report = check_topology(mesh)
        assert CLASS_EXPECTATIONS[AnatomicalClass.RV_ENDO].passes(report)

    def test_forced_failure_carries_reports(self):
        pts = sphere_cloud(300, 30.0, seed=10)
        tiny = BallPivotConfig(radii=(1e-5,))
        with pytest.raises(MeshingFailureError) as err:
            mesh_with_retry(pts, AnatomicalClass.RV_ENDO, max_attempts=1,
                            base_config=tiny)
        assert len(err.value.attempts) == 1

    def test_retry_widens_and_succeeds(self):
        pts = oracles.fibonacci_sphere(1500, 30.0)
        spacing = median_nn_spacing(pts)
        # first attempt too small to close the sphere; retries must recover
        small = BallPivotConfig(radii=(0.8 * spacing,))
        mesh = mesh_with_retry(pts, AnatomicalClass.RV_ENDO, max_attempts=4,
                               base_config=small)
        report = check_topology(mesh)
        assert report.boundary_loops == 0

    def test_invalid_attempts(self):
        with pytest.raises(InvalidArgumentError):
            mesh_with_retry(np.zeros((30, 3)), AnatomicalClass.LV_ENDO,
                            max_attempts=0)


class TestPointCleanup:
    def test_smooth_shrinks_radial_noise(self):
        rng = np.random.default_rng(11)
        base = oracles.fibonacci_sphere(1500, 30.0)
        noisy = base * (1.0 + rng.normal(0.0, 0.015, size=(1500, 1)))
        out = smooth_points(noisy, k=16, passes=3)
        radii_in = np.linalg.norm(noisy, axis=1)
        radii_out = np.linalg.norm(out, axis=1)
        assert radii_out.std() < 0.5 * radii_in.std()
        # plane projection shrinks curved patches by about 1% per pass
        assert radii_out.mean() == pytest.approx(30.0, rel=0.05)
        assert radii_out.mean() < 30.0

    def test_smooth_zero_passes_is_identity(self):
        pts = sphere_cloud(200, 10.0, seed=12)
        out = smooth_points(pts, passes=0)
        assert np.array_equal(out, pts)
        assert out is not pts

    def test_smooth_validation(self):
        pts = sphere_cloud(200, 10.0, seed=13)
        with pytest.raises(InvalidArgumentError):
            smooth_points(pts, k=2)
        with pytest.raises(InvalidArgumentError):
            smooth_points(pts, passes=-1)
        with pytest.raises(InvalidArgumentError):
            smooth_points(pts[:10], k=16)

    def test_thin_enforces_spacing(self):
        pts = sphere_cloud(800, 20.0, seed=14)
        out = thin_points(pts, 2.0)
        from scipy.spatial import cKDTree
        nn = cKDTree(out).query(out, k=2)[0][:, 1]
        assert nn.min() >= 2.0
        assert out.shape[0] < pts.shape[0]

    def test_thin_is_order_stable_subset(self):
        pts = sphere_cloud(300, 20.0, seed=15)
        out = thin_points(pts, 1.5)
        # the survivors appear in their original order, first point included
        idx = [int(np.flatnonzero((pts == p).all(axis=1))[0]) for p in out]
        assert idx == sorted(idx)
        assert idx[0] == 0

    def test_thin_validation(self):
        with pytest.raises(InvalidArgumentError):
            thin_points(sphere_cloud(50, 10.0), 0.0)


class TestMeshRepair:
    def test_prune_drops_minor_fan(self):
        # two umbrella fans glued at vertex 0: keep the 3-face fan
        faces = [(0, 1, 2), (0, 2, 3), (0, 3, 4), (0, 5, 6), (0, 6, 7)]
        assert _prune_bowties(faces) == faces[:3]

    def test_prune_clean_mesh_untouched(self):
        assert _prune_bowties([tuple(f) for f in TETRA_FACES]) == \
            [tuple(f) for f in TETRA_FACES]

    def test_largest_component_kept(self):
        # two tetrahedra on disjoint vertices, the second missing one face
        big = [tuple(f) for f in TETRA_FACES]
        small = [(4, 6, 5), (4, 5, 7), (4, 7, 6)]
        assert _largest_component(small + big) == big

    def test_fill_closes_open_tetrahedron(self):
        faces = [(0, 2, 1), (0, 1, 3), (0, 3, 2)]
        filled = _fill_holes(TETRA_VERTS, faces, np.zeros(4, dtype=bool))
        assert len(filled) == 4
        report = check_topology(
            TriMesh(TETRA_VERTS, np.array(filled), AnatomicalClass.RV_ENDO))
        assert report.boundary_loops == 0
        assert report.is_oriented

    def test_fill_respects_mask(self):
        faces = [(0, 2, 1), (0, 1, 3), (0, 3, 2)]
        filled = _fill_holes(TETRA_VERTS, faces, np.ones(4, dtype=bool))
        assert filled == faces

    def test_punched_sphere_hole_closes(self):
        pts = oracles.fibonacci_sphere(2000, 30.0)
        pole = np.array([0.0, 0.0, 30.0])
        pts = pts[np.linalg.norm(pts - pole, axis=1) > 6.0]
        spacing = median_nn_spacing(pts)
        # single radius too small to bridge the gap while pivoting
        cfg = BallPivotConfig(radii=(2.2 * spacing,))
        mesh = ball_pivot(pts, estimate_normals(pts, 12), cfg)
        report = check_topology(mesh)
        assert report.boundary_loops == 0
        assert report.connected_components == 1
        assert report.is_vertex_manifold

    def test_punched_sphere_masked_rim_stays_open(self):
        pts = oracles.fibonacci_sphere(2000, 30.0)
        pole = np.array([0.0, 0.0, 30.0])
        pts = pts[np.linalg.norm(pts - pole, axis=1) > 6.0]
        spacing = median_nn_spacing(pts)
        cfg = BallPivotConfig(radii=(2.2 * spacing,))
        mask = np.linalg.norm(pts - pole, axis=1) < 10.0
        mesh = ball_pivot(pts, estimate_normals(pts, 12), cfg,
                          no_fill_mask=mask)
        report = check_topology(mesh)
        assert report.boundary_loops == 1
        assert report.is_vertex_manifold


class TestIcosphere:
    def test_subdivision_counts(self):
        v, f = icosphere(1.0, 2)
        assert f.shape[0] == 20 * 4 ** 2
        assert np.allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-12)

    def test_winding_outward(self):
        v, f = icosphere(10.0, 1)
        vol = oracles.tetra_signed_volume_sum(v, f)
        assert vol > 0
