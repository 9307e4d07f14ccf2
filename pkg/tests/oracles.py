"""Independent brute-force reference implementations used by the tests.

These are deliberately naive (full pairwise distance matrices, linear scans,
direct finite differences) and share no code with the package under test.
They were written first and are frozen; tests compare package output against
them rather than the other way around.
"""
from __future__ import annotations

import numpy as np


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, M) matrix of Euclidean distances via explicit differences."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff ** 2, axis=2))


def nn_linear_scan(queries: np.ndarray, refs: np.ndarray):
    """Nearest reference per query by linear scan; argmin takes lowest index."""
    d = pairwise_distances(queries, refs)
    idx = np.argmin(d, axis=1)
    dist = np.sqrt(np.sum((refs[idx] - queries) ** 2, axis=1))
    return dist, idx


def chamfer_brute(a: np.ndarray, b: np.ndarray) -> float:
    d = pairwise_distances(a, b)
    return 0.5 * (float(np.mean(d.min(axis=1))) + float(np.mean(d.min(axis=0))))


def hausdorff_brute(a: np.ndarray, b: np.ndarray) -> float:
    d = pairwise_distances(a, b)
    return max(float(d.min(axis=1).max()), float(d.min(axis=0).max()))


def msd_brute(a: np.ndarray, b: np.ndarray) -> float:
    d = pairwise_distances(a, b)
    return 0.5 * (float(np.mean(d.min(axis=1))) + float(np.mean(d.min(axis=0))))


def finite_difference_gradient(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f at x, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def tetra_signed_volume_sum(vertices: np.ndarray, faces: np.ndarray) -> float:
    """Signed volume of a closed triangle mesh via per-face determinants."""
    total = 0.0
    for tri in faces:
        v0, v1, v2 = vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]
        total += float(np.dot(v0, np.cross(v1, v2))) / 6.0
    return total


def polygon_area_shoelace(xy: np.ndarray) -> float:
    """Absolute area of a simple 2D polygon by the shoelace formula."""
    x, y = xy[:, 0], xy[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    return 0.5 * abs(float(np.sum(x * yn - xn * y)))


def fibonacci_sphere(n: int, radius: float) -> np.ndarray:
    """Evenly distributed (golden-angle lattice) points on a sphere."""
    i = np.arange(n)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(1.0 - z * z)
    theta = golden * i
    return radius * np.column_stack([r * np.cos(theta), r * np.sin(theta), z])
