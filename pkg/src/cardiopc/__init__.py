"""Biventricular surface reconstruction from sparse, misaligned contour stacks.

The package synthesizes cine-MRI-style contour point clouds from a parametric
biventricular shape model, trains a multi-class point cloud completion network
to densify them, meshes the completions with ball pivoting, and derives
clinical measures (volumes, mass, ejection fraction) from the meshes.
"""

__version__ = "0.1.0"
