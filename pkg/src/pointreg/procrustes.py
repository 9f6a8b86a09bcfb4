"""Closed-form least-squares rigid alignment of corresponded point sets.

This is the inner solver used by both the sample-consensus loop and ICP:
given pairs (x_i, y_i) it returns the rotation and translation minimizing
the mean squared residual ``(1/N) sum ||R x_i + t - y_i||^2`` via centroids,
the 3x3 covariance of the centered sets, and its SVD, with the determinant
correction that rules out reflections.
"""

from __future__ import annotations

import numpy as np

from .geometry import RigidTransform, _as_points

# A minimal sample is degenerate when the second singular value of the
# covariance collapses relative to the largest (collinear input).
DEGENERACY_RATIO = 1e-9


class DegenerateCorrespondencesError(ValueError):
    """The corresponded sets do not determine a unique rigid transform."""


def residual_error(source_points, target_points, transform: RigidTransform) -> float:
    """Mean squared alignment residual of the pairs under `transform`."""
    x = _as_points(source_points, "source_points")
    y = _as_points(target_points, "target_points")
    if x.shape != y.shape:
        raise ValueError(f"point sets must match, got {x.shape} vs {y.shape}")
    if x.shape[0] == 0:
        raise ValueError("residual_error requires at least one pair")
    moved = x @ transform.rotation.T + transform.translation
    return float(((moved - y) ** 2).sum(axis=1).mean())


def fit_rigid(source_points, target_points) -> RigidTransform:
    """Best rigid transform mapping source points onto target points.

    Raises DegenerateCorrespondencesError for fewer than 3 pairs or when the
    pairs are collinear/coincident, which leaves the rotation underdetermined.
    """
    x = _as_points(source_points, "source_points")
    y = _as_points(target_points, "target_points")
    if x.shape != y.shape:
        raise ValueError(f"point sets must match, got {x.shape} vs {y.shape}")
    if x.shape[0] < 3:
        raise DegenerateCorrespondencesError(
            f"need at least 3 correspondence pairs, got {x.shape[0]}"
        )
    x_centroid = x.mean(axis=0)
    y_centroid = y.mean(axis=0)
    cov = (x - x_centroid).T @ (y - y_centroid)
    u, singular, vt = np.linalg.svd(cov)
    if singular[0] <= 0.0 or singular[1] < DEGENERACY_RATIO * singular[0]:
        raise DegenerateCorrespondencesError(
            "correspondences are rank deficient (collinear or coincident points)"
        )
    v = vt.T
    sign = 1.0 if np.linalg.det(v @ u.T) > 0 else -1.0
    rotation = (v * np.array([1.0, 1.0, sign])) @ u.T
    translation = -rotation @ x_centroid + y_centroid
    return RigidTransform(rotation, translation)
