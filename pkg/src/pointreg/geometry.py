"""Core point-cloud types, spatial queries, sampling, and pose-error metrics.

All coordinates are meters, stored as float64 arrays of shape (N, 3).
Every function here is pure and safe to call from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy.spatial import cKDTree

# Below this many points an exhaustive scan beats building a spatial index.
EXHAUSTIVE_FALLBACK = 1000

DEFAULT_MAX_NEIGHBORS = 64

ROTATION_TOL = 1e-6

# Registration counts as successful below these error bounds.
SUCCESS_MAX_TRANSLATION = 0.6
SUCCESS_MAX_ROTATION_DEG = 5.0


class InsufficientPointsError(ValueError):
    """An operation was asked for more points than the input provides."""


def _as_points(a, name: str = "coords") -> np.ndarray:
    pts = np.asarray(a, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {pts.shape}")
    return pts


@dataclass(frozen=True, eq=False)
class PointCloud:
    """3D points with an optional per-point intensity scalar in [0, 1]."""

    coords: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self) -> None:
        coords = _as_points(self.coords).copy()
        if not np.isfinite(coords).all():
            raise ValueError("coordinates must be finite")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1).copy()
            if inten.shape[0] != coords.shape[0]:
                raise ValueError(
                    f"intensity has {inten.shape[0]} values for {coords.shape[0]} points"
                )
            if not np.isfinite(inten).all():
                raise ValueError("intensity values must be finite")
            inten.setflags(write=False)
            object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation matrix in SO(3) plus translation vector (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64).copy()
        trans = np.asarray(self.translation, dtype=np.float64).reshape(-1).copy()
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        if trans.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got {trans.shape}")
        if not (np.isfinite(rot).all() and np.isfinite(trans).all()):
            raise ValueError("transform entries must be finite")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > ROTATION_TOL:
            raise ValueError(f"rotation is not orthogonal (|R^T R - I| = {err:.3g})")
        det = np.linalg.det(rot)
        if abs(det - 1.0) > ROTATION_TOL:
            raise ValueError(f"rotation must have det +1, got {det:.9f}")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 homogeneous matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        """Return the 4x4 homogeneous form."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class RegistrationMetrics:
    """Translation/rotation error of an estimated pose and the success flag."""

    translation_error: float
    rotation_error: float
    success: bool


def rotation_about_z(angle_rad: float) -> np.ndarray:
    """Rotation matrix for a right-handed rotation about the +z axis."""
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def transform_points(coords: np.ndarray, transform: RigidTransform) -> np.ndarray:
    """Map raw (N, 3) coordinates through R p + t."""
    coords = _as_points(coords)
    return coords @ transform.rotation.T + transform.translation


def apply_transform(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    """Return the cloud with every point mapped to R p + t; intensity preserved."""
    return PointCloud(transform_points(cloud.coords, transform), cloud.intensity)


def compose(first: RigidTransform, second: RigidTransform) -> RigidTransform:
    """Composition applying `second` first, then `first`."""
    rot = first.rotation @ second.rotation
    trans = first.rotation @ second.translation + first.translation
    return RigidTransform(rot, trans)


def invert(transform: RigidTransform) -> RigidTransform:
    rot = transform.rotation.T
    return RigidTransform(rot, -rot @ transform.translation)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Replace the points of each occupied voxel by their centroid.

    Output points are ordered by ascending lexicographic voxel index, which
    makes the result deterministic. Intensity is averaged per voxel.
    """
    if voxel_size <= 0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    if len(cloud) == 0:
        return cloud
    ids = np.floor(cloud.coords / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(
        ids, axis=0, return_inverse=True, return_counts=True
    )
    inverse = inverse.reshape(-1)
    centroids = np.empty((counts.shape[0], 3))
    for axis in range(3):
        centroids[:, axis] = np.bincount(inverse, weights=cloud.coords[:, axis])
    centroids /= counts[:, None]
    intensity = None
    if cloud.intensity is not None:
        intensity = np.bincount(inverse, weights=cloud.intensity) / counts
    return PointCloud(centroids, intensity)


@numba.njit(cache=True)
def _fps_kernel(coords: np.ndarray, n: int, seed_index: int) -> np.ndarray:
    num = coords.shape[0]
    selected = np.empty(n, dtype=np.int64)
    selected[0] = seed_index
    # min squared distance to the selected set; -1 marks already-selected points
    min_dist = np.full(num, np.inf)
    min_dist[seed_index] = -1.0
    last = seed_index
    for i in range(1, n):
        cx = coords[last, 0]
        cy = coords[last, 1]
        cz = coords[last, 2]
        best = -1
        best_dist = -1.0
        for j in range(num):
            m = min_dist[j]
            if m == -1.0:
                continue
            dx = coords[j, 0] - cx
            dy = coords[j, 1] - cy
            dz = coords[j, 2] - cz
            dsq = dx * dx + dy * dy + dz * dz
            if dsq < m:
                m = dsq
                min_dist[j] = dsq
            if m > best_dist:
                best_dist = m
                best = j
        selected[i] = best
        min_dist[best] = -1.0
        last = best
    return selected


def farthest_point_sample(coords, n: int, seed_index: int = 0) -> np.ndarray:
    """Greedy subsample of `n` indices maximizing minimum pairwise spread.

    The first index is `seed_index`; each subsequent index maximizes the
    minimum Euclidean distance to the points already selected, with ties
    broken by the lowest index. Returned indices are distinct.
    """
    pts = np.ascontiguousarray(_as_points(coords))
    num = pts.shape[0]
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if n > num:
        raise InsufficientPointsError(f"cannot sample {n} points from {num}")
    if not 0 <= seed_index < num:
        raise ValueError(f"seed_index {seed_index} out of range for {num} points")
    return _fps_kernel(pts, n, seed_index)


def _truncate_by_distance(
    cand: np.ndarray, dist_sq: np.ndarray, limit: int
) -> np.ndarray:
    # Stable sort keeps ascending candidate index among equal distances.
    order = np.argsort(dist_sq, kind="stable")
    return cand[order[:limit]]


def radius_neighbors(
    queries,
    points,
    radius: float,
    max_neighbors: int = DEFAULT_MAX_NEIGHBORS,
) -> list[np.ndarray]:
    """Per-query indices of points within `radius`, nearest first.

    Each list is truncated to `max_neighbors` by ascending distance with ties
    broken by the lowest index. Empty neighborhoods are returned as empty
    arrays.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    q = _as_points(queries, "queries")
    p = _as_points(points, "points")
    r_sq = radius * radius
    out: list[np.ndarray] = []
    if p.shape[0] < EXHAUSTIVE_FALLBACK:
        for qi in q:
            d_sq = ((p - qi) ** 2).sum(axis=1)
            cand = np.flatnonzero(d_sq <= r_sq)
            out.append(_truncate_by_distance(cand, d_sq[cand], max_neighbors))
        return out
    tree = cKDTree(p)
    # Slightly inflated query radius guards against arithmetic differences
    # between the tree's distance computation and ours; the exact d <= r
    # filter below restores the contract.
    lists = tree.query_ball_point(q, radius * (1.0 + 1e-12))
    for qi, cand in zip(q, lists):
        cand = np.sort(np.asarray(cand, dtype=np.int64))
        d_sq = ((p[cand] - qi) ** 2).sum(axis=1)
        keep = d_sq <= r_sq
        out.append(_truncate_by_distance(cand[keep], d_sq[keep], max_neighbors))
    return out


def knn(queries, points, k: int, metric: str = "euclidean") -> np.ndarray:
    """Indices of the k best points per query, best first.

    With the euclidean metric "best" means smallest distance; with
    dot_product_similarity it means largest dot product. Ties are broken by
    the lowest index. Returns an (num_queries, k) int array.
    """
    q = np.asarray(queries, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    if q.ndim != 2 or p.ndim != 2 or q.shape[1] != p.shape[1]:
        raise ValueError("queries and points must be 2D with equal dimensionality")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > p.shape[0]:
        raise InsufficientPointsError(f"k={k} exceeds point count {p.shape[0]}")
    if metric == "dot_product_similarity":
        scores = q @ p.T
        order = np.argsort(-scores, axis=1, kind="stable")
        return order[:, :k]
    if metric != "euclidean":
        raise ValueError(f"unknown metric {metric!r}")
    if p.shape[0] < EXHAUSTIVE_FALLBACK or q.shape[1] != 3:
        d_sq = ((q[:, None, :] - p[None, :, :]) ** 2).sum(axis=2)
        order = np.argsort(d_sq, axis=1, kind="stable")
        return order[:, :k]
    tree = cKDTree(p)
    kth_dist, _ = tree.query(q, k=k)
    kth_dist = np.atleast_2d(kth_dist)[:, -1]
    result = np.empty((q.shape[0], k), dtype=np.int64)
    for i, qi in enumerate(q):
        cand = np.sort(
            np.asarray(
                tree.query_ball_point(qi, kth_dist[i] * (1.0 + 1e-12) + 1e-300),
                dtype=np.int64,
            )
        )
        d_sq = ((p[cand] - qi) ** 2).sum(axis=1)
        result[i] = _truncate_by_distance(cand, d_sq, k)
    return result


def translation_error(estimate: RigidTransform, ground_truth: RigidTransform) -> float:
    """Euclidean norm of the translation difference, in meters."""
    return float(np.linalg.norm(estimate.translation - ground_truth.translation))


def rotation_error(estimate: RigidTransform, ground_truth: RigidTransform) -> float:
    """Geodesic angle between the two rotations, in degrees."""
    trace = np.trace(estimate.rotation.T @ ground_truth.rotation)
    # Clamp against floating-point trace drift outside [-1, 1].
    cos_angle = np.clip((trace - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos_angle)))


def evaluate_transform(
    estimate: RigidTransform, ground_truth: RigidTransform
) -> RegistrationMetrics:
    """TE/RE against ground truth plus the TE < 0.6 m and RE < 5 deg verdict."""
    te = translation_error(estimate, ground_truth)
    re = rotation_error(estimate, ground_truth)
    success = te < SUCCESS_MAX_TRANSLATION and re < SUCCESS_MAX_ROTATION_DEG
    return RegistrationMetrics(te, re, success)


def overlap_ratio(
    source: PointCloud,
    target: PointCloud,
    ground_truth: RigidTransform,
    gamma: float,
) -> float:
    """Fraction of source points with a target point closer than gamma once aligned."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if len(source) == 0:
        raise InsufficientPointsError("overlap_ratio requires a non-empty source cloud")
    aligned = transform_points(source.coords, ground_truth)
    tree = cKDTree(target.coords)
    dist, _ = tree.query(aligned, k=1)
    return float(np.count_nonzero(dist < gamma) / len(source))
