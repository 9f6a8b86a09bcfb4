"""Sample-consensus pose fitting, ICP refinement, and the end-to-end pipeline.

RANSAC draws minimal sets of three correspondences with a seeded PCG64
generator, fits each with the closed-form rigid solver, scores hypotheses by
inlier count, and adapts its iteration bound from the best inlier ratio seen
so far. After the loop the best hypothesis is refit on its full inlier set;
the refit is kept only if it does not lose inliers.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import attention, matching
from .encoder import encode
from .geometry import PointCloud, RigidTransform, compose, voxel_downsample
from .matching import CorrespondenceSet
from .model import ModelWeights
from .procrustes import DegenerateCorrespondencesError, fit_rigid

logger = logging.getLogger(__name__)

PIPELINE_STAGES = ("downsample", "encode", "attention", "match", "ransac", "icp")


class RegistrationFailureError(RuntimeError):
    """No acceptable pose hypothesis could be found."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage label."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class RansacConfig:
    inlier_threshold: float = 0.5
    confidence: float = 0.999
    max_iterations: int = 100_000
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class RegistrationResult:
    transform: RigidTransform
    inlier_count: int
    inlier_indices: np.ndarray
    iterations_run: int
    elapsed: float
    stage_times: dict[str, float] = field(default_factory=dict)


def count_inliers(
    corr: CorrespondenceSet, transform: RigidTransform, inlier_threshold: float
) -> tuple[int, np.ndarray]:
    """Correspondences whose aligned residual is within the threshold."""
    if inlier_threshold <= 0:
        raise ValueError("inlier_threshold must be positive")
    moved = corr.source_coords @ transform.rotation.T + transform.translation
    dist = np.linalg.norm(moved - corr.matched_target_coords, axis=1)
    indices = np.flatnonzero(dist <= inlier_threshold)
    return indices.size, indices


def adaptive_iterations(
    inlier_ratio: float,
    confidence: float,
    sample_size: int = 3,
    max_iterations: int = 100_000,
) -> int:
    """Iterations needed to draw one outlier-free sample at the confidence level."""
    if not 0.0 <= inlier_ratio <= 1.0:
        raise ValueError("inlier_ratio must lie in [0, 1]")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    if inlier_ratio == 0.0:
        return max_iterations
    p_good = inlier_ratio**sample_size
    if p_good >= 1.0:
        return 1
    needed = math.ceil(math.log(1.0 - confidence) / math.log(1.0 - p_good))
    return int(min(max(needed, 1), max_iterations))


def ransac_register(corr: CorrespondenceSet, cfg: RansacConfig) -> RegistrationResult:
    """Robustly fit the rigid transform explaining the most correspondences."""
    start = time.perf_counter()
    n = len(corr)
    if n < 3:
        raise RegistrationFailureError(f"need at least 3 correspondences, got {n}")
    rng = np.random.Generator(np.random.PCG64(cfg.rng_seed))
    source = corr.source_coords
    target = corr.matched_target_coords
    best_count = 0
    best_transform: RigidTransform | None = None
    best_inliers = np.empty(0, dtype=np.int64)
    bound = cfg.max_iterations
    total = 0
    valid = 0
    while total < cfg.max_iterations and valid < bound:
        total += 1
        sample = rng.choice(n, size=3, replace=False)
        # Two sources matched to one target cannot constrain a pose.
        if np.unique(corr.matched_indices[sample]).size < 3:
            continue
        try:
            hypothesis = fit_rigid(source[sample], target[sample])
        except DegenerateCorrespondencesError:
            continue
        valid += 1
        count, inliers = count_inliers(corr, hypothesis, cfg.inlier_threshold)
        if count > best_count:
            best_count = count
            best_transform = hypothesis
            best_inliers = inliers
            bound = adaptive_iterations(
                count / n, cfg.confidence, 3, cfg.max_iterations
            )
    if best_transform is None or best_count < 3:
        raise RegistrationFailureError(
            f"no hypothesis reached 3 inliers within {total} iterations"
        )
    # Final polish: refit on every inlier, kept only if no inliers are lost.
    try:
        refit = fit_rigid(source[best_inliers], target[best_inliers])
        refit_count, refit_inliers = count_inliers(corr, refit, cfg.inlier_threshold)
        if refit_count >= best_count:
            best_transform = refit
            best_count = refit_count
            best_inliers = refit_inliers
    except DegenerateCorrespondencesError:
        pass
    return RegistrationResult(
        transform=best_transform,
        inlier_count=best_count,
        inlier_indices=best_inliers,
        iterations_run=total,
        elapsed=time.perf_counter() - start,
    )


def icp_refine(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform,
    max_corr_dist: float = 1.0,
    max_iters: int = 50,
    rel_tol: float = 1e-6,
) -> RigidTransform:
    """Classic point-to-point ICP starting from `init`.

    Alternates nearest-neighbor pairing (within `max_corr_dist`) with the
    closed-form rigid fit until the relative change of the mean squared
    pairing residual drops below `rel_tol`. If the initial pose yields no
    pairs at all, `init` is returned unchanged with a warning.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("ICP requires non-empty clouds")
    tree = cKDTree(target.coords)
    transform = init
    prev_residual = None
    for iteration in range(max_iters):
        moved = source.coords @ transform.rotation.T + transform.translation
        dist, idx = tree.query(moved, k=1, distance_upper_bound=max_corr_dist)
        paired = np.isfinite(dist)
        if not paired.any():
            if iteration == 0:
                logger.warning(
                    "ICP found no pairs within %.3g m of the initial pose; "
                    "returning the initial transform",
                    max_corr_dist,
                )
                return init
            break
        residual = float((dist[paired] ** 2).mean())
        try:
            delta = fit_rigid(moved[paired], target.coords[idx[paired]])
        except DegenerateCorrespondencesError:
            break
        transform = compose(delta, transform)
        if prev_residual is not None:
            if abs(prev_residual - residual) <= rel_tol * max(prev_residual, 1e-30):
                break
        if residual == 0.0:
            break
        prev_residual = residual
    return transform


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs of the end-to-end registration pipeline."""

    voxel_size: float = 0.3
    temperature: float = matching.DEFAULT_TEMPERATURE
    ransac: RansacConfig = field(default_factory=RansacConfig)
    use_icp: bool = False
    icp_max_corr_dist: float = 1.0
    icp_max_iters: int = 50
    icp_rel_tol: float = 1e-6


def _stage(label: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(label, exc) from exc


def register_pair(
    source: PointCloud,
    target: PointCloud,
    model: ModelWeights,
    config: PipelineConfig | None = None,
) -> RegistrationResult:
    """Full registration: downsample, encode, attend, match, RANSAC, optional ICP.

    Deterministic given the RANSAC seed; per-stage wall-clock seconds are
    recorded in the result's ``stage_times``.
    """
    if config is None:
        config = PipelineConfig()
    stage_times: dict[str, float] = {}
    start = time.perf_counter()

    t0 = time.perf_counter()
    src = _stage("downsample", voxel_downsample, source, config.voxel_size)
    tgt = _stage("downsample", voxel_downsample, target, config.voxel_size)
    stage_times["downsample"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    src_kp = _stage("encode", encode, src, model.encoder)
    tgt_kp = _stage("encode", encode, tgt, model.encoder)
    stage_times["encode"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    att = model.attention
    k = model.attention_k
    src_kp = _stage("attention", attention.self_attention, src_kp, att.self_wf, att.self_ws, k)
    tgt_kp = _stage("attention", attention.self_attention, tgt_kp, att.self_wf, att.self_ws, k)
    src_kp, tgt_kp = _stage(
        "attention", attention.cross_attention, src_kp, tgt_kp, att.cross_wf, att.cross_ws, k
    )
    stage_times["attention"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    phi = _stage(
        "match", matching.match_probability_map,
        src_kp.features, tgt_kp.features, config.temperature,
    )
    corr = _stage(
        "match", matching.extract_correspondences, phi, src_kp.coords, tgt_kp.coords
    )
    stage_times["match"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    result = _stage("ransac", ransac_register, corr, config.ransac)
    stage_times["ransac"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if config.use_icp:
        refined = _stage(
            "icp", icp_refine, src, tgt, result.transform,
            config.icp_max_corr_dist, config.icp_max_iters, config.icp_rel_tol,
        )
        count, inliers = count_inliers(corr, refined, config.ransac.inlier_threshold)
        result.transform = refined
        result.inlier_count = count
        result.inlier_indices = inliers
    stage_times["icp"] = time.perf_counter() - t0

    result.stage_times = stage_times
    result.elapsed = time.perf_counter() - start
    return result
