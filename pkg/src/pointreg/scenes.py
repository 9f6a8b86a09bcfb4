"""Synthetic lidar scene pairs with exact ground truth.

A scene is a random primitive world (bounded ground plane, boxes, vertical
cylinders, thin walls, each with its own albedo) scanned by two lidar poses
whose separation is drawn uniformly up to a configured maximum. Each scan is
ray-cast against the primitives (nearest hit when occlusion is on,
range-limited), perturbed with isotropic Gaussian noise, and expressed in
its own sensor frame. The relative pose between the two sensor frames is
recorded exactly, giving noise-free ground truth for evaluation and
training.

Generated coordinates and intensities are rounded to float32 so that the
binary dataset files round-trip bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    PointCloud,
    RigidTransform,
    overlap_ratio,
    rotation_about_z,
    rotation_error,
)
from .io import load_freg, save_freg

OVERLAP_GAMMA = 0.3
MIN_CLOUD_POINTS = 2000
MAX_GENERATION_ATTEMPTS = 10
SENSOR_HEIGHT = 1.7
MIN_RAY_RANGE = 0.5

MANIFEST_NAME = "manifest.jsonl"


class SceneGenerationError(RuntimeError):
    """Scene generation kept producing unusable clouds."""


class DatasetError(RuntimeError):
    """A dataset directory is missing files or malformed."""


@dataclass(frozen=True)
class SensorModel:
    max_range: float = 80.0
    num_fans: int = 64
    fan_min_deg: float = -25.0
    fan_max_deg: float = 5.0
    azimuth_step_deg: float = 0.4


@dataclass(frozen=True)
class SceneConfig:
    world_extent: float = 50.0
    num_boxes: int = 14
    num_cylinders: int = 8
    num_walls: int = 4
    sensor: SensorModel = field(default_factory=SensorModel)
    max_sensor_separation: float = 30.0
    occlusion: bool = True
    noise_sigma: float = 0.01
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.world_extent <= 0:
            raise ValueError("world_extent must be positive")
        if self.max_sensor_separation > self.world_extent:
            raise ValueError("max_sensor_separation cannot exceed world_extent")
        if min(self.num_boxes, self.num_cylinders, self.num_walls) < 0:
            raise ValueError("primitive counts must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass(frozen=True, eq=False)
class ScenePair:
    """Source/target clouds with their exact relative pose and overlap."""

    source: PointCloud
    target: PointCloud
    ground_truth: RigidTransform  # maps source frame into target frame
    overlap: float
    scene_id: str


@dataclass(frozen=True)
class _Box:
    center: np.ndarray
    half_extents: np.ndarray
    yaw: float
    albedo: float


@dataclass(frozen=True)
class _Cylinder:
    center_xy: np.ndarray
    radius: float
    z_top: float
    albedo: float


def _build_world(cfg: SceneConfig, rng: np.random.Generator):
    half = cfg.world_extent / 2.0
    ground_albedo = rng.uniform(0.05, 0.95)
    boxes: list[_Box] = []
    for _ in range(cfg.num_boxes):
        size = rng.uniform([0.4, 0.4, 0.5], [2.5, 2.5, 2.0])
        center_xy = rng.uniform(-0.9 * half, 0.9 * half, 2)
        boxes.append(
            _Box(
                center=np.array([center_xy[0], center_xy[1], size[2]]),
                half_extents=size,
                yaw=rng.uniform(0.0, 2.0 * np.pi),
                albedo=rng.uniform(0.05, 0.95),
            )
        )
    for _ in range(cfg.num_walls):
        length = rng.uniform(2.0, 6.0)
        height = rng.uniform(1.0, 2.0)
        center_xy = rng.uniform(-0.9 * half, 0.9 * half, 2)
        boxes.append(
            _Box(
                center=np.array([center_xy[0], center_xy[1], height]),
                half_extents=np.array([length, 0.15, height]),
                yaw=rng.uniform(0.0, 2.0 * np.pi),
                albedo=rng.uniform(0.05, 0.95),
            )
        )
    cylinders: list[_Cylinder] = []
    for _ in range(cfg.num_cylinders):
        cylinders.append(
            _Cylinder(
                center_xy=rng.uniform(-0.9 * half, 0.9 * half, 2),
                radius=rng.uniform(0.3, 1.2),
                z_top=rng.uniform(2.0, 7.0),
                albedo=rng.uniform(0.05, 0.95),
            )
        )
    return ground_albedo, boxes, cylinders


def _inside_primitive(pos: np.ndarray, boxes, cylinders, margin: float = 0.6) -> bool:
    for box in boxes:
        local = rotation_about_z(box.yaw).T @ (pos - box.center)
        if (np.abs(local) <= box.half_extents + margin).all():
            return True
    for cyl in cylinders:
        if np.linalg.norm(pos[:2] - cyl.center_xy) <= cyl.radius + margin:
            return True
    return False


def _ray_directions(sensor: SensorModel) -> np.ndarray:
    elevations = np.deg2rad(
        np.linspace(sensor.fan_min_deg, sensor.fan_max_deg, sensor.num_fans)
    )
    azimuths = np.deg2rad(np.arange(0.0, 360.0, sensor.azimuth_step_deg))
    el, az = np.meshgrid(elevations, azimuths, indexing="ij")
    cos_el = np.cos(el)
    dirs = np.stack(
        [cos_el * np.cos(az), cos_el * np.sin(az), np.sin(el)], axis=-1
    )
    return dirs.reshape(-1, 3)


def _ray_ground(origin, dirs, half: float) -> np.ndarray:
    t = np.full(dirs.shape[0], np.inf)
    going_down = dirs[:, 2] < -1e-12
    t_candidate = -origin[2] / dirs[going_down, 2]
    hits_xy = origin[:2] + t_candidate[:, None] * dirs[going_down, :2]
    valid = (np.abs(hits_xy) <= half).all(axis=1) & (t_candidate > MIN_RAY_RANGE)
    sub = np.full(t_candidate.shape, np.inf)
    sub[valid] = t_candidate[valid]
    t[going_down] = sub
    return t


def _ray_box(origin, dirs, box: _Box) -> np.ndarray:
    rot = rotation_about_z(box.yaw)
    local_origin = rot.T @ (origin - box.center)
    local_dirs = dirs @ rot
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / local_dirs
        t1 = (-box.half_extents - local_origin) * inv
        t2 = (box.half_extents - local_origin) * inv
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    # Rays parallel to a slab axis: inside keeps the slab open, outside misses.
    parallel = np.abs(local_dirs) < 1e-12
    outside = np.abs(local_origin) > box.half_extents
    near[parallel] = -np.inf
    far[parallel] = np.inf
    miss_parallel = (parallel & outside[None, :]).any(axis=1)
    t_near = near.max(axis=1)
    t_far = far.min(axis=1)
    hit = (t_near <= t_far) & (t_near > MIN_RAY_RANGE) & ~miss_parallel
    t = np.full(dirs.shape[0], np.inf)
    t[hit] = t_near[hit]
    return t


def _ray_cylinder(origin, dirs, cyl: _Cylinder) -> np.ndarray:
    rel = origin[:2] - cyl.center_xy
    a = (dirs[:, :2] ** 2).sum(axis=1)
    b = 2.0 * (dirs[:, :2] @ rel)
    c = rel @ rel - cyl.radius**2
    disc = b * b - 4.0 * a * c
    t = np.full(dirs.shape[0], np.inf)
    solvable = (disc >= 0.0) & (a > 1e-12)
    sqrt_disc = np.sqrt(disc[solvable])
    for sign in (-1.0, 1.0):
        root = (-b[solvable] + sign * sqrt_disc) / (2.0 * a[solvable])
        z = origin[2] + root * dirs[solvable, 2]
        ok = (root > MIN_RAY_RANGE) & (z >= 0.0) & (z <= cyl.z_top)
        current = t[solvable]
        better = ok & (root < current)
        current[better] = root[better]
        t[solvable] = current
    return t


def _scan(cfg: SceneConfig, origin, yaw, ground_albedo, boxes, cylinders):
    rot = rotation_about_z(yaw)
    dirs = _ray_directions(cfg.sensor) @ rot.T
    hits_t = [_ray_ground(origin, dirs, cfg.world_extent / 2.0)]
    albedos = [ground_albedo]
    for box in boxes:
        hits_t.append(_ray_box(origin, dirs, box))
        albedos.append(box.albedo)
    for cyl in cylinders:
        hits_t.append(_ray_cylinder(origin, dirs, cyl))
        albedos.append(cyl.albedo)
    t = np.stack(hits_t, axis=0)
    t[t > cfg.sensor.max_range] = np.inf
    albedos = np.asarray(albedos)
    if cfg.occlusion:
        nearest = t.argmin(axis=0)
        t_best = np.take_along_axis(t, nearest[None, :], axis=0)[0]
        returned = np.isfinite(t_best)
        points = origin + t_best[returned, None] * dirs[returned]
        intensity = albedos[nearest[returned]]
    else:
        prim_idx, ray_idx = np.nonzero(np.isfinite(t))
        points = origin + t[prim_idx, ray_idx][:, None] * dirs[ray_idx]
        intensity = albedos[prim_idx]
    return points, intensity


def _round_f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def _attempt_scene(cfg: SceneConfig, rng: np.random.Generator, scene_id: str):
    ground_albedo, boxes, cylinders = _build_world(cfg, rng)
    half = cfg.world_extent / 2.0
    for _ in range(50):
        pos1 = np.array([*rng.uniform(-0.6 * half, 0.6 * half, 2), SENSOR_HEIGHT])
        if not _inside_primitive(pos1, boxes, cylinders):
            break
    separation = rng.uniform(0.0, cfg.max_sensor_separation)
    heading = rng.uniform(0.0, 2.0 * np.pi)
    offset = separation * np.array([np.cos(heading), np.sin(heading), 0.0])
    pos2 = pos1 + offset
    pos2[:2] = np.clip(pos2[:2], -0.8 * half, 0.8 * half)
    yaw1, yaw2 = rng.uniform(0.0, 2.0 * np.pi, 2)

    clouds = []
    for pos, yaw in ((pos1, yaw1), (pos2, yaw2)):
        world_pts, intensity = _scan(cfg, pos, yaw, ground_albedo, boxes, cylinders)
        if world_pts.shape[0] < MIN_CLOUD_POINTS:
            return None
        local = (world_pts - pos) @ rotation_about_z(yaw)
        if cfg.noise_sigma > 0:
            local = local + rng.normal(0.0, cfg.noise_sigma, local.shape)
        clouds.append(PointCloud(_round_f32(local), _round_f32(intensity)))

    rot1, rot2 = rotation_about_z(yaw1), rotation_about_z(yaw2)
    gt = RigidTransform(rot2.T @ rot1, rot2.T @ (pos1 - pos2))
    overlap = overlap_ratio(clouds[0], clouds[1], gt, OVERLAP_GAMMA)
    return ScenePair(clouds[0], clouds[1], gt, overlap, scene_id)


def generate_scene(
    cfg: SceneConfig,
    rng: int | np.random.SeedSequence | None = None,
    scene_id: str = "scene",
) -> ScenePair:
    """Generate one scene pair; regenerates with derived sub-seeds when a
    scan returns fewer than the minimum number of points."""
    if rng is None:
        rng = np.random.SeedSequence(cfg.rng_seed)
    elif isinstance(rng, int):
        rng = np.random.SeedSequence(rng)
    for child in rng.spawn(MAX_GENERATION_ATTEMPTS):
        pair = _attempt_scene(cfg, np.random.Generator(np.random.PCG64(child)), scene_id)
        if pair is not None:
            return pair
    raise SceneGenerationError(
        f"{scene_id}: all {MAX_GENERATION_ATTEMPTS} attempts produced fewer than "
        f"{MIN_CLOUD_POINTS} points; enlarge the sensor model or the world"
    )


def generate_dataset(cfg: SceneConfig, count: int) -> list[ScenePair]:
    """Generate `count` scene pairs, each from its own derived seed stream."""
    root = np.random.SeedSequence(cfg.rng_seed)
    pairs = []
    for i, child in enumerate(root.spawn(count)):
        scene_id = f"s{cfg.rng_seed:08x}_{i:04d}"
        pairs.append(generate_scene(cfg, child, scene_id))
    return pairs


def dataset_save(pairs: list[ScenePair], directory) -> None:
    """Write clouds as FREG binaries plus a JSONL manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / MANIFEST_NAME, "w") as manifest:
        for pair in pairs:
            source_file = f"{pair.scene_id}_source.freg"
            target_file = f"{pair.scene_id}_target.freg"
            save_freg(pair.source, directory / source_file)
            save_freg(pair.target, directory / target_file)
            record = {
                "scene_id": pair.scene_id,
                "source_file": source_file,
                "target_file": target_file,
                "ground_truth": pair.ground_truth.matrix().reshape(-1).tolist(),
                "overlap": pair.overlap,
                "separation": float(np.linalg.norm(pair.ground_truth.translation)),
            }
            manifest.write(json.dumps(record) + "\n")


def dataset_load(directory) -> list[ScenePair]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetError(f"missing manifest: {manifest_path}")
    pairs = []
    with open(manifest_path) as manifest:
        for lineno, line in enumerate(manifest, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{manifest_path}:{lineno}: bad record ({exc})") from exc
            try:
                source_file = directory / record["source_file"]
                target_file = directory / record["target_file"]
                matrix = np.asarray(record["ground_truth"], dtype=np.float64)
                scene_id = record["scene_id"]
                overlap = float(record["overlap"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(
                    f"{manifest_path}:{lineno}: incomplete record ({exc})"
                ) from exc
            for path in (source_file, target_file):
                if not path.is_file():
                    raise DatasetError(f"{manifest_path}:{lineno}: missing file {path}")
            pairs.append(
                ScenePair(
                    source=load_freg(source_file),
                    target=load_freg(target_file),
                    ground_truth=RigidTransform.from_matrix(matrix.reshape(4, 4)),
                    overlap=overlap,
                    scene_id=scene_id,
                )
            )
    return pairs


def dataset_statistics(pairs: list[ScenePair]) -> dict[str, np.ndarray]:
    """Empirical CDFs of relative distance, rotation angle, and overlap.

    Returns, per quantity, an (n, 2) array of (value, cumulative fraction)
    rows sorted by value.
    """
    if not pairs:
        raise ValueError("dataset_statistics requires at least one pair")
    identity = RigidTransform.identity()
    quantities = {
        "relative_distance": np.array(
            [np.linalg.norm(p.ground_truth.translation) for p in pairs]
        ),
        "rotation_angle_deg": np.array(
            [rotation_error(p.ground_truth, identity) for p in pairs]
        ),
        "overlap_ratio": np.array([p.overlap for p in pairs]),
    }
    n = len(pairs)
    fractions = np.arange(1, n + 1) / n
    return {
        name: np.column_stack([np.sort(values), fractions])
        for name, values in quantities.items()
    }
