"""Flat key-value configuration files.

The format is one ``section.key = value`` assignment per line, with ``#``
comments and blank lines ignored, e.g.::

    model.preset = desk
    encoder.sa1.radius = 1.0
    ransac.kappa = 0.5

Unknown keys are rejected by name so that typos fail loudly.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from .estimation import PipelineConfig, RansacConfig
from .model import PRESETS, ModelConfig, SAStageConfig
from .scenes import SceneConfig, SensorModel
from .training import TrainConfig


class ConfigError(ValueError):
    """A configuration file is malformed or uses an unknown key."""


def parse_config_text(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value in {raw!r}")
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


def load_config(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    entries = parse_config_text(text)
    validate_keys(entries)
    return entries


def _parse_bool(key: str, value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _parse_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from exc


def _parse_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from exc


def _parse_widths(key: str, value: str) -> tuple[int, ...]:
    try:
        widths = tuple(int(part.strip()) for part in value.split(","))
    except ValueError as exc:
        raise ConfigError(f"{key}: expected comma-separated widths, got {value!r}") from exc
    if not widths or any(w < 1 for w in widths):
        raise ConfigError(f"{key}: widths must be positive, got {value!r}")
    return widths


_SCENE_KEYS = {
    "scene.world_extent", "scene.boxes", "scene.cylinders", "scene.walls",
    "scene.max_separation", "scene.occlusion", "scene.noise_sigma",
    "sensor.range", "sensor.fans", "sensor.fan_min_deg", "sensor.fan_max_deg",
    "sensor.azimuth_step_deg",
}
_MODEL_KEYS = {"model.preset", "encoder.max_neighbors", "attention.k", "encoder.fp.widths"}
for _i in range(1, 5):
    _MODEL_KEYS |= {
        f"encoder.sa{_i}.n", f"encoder.sa{_i}.radius", f"encoder.sa{_i}.widths"
    }
_PIPELINE_KEYS = {
    "pipeline.voxel_size", "pipeline.temperature",
    "ransac.kappa", "ransac.confidence", "ransac.max_iterations",
    "icp.max_corr_dist", "icp.max_iters", "icp.rel_tol",
}
_TRAIN_KEYS = {
    "train.learning_rate", "train.lr_halving_period", "train.epochs",
    "train.batch_size", "train.loss_scale", "train.label_radius",
}

KNOWN_KEYS = _SCENE_KEYS | _MODEL_KEYS | _PIPELINE_KEYS | _TRAIN_KEYS


def validate_keys(entries: dict[str, str]) -> None:
    unknown = sorted(set(entries) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]!r}")


def scene_config(entries: dict[str, str], seed: int = 0) -> SceneConfig:
    sensor = SensorModel(
        max_range=_parse_float("sensor.range", entries.get("sensor.range", "80.0")),
        num_fans=_parse_int("sensor.fans", entries.get("sensor.fans", "64")),
        fan_min_deg=_parse_float(
            "sensor.fan_min_deg", entries.get("sensor.fan_min_deg", "-25.0")
        ),
        fan_max_deg=_parse_float(
            "sensor.fan_max_deg", entries.get("sensor.fan_max_deg", "5.0")
        ),
        azimuth_step_deg=_parse_float(
            "sensor.azimuth_step_deg", entries.get("sensor.azimuth_step_deg", "0.4")
        ),
    )
    try:
        return SceneConfig(
            world_extent=_parse_float(
                "scene.world_extent", entries.get("scene.world_extent", "50.0")
            ),
            num_boxes=_parse_int("scene.boxes", entries.get("scene.boxes", "14")),
            num_cylinders=_parse_int(
                "scene.cylinders", entries.get("scene.cylinders", "8")
            ),
            num_walls=_parse_int("scene.walls", entries.get("scene.walls", "4")),
            sensor=sensor,
            max_sensor_separation=_parse_float(
                "scene.max_separation", entries.get("scene.max_separation", "30.0")
            ),
            occlusion=_parse_bool(
                "scene.occlusion", entries.get("scene.occlusion", "true")
            ),
            noise_sigma=_parse_float(
                "scene.noise_sigma", entries.get("scene.noise_sigma", "0.01")
            ),
            rng_seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def model_config(entries: dict[str, str]) -> ModelConfig:
    preset_name = entries.get("model.preset", "desk")
    if preset_name not in PRESETS:
        raise ConfigError(
            f"model.preset: expected one of {sorted(PRESETS)}, got {preset_name!r}"
        )
    base = PRESETS[preset_name]()
    stages = []
    for i, stage in enumerate(base.sa_stages, start=1):
        stages.append(
            SAStageConfig(
                num_samples=_parse_int(
                    f"encoder.sa{i}.n",
                    entries.get(f"encoder.sa{i}.n", str(stage.num_samples)),
                ),
                radius=_parse_float(
                    f"encoder.sa{i}.radius",
                    entries.get(f"encoder.sa{i}.radius", str(stage.radius)),
                ),
                widths=(
                    _parse_widths(f"encoder.sa{i}.widths", entries[f"encoder.sa{i}.widths"])
                    if f"encoder.sa{i}.widths" in entries
                    else stage.widths
                ),
            )
        )
    try:
        return ModelConfig(
            sa_stages=tuple(stages),
            fp_widths=(
                _parse_widths("encoder.fp.widths", entries["encoder.fp.widths"])
                if "encoder.fp.widths" in entries
                else base.fp_widths
            ),
            attention_k=_parse_int(
                "attention.k", entries.get("attention.k", str(base.attention_k))
            ),
            max_neighbors=_parse_int(
                "encoder.max_neighbors",
                entries.get("encoder.max_neighbors", str(base.max_neighbors)),
            ),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def pipeline_config(
    entries: dict[str, str], seed: int = 0, use_icp: bool = False
) -> PipelineConfig:
    try:
        ransac = RansacConfig(
            inlier_threshold=_parse_float(
                "ransac.kappa", entries.get("ransac.kappa", "0.5")
            ),
            confidence=_parse_float(
                "ransac.confidence", entries.get("ransac.confidence", "0.999")
            ),
            max_iterations=_parse_int(
                "ransac.max_iterations", entries.get("ransac.max_iterations", "100000")
            ),
            rng_seed=seed,
        )
        return PipelineConfig(
            voxel_size=_parse_float(
                "pipeline.voxel_size", entries.get("pipeline.voxel_size", "0.3")
            ),
            temperature=_parse_float(
                "pipeline.temperature", entries.get("pipeline.temperature", "0.01")
            ),
            ransac=ransac,
            use_icp=use_icp,
            icp_max_corr_dist=_parse_float(
                "icp.max_corr_dist", entries.get("icp.max_corr_dist", "1.0")
            ),
            icp_max_iters=_parse_int(
                "icp.max_iters", entries.get("icp.max_iters", "50")
            ),
            icp_rel_tol=_parse_float("icp.rel_tol", entries.get("icp.rel_tol", "1e-6")),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def train_config(entries: dict[str, str], seed: int = 0) -> TrainConfig:
    try:
        return TrainConfig(
            learning_rate=_parse_float(
                "train.learning_rate", entries.get("train.learning_rate", "0.01")
            ),
            lr_halving_period=_parse_int(
                "train.lr_halving_period", entries.get("train.lr_halving_period", "5")
            ),
            epochs=_parse_int("train.epochs", entries.get("train.epochs", "20")),
            batch_size=_parse_int(
                "train.batch_size", entries.get("train.batch_size", "6")
            ),
            loss_scale=_parse_float(
                "train.loss_scale", entries.get("train.loss_scale", "10.0")
            ),
            label_radius=_parse_float(
                "train.label_radius", entries.get("train.label_radius", "1.6")
            ),
            rng_seed=seed,
            voxel_size=_parse_float(
                "pipeline.voxel_size", entries.get("pipeline.voxel_size", "0.3")
            ),
            temperature=_parse_float(
                "pipeline.temperature", entries.get("pipeline.temperature", "0.01")
            ),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
