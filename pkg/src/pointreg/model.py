"""Model configuration presets, weight initialization, and parameter naming.

A model bundles the encoder stages with the attention gate matrices. Three
presets are provided:

* ``full``  — the production architecture (512 key points, 128-d features),
* ``desk``  — a shrunk preset that trains in minutes on a laptop CPU,
* ``tiny``  — a few-point configuration small enough for finite-difference
  gradient checks.

Trainable tensors are exposed as an ordered name -> array mapping
("sa1.mlp.0.weight", "att.cross.ws", ...) shared by the optimizer, the
gradient checks, and the weights file.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionWeights
from .encoder import EncoderWeights, FPLayerParams, SALayerParams
from .geometry import DEFAULT_MAX_NEIGHBORS

INPUT_FEATURE_DIM = 1  # intensity scalar (or the 1.0 placeholder)


@dataclass(frozen=True)
class SAStageConfig:
    num_samples: int
    radius: float
    widths: tuple[int, ...]


@dataclass(frozen=True)
class ModelConfig:
    sa_stages: tuple[SAStageConfig, ...]
    fp_widths: tuple[int, ...]
    attention_k: int = 32
    max_neighbors: int = DEFAULT_MAX_NEIGHBORS

    def __post_init__(self) -> None:
        if len(self.sa_stages) != 4:
            raise ValueError("a model has exactly 4 SA stages")
        radii = [s.radius for s in self.sa_stages]
        if any(b <= a for a, b in zip(radii, radii[1:])):
            raise ValueError(f"SA radii must strictly increase, got {radii}")
        if not self.fp_widths:
            raise ValueError("fp_widths must be non-empty")
        if self.attention_k < 1:
            raise ValueError("attention_k must be >= 1")

    @property
    def feature_dim(self) -> int:
        return self.fp_widths[-1]

    @property
    def num_keypoints(self) -> int:
        return self.sa_stages[2].num_samples


def full_config() -> ModelConfig:
    """Production preset: 512 key points with 128-d features."""
    return ModelConfig(
        sa_stages=(
            SAStageConfig(4096, 1.0, (32, 32)),
            SAStageConfig(2048, 2.0, (64, 64)),
            SAStageConfig(512, 4.0, (128, 128)),
            SAStageConfig(128, 8.0, (256, 256)),
        ),
        fp_widths=(128, 128),
    )


def desk_config() -> ModelConfig:
    """Shrunk preset for fast CPU training: 64 key points, 32-d features."""
    return ModelConfig(
        sa_stages=(
            SAStageConfig(256, 1.0, (8, 8)),
            SAStageConfig(128, 2.0, (16, 16)),
            SAStageConfig(64, 4.0, (32, 32)),
            SAStageConfig(32, 8.0, (64, 64)),
        ),
        fp_widths=(32, 32),
    )


def tiny_config() -> ModelConfig:
    """Few-point preset for finite-difference gradient checks (D=4, k=2)."""
    return ModelConfig(
        sa_stages=(
            SAStageConfig(12, 0.8, (4, 4)),
            SAStageConfig(8, 1.2, (4, 4)),
            SAStageConfig(6, 1.8, (4, 4)),
            SAStageConfig(4, 2.7, (4, 4)),
        ),
        fp_widths=(4, 4),
        attention_k=2,
        max_neighbors=8,
    )


PRESETS = {"full": full_config, "desk": desk_config, "tiny": tiny_config}


@dataclass
class ModelWeights:
    """Everything needed to run the feature pipeline on a cloud pair."""

    encoder: EncoderWeights
    attention: AttentionWeights
    attention_k: int = 32

    def validate(self) -> None:
        self.encoder.validate(INPUT_FEATURE_DIM)
        self.attention.validate(self.encoder.output_dim())
        if self.attention_k < 1:
            raise ValueError("attention_k must be >= 1")

    def config(self) -> ModelConfig:
        """Recover the architecture description from the stored tensors."""
        stages = tuple(
            SAStageConfig(layer.num_samples, layer.radius, layer.widths)
            for layer in self.encoder.sa_layers
        )
        return ModelConfig(
            sa_stages=stages,
            fp_widths=tuple(w.shape[1] for w in self.encoder.fp.weights),
            attention_k=self.attention_k,
            max_neighbors=self.encoder.sa_layers[0].max_neighbors,
        )


# Weights start uniform in +-1/sqrt(fan_in); biases start at a small positive
# constant so no ReLU unit is born dead at the shallow feature scales of the
# smaller presets.
BIAS_INIT = 0.01


def _init_mlp(rng: np.random.Generator, in_dim: int, widths: tuple[int, ...]):
    weights, biases = [], []
    dim = in_dim
    for width in widths:
        bound = 1.0 / np.sqrt(dim)
        weights.append(rng.uniform(-bound, bound, size=(dim, width)))
        biases.append(np.full(width, BIAS_INIT))
        dim = width
    return weights, biases


def init_model(config: ModelConfig, seed: int = 0) -> ModelWeights:
    """Fresh weights, uniform in +-1/sqrt(fan_in), from a seeded PCG64 stream."""
    rng = np.random.Generator(np.random.PCG64(seed))
    sa_layers = []
    feat_dim = INPUT_FEATURE_DIM
    for stage in config.sa_stages:
        weights, biases = _init_mlp(rng, 3 + feat_dim, stage.widths)
        sa_layers.append(
            SALayerParams(
                num_samples=stage.num_samples,
                radius=stage.radius,
                weights=weights,
                biases=biases,
                max_neighbors=config.max_neighbors,
            )
        )
        feat_dim = stage.widths[-1]
    skip_dim = config.sa_stages[2].widths[-1]
    upper_dim = config.sa_stages[3].widths[-1]
    fp_weights, fp_biases = _init_mlp(rng, skip_dim + upper_dim, config.fp_widths)
    feature_dim = config.fp_widths[-1]
    bound = 1.0 / np.sqrt(2 * feature_dim)
    att = AttentionWeights(
        self_wf=rng.uniform(-bound, bound, size=(2 * feature_dim, feature_dim)),
        self_ws=rng.uniform(-bound, bound, size=(2 * feature_dim, feature_dim)),
        cross_wf=rng.uniform(-bound, bound, size=(2 * feature_dim, feature_dim)),
        cross_ws=rng.uniform(-bound, bound, size=(2 * feature_dim, feature_dim)),
    )
    model = ModelWeights(
        encoder=EncoderWeights(sa_layers, FPLayerParams(fp_weights, fp_biases)),
        attention=att,
        attention_k=config.attention_k,
    )
    model.validate()
    return model


def named_parameters(model: ModelWeights) -> dict[str, np.ndarray]:
    """Ordered mapping of every trainable tensor; arrays are not copied."""
    params: dict[str, np.ndarray] = {}
    for i, layer in enumerate(model.encoder.sa_layers, start=1):
        for j, (w, b) in enumerate(zip(layer.weights, layer.biases)):
            params[f"sa{i}.mlp.{j}.weight"] = w
            params[f"sa{i}.mlp.{j}.bias"] = b
    for j, (w, b) in enumerate(zip(model.encoder.fp.weights, model.encoder.fp.biases)):
        params[f"fp.mlp.{j}.weight"] = w
        params[f"fp.mlp.{j}.bias"] = b
    params["att.self.wf"] = model.attention.self_wf
    params["att.self.ws"] = model.attention.self_ws
    params["att.cross.wf"] = model.attention.cross_wf
    params["att.cross.ws"] = model.attention.cross_ws
    return params


def copy_model(model: ModelWeights) -> ModelWeights:
    return copy.deepcopy(model)


def set_parameters(model: ModelWeights, values: dict[str, np.ndarray]) -> None:
    """Overwrite the model's tensors in place from a name -> array mapping."""
    params = named_parameters(model)
    if set(params) != set(values):
        missing = set(params) ^ set(values)
        raise ValueError(f"parameter names do not match: {sorted(missing)}")
    for name, arr in params.items():
        arr[...] = values[name]
