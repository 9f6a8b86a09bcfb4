"""Hierarchical point-wise feature encoder.

Four set-abstraction (SA) stages progressively subsample the cloud and
aggregate neighborhood features; one feature-propagation (FP) stage
interpolates the coarsest features back onto the third stage's coordinates.
The output is a fixed-size key-point set (512 points with 128-dimensional
features at the full-size configuration).

Each SA stage:

1. samples ``num_samples`` centers by farthest point sampling,
2. gathers the radius neighborhood of every center (capped, always
   containing the center itself),
3. runs each neighbor's ``[offset, features]`` row through a shared
   ReLU MLP,
4. max-pools the MLP outputs element-wise over the neighborhood.

The FP stage interpolates the coarse features with inverse-distance weights
of the three nearest coarse points, concatenates the skip features, and
applies a final shared ReLU MLP. Backward passes route max-pool subgradients
to the element-wise argmax (lowest index on ties) so that analytic gradients
match finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    DEFAULT_MAX_NEIGHBORS,
    InsufficientPointsError,
    PointCloud,
    farthest_point_sample,
    knn,
    radius_neighbors,
)

# Distances are clamped below this before inverse-distance weighting.
MIN_INTERP_DISTANCE = 1e-8


@dataclass(frozen=True, eq=False)
class KeyPointSet:
    """Sampled coordinates with one feature vector per point."""

    coords: np.ndarray
    features: np.ndarray

    def __post_init__(self) -> None:
        coords = np.asarray(self.coords, dtype=np.float64)
        features = np.asarray(self.features, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"coords must be (N, 3), got {coords.shape}")
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise ValueError(
                f"features {features.shape} do not match {coords.shape[0]} coords"
            )
        if not np.isfinite(features).all():
            raise ValueError("features must be finite")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", features)

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass
class SALayerParams:
    """One set-abstraction stage: sampling size, radius, and its MLP."""

    num_samples: int
    radius: float
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    max_neighbors: int = DEFAULT_MAX_NEIGHBORS

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights)

    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def output_dim(self) -> int:
        return self.weights[-1].shape[1]


@dataclass
class FPLayerParams:
    """Feature-propagation stage: the MLP fusing skip and interpolated features."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def output_dim(self) -> int:
        return self.weights[-1].shape[1]


@dataclass
class EncoderWeights:
    """Four SA stages plus the final FP stage."""

    sa_layers: list[SALayerParams]
    fp: FPLayerParams

    def output_dim(self) -> int:
        return self.fp.output_dim()

    def validate(self, input_feature_dim: int = 1) -> None:
        """Check the whole dimension chain, radii growth, and MLP shapes."""
        if len(self.sa_layers) != 4:
            raise ValueError(f"expected 4 SA stages, got {len(self.sa_layers)}")
        feat_dim = input_feature_dim
        prev_radius = 0.0
        prev_samples = None
        for i, layer in enumerate(self.sa_layers, start=1):
            if layer.num_samples < 1:
                raise ValueError(f"sa{i}: num_samples must be >= 1")
            if layer.radius <= prev_radius:
                raise ValueError(f"sa{i}: radii must strictly increase per stage")
            if prev_samples is not None and layer.num_samples > prev_samples:
                raise ValueError(f"sa{i}: sample counts must not grow")
            _validate_mlp(layer.weights, layer.biases, 3 + feat_dim, f"sa{i}")
            feat_dim = layer.output_dim()
            prev_radius = layer.radius
            prev_samples = layer.num_samples
        skip_dim = self.sa_layers[2].output_dim()
        upper_dim = self.sa_layers[3].output_dim()
        _validate_mlp(self.fp.weights, self.fp.biases, skip_dim + upper_dim, "fp")


def _validate_mlp(weights, biases, expected_in: int, label: str) -> None:
    if not weights or len(weights) != len(biases):
        raise ValueError(f"{label}: malformed MLP parameter lists")
    dim = expected_in
    for j, (w, b) in enumerate(zip(weights, biases)):
        if w.ndim != 2 or w.shape[0] != dim:
            raise ValueError(
                f"{label}.mlp.{j}: weight shape {w.shape} does not chain from {dim}"
            )
        if b.shape != (w.shape[1],):
            raise ValueError(f"{label}.mlp.{j}: bias shape {b.shape} mismatches weight")
        dim = w.shape[1]


@dataclass
class _MLPCache:
    activations: list[np.ndarray]
    pre_activations: list[np.ndarray]


def _mlp_forward(x, weights, biases) -> tuple[np.ndarray, _MLPCache]:
    activations = [x]
    pre_activations = []
    h = x
    for w, b in zip(weights, biases):
        z = h @ w + b
        pre_activations.append(z)
        h = np.maximum(z, 0.0)
        activations.append(h)
    return h, _MLPCache(activations[:-1], pre_activations)


def _mlp_backward(cache: _MLPCache, weights, grad_out):
    grads_w = [None] * len(weights)
    grads_b = [None] * len(weights)
    g = grad_out
    for j in range(len(weights) - 1, -1, -1):
        g = g * (cache.pre_activations[j] > 0.0)
        grads_w[j] = cache.activations[j].T @ g
        grads_b[j] = g.sum(axis=0)
        g = g @ weights[j].T
    return g, grads_w, grads_b


@dataclass
class _SACache:
    neighbor_idx: np.ndarray  # (n, K) padded
    valid: np.ndarray  # (n, K) bool
    argmax_slot: np.ndarray  # (n, out_dim)
    mlp: _MLPCache
    num_input_points: int
    input_feature_dim: int


def _gather_neighborhoods(
    centers: np.ndarray,
    center_indices: np.ndarray,
    coords: np.ndarray,
    radius: float,
    max_neighbors: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Padded neighbor index matrix plus validity mask.

    The center point is guaranteed to appear in its own list; if the cap was
    filled by coincident lower-index points, the center replaces the last
    entry.
    """
    lists = radius_neighbors(centers, coords, radius, max_neighbors)
    for i, own in enumerate(center_indices):
        if not (lists[i] == own).any():
            repl = lists[i].copy()
            if repl.size < max_neighbors:
                repl = np.append(repl, own)
            else:
                repl[-1] = own
            lists[i] = repl
    width = max(lst.size for lst in lists)
    neighbor_idx = np.zeros((len(lists), width), dtype=np.int64)
    valid = np.zeros((len(lists), width), dtype=bool)
    for i, lst in enumerate(lists):
        neighbor_idx[i, : lst.size] = lst
        valid[i, : lst.size] = True
    return neighbor_idx, valid


def _sa_forward(coords, features, params: SALayerParams, seed_index: int):
    n = params.num_samples
    if coords.shape[0] < n:
        raise InsufficientPointsError(
            f"SA stage needs {n} points, got {coords.shape[0]}"
        )
    selected = farthest_point_sample(coords, n, seed_index)
    centers = coords[selected]
    neighbor_idx, valid = _gather_neighborhoods(
        centers, selected, coords, params.radius, params.max_neighbors
    )
    width = neighbor_idx.shape[1]
    offsets = coords[neighbor_idx] - centers[:, None, :]
    x = np.concatenate([offsets, features[neighbor_idx]], axis=2)
    x = x.reshape(n * width, -1)
    h, mlp_cache = _mlp_forward(x, params.weights, params.biases)
    out_dim = h.shape[1]
    h = h.reshape(n, width, out_dim)
    masked = np.where(valid[:, :, None], h, -np.inf)
    argmax_slot = masked.argmax(axis=1)
    pooled = np.take_along_axis(masked, argmax_slot[:, None, :], axis=1)[:, 0, :]
    cache = _SACache(
        neighbor_idx, valid, argmax_slot, mlp_cache,
        coords.shape[0], features.shape[1],
    )
    return centers, pooled, cache


def _sa_backward(cache: _SACache, params: SALayerParams, grad_pooled):
    n, width = cache.neighbor_idx.shape
    out_dim = grad_pooled.shape[1]
    grad_h = np.zeros((n, width, out_dim))
    np.put_along_axis(grad_h, cache.argmax_slot[:, None, :], grad_pooled[:, None, :], axis=1)
    grad_x, grads_w, grads_b = _mlp_backward(
        cache.mlp, params.weights, grad_h.reshape(n * width, out_dim)
    )
    grad_x = grad_x.reshape(n, width, -1)
    grad_features = np.zeros((cache.num_input_points, cache.input_feature_dim))
    np.add.at(
        grad_features,
        cache.neighbor_idx[cache.valid],
        grad_x[cache.valid][:, 3:],
    )
    return grad_features, grads_w, grads_b


@dataclass
class _FPCache:
    nn_idx: np.ndarray  # (L, 3)
    interp_weights: np.ndarray  # (L, 3)
    mlp: _MLPCache
    skip_dim: int
    num_upper: int
    upper_dim: int


def _fp_forward(lower_coords, lower_features, upper_coords, upper_features, params):
    if upper_coords.shape[0] < 3:
        raise InsufficientPointsError(
            f"FP stage needs at least 3 coarse points, got {upper_coords.shape[0]}"
        )
    nn_idx = knn(lower_coords, upper_coords, 3)
    diffs = upper_coords[nn_idx] - lower_coords[:, None, :]
    dist = np.sqrt((diffs**2).sum(axis=2))
    inv = 1.0 / np.maximum(dist, MIN_INTERP_DISTANCE)
    interp_weights = inv / inv.sum(axis=1, keepdims=True)
    interp = (upper_features[nn_idx] * interp_weights[:, :, None]).sum(axis=1)
    x = np.concatenate([lower_features, interp], axis=1)
    h, mlp_cache = _mlp_forward(x, params.weights, params.biases)
    cache = _FPCache(
        nn_idx, interp_weights, mlp_cache,
        lower_features.shape[1], upper_coords.shape[0], upper_features.shape[1],
    )
    return h, cache


def _fp_backward(cache: _FPCache, params: FPLayerParams, grad_out):
    grad_x, grads_w, grads_b = _mlp_backward(cache.mlp, params.weights, grad_out)
    grad_skip = grad_x[:, : cache.skip_dim]
    grad_interp = grad_x[:, cache.skip_dim :]
    grad_upper = np.zeros((cache.num_upper, cache.upper_dim))
    np.add.at(
        grad_upper,
        cache.nn_idx,
        cache.interp_weights[:, :, None] * grad_interp[:, None, :],
    )
    return grad_skip, grad_upper, grads_w, grads_b


def sa_layer(coords, features, params: SALayerParams, seed_index: int = 0):
    """Run one set-abstraction stage; returns (sampled_coords, features)."""
    coords = np.asarray(coords, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    centers, pooled, _ = _sa_forward(coords, features, params, seed_index)
    return centers, pooled


def fp_layer(lower_coords, lower_features, upper_coords, upper_features, params):
    """Interpolate coarse features onto the lower coordinates and fuse skips."""
    out, _ = _fp_forward(
        np.asarray(lower_coords, dtype=np.float64),
        np.asarray(lower_features, dtype=np.float64),
        np.asarray(upper_coords, dtype=np.float64),
        np.asarray(upper_features, dtype=np.float64),
        params,
    )
    return out


@dataclass
class _EncodeCache:
    sa_caches: list[_SACache]
    fp_cache: _FPCache


def input_features(cloud: PointCloud) -> np.ndarray:
    """Per-point encoder input: the intensity scalar, or 1.0 when absent."""
    if cloud.intensity is not None:
        return cloud.intensity[:, None].copy()
    return np.ones((len(cloud), 1))


def _encode_forward(coords, features, weights: EncoderWeights, seed_index: int = 0):
    sa_caches = []
    level_coords = [coords]
    level_features = [features]
    c, f = coords, features
    for params in weights.sa_layers:
        c, f, cache = _sa_forward(c, f, params, seed_index)
        sa_caches.append(cache)
        level_coords.append(c)
        level_features.append(f)
    out, fp_cache = _fp_forward(
        level_coords[3], level_features[3], level_coords[4], level_features[4],
        weights.fp,
    )
    keypoints = KeyPointSet(level_coords[3], out)
    return keypoints, _EncodeCache(sa_caches, fp_cache)


def _encode_backward(cache: _EncodeCache, weights: EncoderWeights, grad_features):
    """Gradients of all encoder tensors given the key-point feature gradient."""
    grads: dict[str, np.ndarray] = {}
    grad_skip, grad_upper, fw, fb = _fp_backward(cache.fp_cache, weights.fp, grad_features)
    for j, (gw, gb) in enumerate(zip(fw, fb)):
        grads[f"fp.mlp.{j}.weight"] = gw
        grads[f"fp.mlp.{j}.bias"] = gb
    grad_sa3_out, w4, b4 = _sa_backward(cache.sa_caches[3], weights.sa_layers[3], grad_upper)
    grad = grad_skip + grad_sa3_out
    for j, (gw, gb) in enumerate(zip(w4, b4)):
        grads[f"sa4.mlp.{j}.weight"] = gw
        grads[f"sa4.mlp.{j}.bias"] = gb
    for level in (2, 1, 0):
        grad, ws, bs = _sa_backward(cache.sa_caches[level], weights.sa_layers[level], grad)
        for j, (gw, gb) in enumerate(zip(ws, bs)):
            grads[f"sa{level + 1}.mlp.{j}.weight"] = gw
            grads[f"sa{level + 1}.mlp.{j}.bias"] = gb
    return grads


def encode(cloud: PointCloud, weights: EncoderWeights, seed_index: int = 0) -> KeyPointSet:
    """Encode a cloud into key points with features.

    The cloud must already be downsampled to at least the first stage's
    sample count; otherwise an InsufficientPointsError asks the caller to
    relax downsampling.
    """
    required = weights.sa_layers[0].num_samples
    if len(cloud) < required:
        raise InsufficientPointsError(
            f"encoder needs at least {required} points, got {len(cloud)}; "
            "relax downsampling or use a smaller model preset"
        )
    keypoints, _ = _encode_forward(cloud.coords, input_features(cloud), weights, seed_index)
    return keypoints
