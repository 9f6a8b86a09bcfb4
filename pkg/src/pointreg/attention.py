"""Self- and cross-attention refinement of key-point features.

Both layers share one residual update rule, a gated graph convolution: for
node i with neighbors N(i),

    f_i  <-  f_i + max_{j in N(i)}  sigmoid(z_ij @ W_f) * softplus(z_ij @ W_s)

where z_ij is the concatenation [f_i, f_j] and the max is element-wise over
the neighbor terms. Self-attention builds the graph from spatial k-nearest
neighbors inside one cloud (excluding the node itself); cross-attention
builds a bipartite graph between clouds using dot-product feature similarity
and updates both sides with shared weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .encoder import KeyPointSet
from .geometry import InsufficientPointsError, knn

DEFAULT_NUM_NEIGHBORS = 32


@dataclass
class AttentionWeights:
    """Gate matrices for the self and cross layers, each (2D, D)."""

    self_wf: np.ndarray
    self_ws: np.ndarray
    cross_wf: np.ndarray
    cross_ws: np.ndarray

    def validate(self, feature_dim: int) -> None:
        expected = (2 * feature_dim, feature_dim)
        for name in ("self_wf", "self_ws", "cross_wf", "cross_ws"):
            m = getattr(self, name)
            if m.shape != expected:
                raise ValueError(f"{name} must have shape {expected}, got {m.shape}")
            if not np.isfinite(m).all():
                raise ValueError(f"{name} must be finite")


@dataclass
class _CGConvCache:
    graph: np.ndarray  # (N, k)
    z: np.ndarray  # (N*k, 2D)
    sig_a: np.ndarray  # sigmoid of the filter branch
    sig_b: np.ndarray  # sigmoid of the softplus-branch pre-activation
    softplus_b: np.ndarray
    argmax_slot: np.ndarray  # (N, D)
    num_neighbors_src: int


def _cgconv_forward(features, graph, neighbor_features, w_f, w_s):
    n, dim = features.shape
    k = graph.shape[1]
    z = np.concatenate(
        [np.repeat(features, k, axis=0), neighbor_features[graph.reshape(-1)]],
        axis=1,
    )
    a = z @ w_f
    b = z @ w_s
    sig_a = expit(a)
    sig_b = expit(b)
    softplus_b = np.logaddexp(0.0, b)
    gate = (sig_a * softplus_b).reshape(n, k, dim)
    argmax_slot = gate.argmax(axis=1)
    residual = np.take_along_axis(gate, argmax_slot[:, None, :], axis=1)[:, 0, :]
    cache = _CGConvCache(
        graph, z, sig_a, sig_b, softplus_b, argmax_slot, neighbor_features.shape[0]
    )
    return features + residual, cache


def _cgconv_backward(cache: _CGConvCache, w_f, w_s, grad_out):
    n, dim = grad_out.shape
    k = cache.graph.shape[1]
    grad_gate = np.zeros((n, k, dim))
    np.put_along_axis(grad_gate, cache.argmax_slot[:, None, :], grad_out[:, None, :], axis=1)
    grad_gate = grad_gate.reshape(n * k, dim)
    # d gate / d a = sigmoid'(a) * softplus(b);  d gate / d b = sigmoid(a) * sigmoid(b)
    grad_a = grad_gate * cache.sig_a * (1.0 - cache.sig_a) * cache.softplus_b
    grad_b = grad_gate * cache.sig_a * cache.sig_b
    grad_wf = cache.z.T @ grad_a
    grad_ws = cache.z.T @ grad_b
    grad_z = grad_a @ w_f.T + grad_b @ w_s.T
    grad_features = grad_out + grad_z[:, :dim].reshape(n, k, dim).sum(axis=1)
    grad_neighbor = np.zeros((cache.num_neighbors_src, dim))
    np.add.at(grad_neighbor, cache.graph.reshape(-1), grad_z[:, dim:])
    return grad_features, grad_neighbor, grad_wf, grad_ws


def cgconv(features, graph, neighbor_features, w_f, w_s) -> np.ndarray:
    """Apply the gated graph-convolution residual to every node.

    ``graph`` holds, per node, k indices into ``neighbor_features``. For
    self-attention pass the node features themselves as neighbors; for
    cross-attention pass the other cloud's features.
    """
    features = np.asarray(features, dtype=np.float64)
    neighbor_features = np.asarray(neighbor_features, dtype=np.float64)
    graph = np.asarray(graph, dtype=np.int64)
    if features.ndim != 2 or neighbor_features.shape[1] != features.shape[1]:
        raise ValueError("feature arrays must be 2D with equal dimensionality")
    if graph.ndim != 2 or graph.shape[0] != features.shape[0]:
        raise ValueError(f"graph shape {graph.shape} does not match the node count")
    if graph.min() < 0 or graph.max() >= neighbor_features.shape[0]:
        raise ValueError("graph indices out of range")
    out, _ = _cgconv_forward(features, graph, neighbor_features, w_f, w_s)
    return out


def build_self_graph(coords, k: int) -> np.ndarray:
    """Spatial k-NN graph within one cloud, excluding each node itself."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if n < k + 1:
        raise InsufficientPointsError(
            f"self-attention with k={k} needs at least {k + 1} points, got {n}"
        )
    order = knn(coords, coords, k + 1)
    graph = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        row = order[i]
        graph[i] = row[row != i][:k]
    return graph


def build_cross_graph(source_features, target_features, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Bipartite k-NN graphs by dot-product similarity, in both directions."""
    fx = np.asarray(source_features, dtype=np.float64)
    fy = np.asarray(target_features, dtype=np.float64)
    if fx.shape[0] < k or fy.shape[0] < k:
        raise InsufficientPointsError(
            f"cross-attention with k={k} needs at least {k} points on both sides"
        )
    src_to_tgt = knn(fx, fy, k, metric="dot_product_similarity")
    tgt_to_src = knn(fy, fx, k, metric="dot_product_similarity")
    return src_to_tgt, tgt_to_src


def self_attention(
    keypoints: KeyPointSet,
    w_f: np.ndarray,
    w_s: np.ndarray,
    k: int = DEFAULT_NUM_NEIGHBORS,
) -> KeyPointSet:
    """Refine features over the spatial k-NN graph; coordinates pass through."""
    graph = build_self_graph(keypoints.coords, k)
    features = cgconv(keypoints.features, graph, keypoints.features, w_f, w_s)
    return KeyPointSet(keypoints.coords, features)


def cross_attention(
    source: KeyPointSet,
    target: KeyPointSet,
    w_f: np.ndarray,
    w_s: np.ndarray,
    k: int = DEFAULT_NUM_NEIGHBORS,
) -> tuple[KeyPointSet, KeyPointSet]:
    """Refine both clouds over the bipartite feature-similarity graph."""
    src_graph, tgt_graph = build_cross_graph(source.features, target.features, k)
    src_features = cgconv(source.features, src_graph, target.features, w_f, w_s)
    tgt_features = cgconv(target.features, tgt_graph, source.features, w_f, w_s)
    return (
        KeyPointSet(source.coords, src_features),
        KeyPointSet(target.coords, tgt_features),
    )
