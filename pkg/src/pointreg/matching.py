"""Softmax correspondence matching between two key-point feature sets.

Features are first row-normalized to unit Euclidean norm; the matching
probability map is the row-wise softmax of their pairwise dot products
divided by a temperature. Each row of the map is a probability distribution
of one source key point over all target key points. Hard correspondences
take the row-wise argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TEMPERATURE = 1e-2


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Hard matches: one target key point per source key point."""

    source_coords: np.ndarray
    matched_target_coords: np.ndarray
    matched_indices: np.ndarray
    peak_probabilities: np.ndarray

    def __len__(self) -> int:
        return self.source_coords.shape[0]


def normalize_rows(features: np.ndarray) -> np.ndarray:
    """Scale each row to unit Euclidean norm; zero rows stay zero."""
    features = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return features / safe


@dataclass
class _MatchCache:
    fx_unit: np.ndarray
    fy_unit: np.ndarray
    fx_norms: np.ndarray
    fy_norms: np.ndarray
    phi: np.ndarray
    temperature: float


def _match_forward(source_features, target_features, temperature):
    fx = np.asarray(source_features, dtype=np.float64)
    fy = np.asarray(target_features, dtype=np.float64)
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if fx.ndim != 2 or fy.ndim != 2 or fx.shape[1] != fy.shape[1]:
        raise ValueError("feature sets must be 2D with equal dimensionality")
    fx_norms = np.linalg.norm(fx, axis=1, keepdims=True)
    fy_norms = np.linalg.norm(fy, axis=1, keepdims=True)
    fx_unit = fx / np.where(fx_norms > 0.0, fx_norms, 1.0)
    fy_unit = fy / np.where(fy_norms > 0.0, fy_norms, 1.0)
    logits = (fx_unit @ fy_unit.T) / temperature
    # Per-row max subtraction keeps the exponentials in range.
    logits -= logits.max(axis=1, keepdims=True)
    phi = np.exp(logits)
    phi /= phi.sum(axis=1, keepdims=True)
    return phi, _MatchCache(fx_unit, fy_unit, fx_norms, fy_norms, phi, temperature)


def _match_backward(cache: _MatchCache, grad_phi):
    phi = cache.phi
    grad_logits = phi * (grad_phi - (grad_phi * phi).sum(axis=1, keepdims=True))
    grad_sim = grad_logits / cache.temperature
    grad_fx_unit = grad_sim @ cache.fy_unit
    grad_fy_unit = grad_sim.T @ cache.fx_unit
    grad_fx = _normalize_backward(grad_fx_unit, cache.fx_unit, cache.fx_norms)
    grad_fy = _normalize_backward(grad_fy_unit, cache.fy_unit, cache.fy_norms)
    return grad_fx, grad_fy


def _normalize_backward(grad_unit, unit, norms):
    inner = (grad_unit * unit).sum(axis=1, keepdims=True)
    grad = (grad_unit - inner * unit) / np.where(norms > 0.0, norms, 1.0)
    return np.where(norms > 0.0, grad, 0.0)


def match_probability_map(
    source_features, target_features, temperature: float = DEFAULT_TEMPERATURE
) -> np.ndarray:
    """Row-stochastic matrix of source-to-target match probabilities."""
    phi, _ = _match_forward(source_features, target_features, temperature)
    return phi


def extract_correspondences(phi, source_coords, target_coords) -> CorrespondenceSet:
    """Hard matches from the probability map: row-wise argmax, lowest index on ties."""
    phi = np.asarray(phi, dtype=np.float64)
    source_coords = np.asarray(source_coords, dtype=np.float64)
    target_coords = np.asarray(target_coords, dtype=np.float64)
    if phi.shape != (source_coords.shape[0], target_coords.shape[0]):
        raise ValueError(
            f"phi shape {phi.shape} does not match "
            f"{source_coords.shape[0]} source / {target_coords.shape[0]} target points"
        )
    matched = phi.argmax(axis=1)
    peaks = np.take_along_axis(phi, matched[:, None], axis=1)[:, 0]
    return CorrespondenceSet(
        source_coords=source_coords,
        matched_target_coords=target_coords[matched],
        matched_indices=matched,
        peak_probabilities=peaks,
    )
