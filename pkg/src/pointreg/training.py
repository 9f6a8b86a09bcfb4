"""Correspondence supervision, the matching loss, gradients, and training.

A source key point is labeled positive when, after ground-truth alignment,
its nearest target key point lies within the label radius (1.6 m by
default). The loss rewards probability mass on the labeled column and
penalizes mass elsewhere:

    L = (1/N_c) * sum_i delta_i * [ -phi[i, j_i] + (lambda/(N-1)) * sum_{j != j_i} phi[i, j] ]

Gradients of the whole pipeline (encoder -> attention -> probability map ->
loss) are computed by hand-rolled reverse mode; max operations route their
subgradient to the element-wise argmax (lowest index on ties), which makes
the analytic gradients agree with central finite differences away from ties.

Optimization is adaptive-moment gradient descent (decay 0.9/0.999,
epsilon 1e-4) with the learning rate halved on a fixed epoch schedule; the
returned weights are the snapshot with the lowest validation loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import matching
from .attention import (
    _cgconv_backward,
    _cgconv_forward,
    build_cross_graph,
    build_self_graph,
)
from .encoder import _encode_backward, _encode_forward, input_features
from .geometry import (
    PointCloud,
    RigidTransform,
    compose,
    invert,
    rotation_about_z,
    voxel_downsample,
)
from .matching import _match_backward, _match_forward
from .model import ModelConfig, ModelWeights, copy_model, init_model, named_parameters
from .scenes import ScenePair

logger = logging.getLogger(__name__)

DEFAULT_LABEL_RADIUS = 1.6
DEFAULT_LOSS_SCALE = 10.0

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-4


class NoCorrespondencesError(ValueError):
    """A training pair has no positive correspondence labels."""


@dataclass(frozen=True)
class CorrespondenceLabels:
    """Ground-truth supervision for one key-point pair."""

    has_match: np.ndarray  # (N,) bool
    match_index: np.ndarray  # (N,) int, valid where has_match
    num_positives: int


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    lr_halving_period: int = 5
    epochs: int = 20
    batch_size: int = 6
    loss_scale: float = DEFAULT_LOSS_SCALE
    label_radius: float = DEFAULT_LABEL_RADIUS
    rng_seed: int = 0
    voxel_size: float = 0.3
    temperature: float = matching.DEFAULT_TEMPERATURE

    def __post_init__(self) -> None:
        for name in (
            "learning_rate", "lr_halving_period", "epochs", "batch_size",
            "loss_scale", "label_radius", "voxel_size", "temperature",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    learning_rate: float


def correspondence_labels(
    source_keypoints: np.ndarray,
    target_keypoints: np.ndarray,
    ground_truth: RigidTransform,
    radius: float = DEFAULT_LABEL_RADIUS,
) -> CorrespondenceLabels:
    """Label each source key point with its nearest in-range target key point."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    x = np.asarray(source_keypoints, dtype=np.float64)
    y = np.asarray(target_keypoints, dtype=np.float64)
    aligned = x @ ground_truth.rotation.T + ground_truth.translation
    dist_sq = ((aligned[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
    nearest = dist_sq.argmin(axis=1)
    nearest_dist = np.sqrt(np.take_along_axis(dist_sq, nearest[:, None], axis=1)[:, 0])
    has_match = nearest_dist <= radius
    return CorrespondenceLabels(has_match, nearest, int(has_match.sum()))


def loss(phi: np.ndarray, labels: CorrespondenceLabels, loss_scale: float) -> float:
    """Mean per-positive matching loss over the probability map."""
    phi = np.asarray(phi, dtype=np.float64)
    if labels.num_positives < 1:
        raise NoCorrespondencesError("training pair has no positive labels")
    n_targets = phi.shape[1]
    if n_targets < 2:
        raise ValueError("loss needs at least 2 target key points")
    pos = labels.has_match
    matched = np.take_along_axis(
        phi[pos], labels.match_index[pos][:, None], axis=1
    )[:, 0]
    wrong_mass = phi[pos].sum(axis=1) - matched
    per_row = -matched + loss_scale / (n_targets - 1) * wrong_mass
    return float(per_row.sum() / labels.num_positives)


def loss_phi_gradient(
    shape: tuple[int, int], labels: CorrespondenceLabels, loss_scale: float
) -> np.ndarray:
    """d loss / d phi as a dense matrix."""
    if labels.num_positives < 1:
        raise NoCorrespondencesError("training pair has no positive labels")
    n_targets = shape[1]
    grad = np.zeros(shape)
    pos = np.flatnonzero(labels.has_match)
    off = loss_scale / ((n_targets - 1) * labels.num_positives)
    grad[pos, :] = off
    grad[pos, labels.match_index[pos]] = -1.0 / labels.num_positives
    return grad


@dataclass
class _PipelineState:
    source_keypoints_coords: np.ndarray
    target_keypoints_coords: np.ndarray
    phi: np.ndarray
    caches: dict = field(default_factory=dict)


def _pipeline_forward(
    model: ModelWeights,
    source: PointCloud,
    target: PointCloud,
    voxel_size: float | None,
    temperature: float,
) -> _PipelineState:
    if voxel_size is not None:
        source = voxel_downsample(source, voxel_size)
        target = voxel_downsample(target, voxel_size)
    caches: dict = {}
    kp = {}
    feats = {}
    for side, cloud in (("src", source), ("tgt", target)):
        keypoints, cache = _encode_forward(
            cloud.coords, input_features(cloud), model.encoder
        )
        caches[f"encode_{side}"] = cache
        kp[side] = keypoints.coords
        feats[side] = keypoints.features
    att = model.attention
    k = model.attention_k
    for side in ("src", "tgt"):
        graph = build_self_graph(kp[side], k)
        feats[side], caches[f"self_{side}"] = _cgconv_forward(
            feats[side], graph, feats[side], att.self_wf, att.self_ws
        )
    src_graph, tgt_graph = build_cross_graph(feats["src"], feats["tgt"], k)
    cross_src, caches["cross_src"] = _cgconv_forward(
        feats["src"], src_graph, feats["tgt"], att.cross_wf, att.cross_ws
    )
    cross_tgt, caches["cross_tgt"] = _cgconv_forward(
        feats["tgt"], tgt_graph, feats["src"], att.cross_wf, att.cross_ws
    )
    phi, caches["match"] = _match_forward(cross_src, cross_tgt, temperature)
    return _PipelineState(kp["src"], kp["tgt"], phi, caches)


def _pipeline_backward(
    model: ModelWeights, state: _PipelineState, grad_phi: np.ndarray
) -> dict[str, np.ndarray]:
    caches = state.caches
    att = model.attention
    grad_src, grad_tgt = _match_backward(caches["match"], grad_phi)
    grads: dict[str, np.ndarray] = {}

    df_src, dg_tgt, gwf, gws = _cgconv_backward(
        caches["cross_src"], att.cross_wf, att.cross_ws, grad_src
    )
    df_tgt, dg_src, gwf2, gws2 = _cgconv_backward(
        caches["cross_tgt"], att.cross_wf, att.cross_ws, grad_tgt
    )
    grads["att.cross.wf"] = gwf + gwf2
    grads["att.cross.ws"] = gws + gws2
    grad_after_self = {"src": df_src + dg_src, "tgt": df_tgt + dg_tgt}

    grads["att.self.wf"] = 0.0
    grads["att.self.ws"] = 0.0
    grad_encoded = {}
    for side in ("src", "tgt"):
        df, dg, gwf, gws = _cgconv_backward(
            caches[f"self_{side}"], att.self_wf, att.self_ws, grad_after_self[side]
        )
        grads["att.self.wf"] += gwf
        grads["att.self.ws"] += gws
        grad_encoded[side] = df + dg

    for side in ("src", "tgt"):
        encoder_grads = _encode_backward(
            caches[f"encode_{side}"], model.encoder, grad_encoded[side]
        )
        for name, value in encoder_grads.items():
            if name in grads:
                grads[name] = grads[name] + value
            else:
                grads[name] = value
    return grads


def pipeline_loss(
    model: ModelWeights,
    source: PointCloud,
    target: PointCloud,
    labels: CorrespondenceLabels,
    loss_scale: float = DEFAULT_LOSS_SCALE,
    voxel_size: float | None = None,
    temperature: float = matching.DEFAULT_TEMPERATURE,
) -> float:
    """Forward-only loss of the full feature pipeline under fixed labels."""
    state = _pipeline_forward(model, source, target, voxel_size, temperature)
    return loss(state.phi, labels, loss_scale)


def loss_gradient(
    model: ModelWeights,
    pair: ScenePair,
    labels: CorrespondenceLabels,
    loss_scale: float = DEFAULT_LOSS_SCALE,
    voxel_size: float | None = None,
    temperature: float = matching.DEFAULT_TEMPERATURE,
) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of the loss for every trainable tensor."""
    state = _pipeline_forward(model, pair.source, pair.target, voxel_size, temperature)
    grad_phi = loss_phi_gradient(state.phi.shape, labels, loss_scale)
    return _pipeline_backward(model, state, grad_phi)


def pair_loss_and_gradient(
    model: ModelWeights, pair: ScenePair, cfg: TrainConfig
) -> tuple[float, dict[str, np.ndarray], CorrespondenceLabels]:
    """Forward, label, and backward one scene pair in a single pass."""
    state = _pipeline_forward(
        model, pair.source, pair.target, cfg.voxel_size, cfg.temperature
    )
    labels = correspondence_labels(
        state.source_keypoints_coords,
        state.target_keypoints_coords,
        pair.ground_truth,
        cfg.label_radius,
    )
    value = loss(state.phi, labels, cfg.loss_scale)
    grad_phi = loss_phi_gradient(state.phi.shape, labels, cfg.loss_scale)
    grads = _pipeline_backward(model, state, grad_phi)
    return value, grads, labels


def pair_loss(model: ModelWeights, pair: ScenePair, cfg: TrainConfig) -> float:
    """Forward-only loss of one scene pair with labels derived on the fly."""
    state = _pipeline_forward(
        model, pair.source, pair.target, cfg.voxel_size, cfg.temperature
    )
    labels = correspondence_labels(
        state.source_keypoints_coords,
        state.target_keypoints_coords,
        pair.ground_truth,
        cfg.label_radius,
    )
    return loss(state.phi, labels, cfg.loss_scale)


def augment(pair: ScenePair, rng: np.random.Generator) -> ScenePair:
    """Rotate source and target independently about the vertical axis.

    The ground truth is recomputed so that alignment still holds exactly.
    Two uniform angles in [0, 2*pi) are drawn, source first.
    """
    angle_src = rng.uniform(0.0, 2.0 * np.pi)
    angle_tgt = rng.uniform(0.0, 2.0 * np.pi)
    rot_src = RigidTransform(rotation_about_z(angle_src), np.zeros(3))
    rot_tgt = RigidTransform(rotation_about_z(angle_tgt), np.zeros(3))
    new_gt = compose(rot_tgt, compose(pair.ground_truth, invert(rot_src)))
    return ScenePair(
        source=PointCloud(
            pair.source.coords @ rot_src.rotation.T, pair.source.intensity
        ),
        target=PointCloud(
            pair.target.coords @ rot_tgt.rotation.T, pair.target.intensity
        ),
        ground_truth=new_gt,
        overlap=pair.overlap,
        scene_id=pair.scene_id,
    )


class _Adam:
    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {name: np.zeros_like(arr) for name, arr in params.items()}
        self.v = {name: np.zeros_like(arr) for name, arr in params.items()}
        self.step_count = 0

    def step(self, params, grads, learning_rate: float) -> None:
        self.step_count += 1
        bias1 = 1.0 - ADAM_BETA1**self.step_count
        bias2 = 1.0 - ADAM_BETA2**self.step_count
        for name, arr in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            arr -= learning_rate * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPSILON)


def train(
    train_pairs: list[ScenePair],
    val_pairs: list[ScenePair],
    model_config: ModelConfig,
    cfg: TrainConfig,
) -> tuple[ModelWeights, list[EpochStats]]:
    """Train the feature pipeline; returns the lowest-validation-loss weights.

    Pairs whose augmented version yields no positive labels are skipped with
    a warning; the run fails only if every pair of an epoch is unusable.
    """
    if not train_pairs or not val_pairs:
        raise ValueError("train requires non-empty training and validation splits")
    root = np.random.SeedSequence(cfg.rng_seed)
    init_seq, shuffle_seq, *epoch_seqs = root.spawn(cfg.epochs + 2)
    model = init_model(model_config, seed=init_seq.generate_state(1)[0])
    params = named_parameters(model)
    optimizer = _Adam(params)
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_seq))

    best_model = copy_model(model)
    best_val = np.inf
    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        learning_rate = cfg.learning_rate * 0.5 ** (epoch // cfg.lr_halving_period)
        pair_seqs = epoch_seqs[epoch].spawn(len(train_pairs))
        order = shuffle_rng.permutation(len(train_pairs))
        epoch_losses = []
        for batch_start in range(0, len(order), cfg.batch_size):
            batch = order[batch_start : batch_start + cfg.batch_size]
            batch_grads: dict[str, np.ndarray] | None = None
            batch_losses = []
            for pair_index in batch:
                pair_rng = np.random.Generator(np.random.PCG64(pair_seqs[pair_index]))
                pair = augment(train_pairs[pair_index], pair_rng)
                try:
                    value, grads, _ = pair_loss_and_gradient(model, pair, cfg)
                except NoCorrespondencesError:
                    logger.warning(
                        "skipping pair %s: no correspondences after augmentation",
                        pair.scene_id,
                    )
                    continue
                batch_losses.append(value)
                if batch_grads is None:
                    batch_grads = grads
                else:
                    for name in batch_grads:
                        batch_grads[name] += grads[name]
            if batch_grads is None:
                continue
            scale = 1.0 / len(batch_losses)
            for name in batch_grads:
                batch_grads[name] *= scale
            optimizer.step(params, batch_grads, learning_rate)
            epoch_losses.extend(batch_losses)
        if not epoch_losses:
            raise NoCorrespondencesError(
                "every training pair was unusable (no positive labels)"
            )
        val_losses = []
        for pair in val_pairs:
            try:
                val_losses.append(pair_loss(model, pair, cfg))
            except NoCorrespondencesError:
                logger.warning("skipping validation pair %s", pair.scene_id)
        if not val_losses:
            raise NoCorrespondencesError("every validation pair was unusable")
        stats = EpochStats(
            epoch=epoch + 1,
            train_loss=float(np.mean(epoch_losses)),
            val_loss=float(np.mean(val_losses)),
            learning_rate=learning_rate,
        )
        history.append(stats)
        logger.info(
            "epoch %d: train %.6f  val %.6f  lr %.5f",
            stats.epoch, stats.train_loss, stats.val_loss, stats.learning_rate,
        )
        if stats.val_loss < best_val:
            best_val = stats.val_loss
            best_model = copy_model(model)
    return best_model, history
