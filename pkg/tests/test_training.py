"""Tests for labels, the matching loss, gradients, augmentation, and training."""

import numpy as np
import pytest

from pointreg import (
    PointCloud,
    RigidTransform,
    apply_transform,
    augment,
    correspondence_labels,
    init_model,
    loss,
    loss_gradient,
    overlap_ratio,
    train,
)
from pointreg.geometry import rotation_about_z, transform_points
from pointreg.model import named_parameters, tiny_config
from pointreg.scenes import ScenePair
from pointreg.training import (
    CorrespondenceLabels,
    NoCorrespondencesError,
    TrainConfig,
    _pipeline_forward,
    pair_loss,
    pipeline_loss,
)

from conftest import toy_scene_config
from reference import numerical_gradient

# Gradient tests run the matcher warm (T = 0.5): at the production
# temperature an untrained tiny model saturates the softmax and every
# gradient vanishes, which would make the finite-difference comparison
# vacuous.
CHECK_TEMPERATURE = 0.5


def tiny_pair(rng=None) -> ScenePair:
    rng = rng or np.random.default_rng(5)
    coords = rng.uniform(0, 2.5, (16, 3))
    intensity = rng.uniform(0, 1, 16)
    source = PointCloud(coords, intensity)
    gt = RigidTransform(rotation_about_z(0.3), np.array([0.2, -0.1, 0.05]))
    target = PointCloud(
        transform_points(coords, gt) + rng.normal(0, 0.08, (16, 3)),
        np.clip(intensity + rng.normal(0, 0.1, 16), 0, 1),
    )
    return ScenePair(source, target, gt, overlap=1.0, scene_id="tiny")


def tiny_model_at_generic_point(seed=77):
    model = init_model(tiny_config(), seed=2)
    rng = np.random.default_rng(seed)
    for arr in named_parameters(model).values():
        arr[...] = rng.uniform(-0.8, 0.8, arr.shape)
    return model


class TestCorrespondenceLabels:
    def test_identity_mapping_on_aligned_copies(self, rng):
        x = rng.uniform(0, 5, (30, 3))
        gt = RigidTransform(rotation_about_z(0.4), np.array([1.0, 0.0, 0.0]))
        y = transform_points(x, gt)
        labels = correspondence_labels(x, y, gt, radius=1.6)
        assert labels.num_positives == 30
        np.testing.assert_array_equal(labels.match_index, np.arange(30))

    def test_distant_clouds_all_negative(self, rng):
        x = rng.uniform(0, 5, (20, 3))
        y = x + 100.0
        labels = correspondence_labels(x, y, RigidTransform.identity(), radius=1.6)
        assert labels.num_positives == 0
        assert not labels.has_match.any()

    def test_constructed_half_overlap(self):
        x = np.stack([np.arange(10) * 3.0, np.zeros(10), np.zeros(10)], axis=1)
        y = x.copy()
        y[5:, 2] += 50.0  # out of labeling range
        labels = correspondence_labels(x, y, RigidTransform.identity(), radius=1.6)
        np.testing.assert_array_equal(labels.has_match, [True] * 5 + [False] * 5)
        assert labels.num_positives == 5

    def test_nearest_index_tie_breaks_low(self):
        x = np.array([[0.0, 0.0, 0.0]])
        y = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])  # equidistant
        labels = correspondence_labels(x, y, RigidTransform.identity(), radius=1.6)
        assert labels.match_index[0] == 0


class TestLoss:
    def test_one_hot_positive_row_is_minus_one(self):
        phi = np.array([[0.0, 1.0, 0.0], [0.2, 0.3, 0.5]])
        labels = CorrespondenceLabels(
            has_match=np.array([True, False]),
            match_index=np.array([1, 0]),
            num_positives=1,
        )
        assert loss(phi, labels, 10.0) == pytest.approx(-1.0)

    def test_uniform_two_target_case(self):
        phi = np.array([[0.5, 0.5]])
        labels = CorrespondenceLabels(
            has_match=np.array([True]), match_index=np.array([0]), num_positives=1
        )
        assert loss(phi, labels, 10.0) == pytest.approx(4.5)

    def test_matches_term_by_term_oracle(self, rng):
        n, m = 12, 9
        phi = rng.uniform(0, 1, (n, m))
        phi /= phi.sum(axis=1, keepdims=True)
        has = rng.uniform(size=n) < 0.6
        has[0] = True
        idx = rng.integers(0, m, n)
        labels = CorrespondenceLabels(has, idx, int(has.sum()))
        lam = 3.7
        expected = 0.0
        for i in range(n):
            if not has[i]:
                continue
            wrong = sum(phi[i, j] for j in range(m) if j != idx[i])
            expected += -phi[i, idx[i]] + lam / (m - 1) * wrong
        expected /= labels.num_positives
        assert loss(phi, labels, lam) == pytest.approx(expected, rel=1e-12)

    def test_permutation_consistency(self, rng):
        n, m = 8, 8
        phi = rng.uniform(0, 1, (n, m))
        phi /= phi.sum(axis=1, keepdims=True)
        has = np.ones(n, dtype=bool)
        idx = rng.integers(0, m, n)
        labels = CorrespondenceLabels(has, idx, n)
        perm = rng.permutation(m)
        inverse = np.argsort(perm)
        permuted_labels = CorrespondenceLabels(has, inverse[idx], n)
        assert loss(phi[:, perm], permuted_labels, 5.0) == pytest.approx(
            loss(phi, labels, 5.0), rel=1e-12
        )

    def test_moving_mass_to_match_decreases_loss(self):
        phi = np.array([[0.4, 0.3, 0.3]])
        better = np.array([[0.5, 0.2, 0.3]])
        labels = CorrespondenceLabels(
            np.array([True]), np.array([0]), num_positives=1
        )
        assert loss(better, labels, 10.0) < loss(phi, labels, 10.0)

    def test_no_positives_raises(self):
        labels = CorrespondenceLabels(
            np.array([False, False]), np.array([0, 0]), num_positives=0
        )
        with pytest.raises(NoCorrespondencesError):
            loss(np.full((2, 2), 0.5), labels, 10.0)


class TestLossGradient:
    def test_matches_central_differences_on_tiny_preset(self):
        pair = tiny_pair()
        model = tiny_model_at_generic_point()
        state = _pipeline_forward(
            model, pair.source, pair.target, None, CHECK_TEMPERATURE
        )
        labels = correspondence_labels(
            state.source_keypoints_coords,
            state.target_keypoints_coords,
            pair.ground_truth,
            radius=1.6,
        )
        assert labels.num_positives == len(state.source_keypoints_coords)
        analytic = loss_gradient(
            model, pair, labels, 10.0, None, CHECK_TEMPERATURE
        )
        params = named_parameters(model)
        numeric = numerical_gradient(
            lambda: pipeline_loss(
                model, pair.source, pair.target, labels, 10.0, None,
                CHECK_TEMPERATURE,
            ),
            params,
            h=1e-4,
        )
        assert set(analytic) == set(params)
        for name in params:
            a, n = analytic[name], numeric[name]
            rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
            assert rel.max() < 1e-4, f"{name}: max rel error {rel.max():.3e}"

    def test_symmetric_construction_has_zero_gradient(self):
        # all-zero weights + identical clouds + self-matching labels: the
        # softmax gradient cancels column-wise, so every tensor gradient
        # vanishes exactly
        pair_src = tiny_pair().source
        pair = ScenePair(pair_src, pair_src, RigidTransform.identity(), 1.0, "sym")
        model = init_model(tiny_config(), seed=3)
        for arr in named_parameters(model).values():
            arr[...] = 0.0
        state = _pipeline_forward(model, pair.source, pair.target, None, 0.01)
        labels = correspondence_labels(
            state.source_keypoints_coords,
            state.target_keypoints_coords,
            pair.ground_truth,
            radius=1.6,
        )
        np.testing.assert_array_equal(
            labels.match_index, np.arange(len(state.source_keypoints_coords))
        )
        grads = loss_gradient(model, pair, labels, 10.0, None, 0.01)
        total = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
        assert total < 1e-8

    def test_gradient_linear_in_loss_scale(self):
        pair = tiny_pair()
        model = tiny_model_at_generic_point(seed=99)
        state = _pipeline_forward(
            model, pair.source, pair.target, None, CHECK_TEMPERATURE
        )
        labels = correspondence_labels(
            state.source_keypoints_coords,
            state.target_keypoints_coords,
            pair.ground_truth,
            radius=1.6,
        )
        g0 = loss_gradient(model, pair, labels, 0.0, None, CHECK_TEMPERATURE)
        g1 = loss_gradient(model, pair, labels, 10.0, None, CHECK_TEMPERATURE)
        g2 = loss_gradient(model, pair, labels, 20.0, None, CHECK_TEMPERATURE)
        for name in g0:
            doubling_delta = g2[name] - g1[name]
            lambda_term = g1[name] - g0[name]
            np.testing.assert_allclose(doubling_delta, lambda_term, atol=1e-12)


class TestAugment:
    def test_zero_angle_unchanged(self):
        pair = tiny_pair()

        class ZeroRng:
            def uniform(self, lo, hi, size=None):
                return 0.0

        out = augment(pair, ZeroRng())
        np.testing.assert_allclose(out.source.coords, pair.source.coords)
        np.testing.assert_allclose(out.target.coords, pair.target.coords)
        np.testing.assert_allclose(
            out.ground_truth.matrix(), pair.ground_truth.matrix(), atol=1e-15
        )

    def test_overlap_invariant(self, rng):
        cfg = toy_scene_config(seed=61)
        from pointreg import generate_scene

        pair = generate_scene(cfg)
        out = augment(pair, np.random.default_rng(0))
        recomputed = overlap_ratio(out.source, out.target, out.ground_truth, 0.3)
        assert recomputed == pytest.approx(pair.overlap, abs=1e-9)

    def test_alignment_residual_stays_zero(self, rng):
        # noise-free constructed pair: target is exactly the aligned source
        coords = rng.uniform(0, 4, (50, 3))
        gt = RigidTransform(rotation_about_z(1.1), np.array([2.0, -1.0, 0.3]))
        pair = ScenePair(
            PointCloud(coords), PointCloud(transform_points(coords, gt)),
            gt, 1.0, "exact",
        )
        out = augment(pair, np.random.default_rng(3))
        aligned = transform_points(out.source.coords, out.ground_truth)
        assert np.abs(aligned - out.target.coords).max() < 1e-9

    def test_draws_source_angle_first(self):
        pair = tiny_pair()

        class ScriptedRng:
            def __init__(self):
                self.values = iter([np.pi / 2, 0.0])

            def uniform(self, lo, hi, size=None):
                return next(self.values)

        out = augment(pair, ScriptedRng())
        np.testing.assert_allclose(
            out.source.coords,
            pair.source.coords @ rotation_about_z(np.pi / 2).T,
            atol=1e-12,
        )
        np.testing.assert_allclose(out.target.coords, pair.target.coords)


def quick_train_setup(n_train=6, n_val=2, epochs=3):
    from pointreg import generate_dataset

    pairs = generate_dataset(toy_scene_config(seed=70), n_train + n_val)
    cfg = TrainConfig(
        learning_rate=0.01, lr_halving_period=2, epochs=epochs, batch_size=2,
        rng_seed=4,
    )
    return pairs[:n_train], pairs[n_train:], tiny_desk_config(), cfg


def tiny_desk_config():
    """Desk-like architecture small enough for repeated unit-test training."""
    from pointreg.model import ModelConfig, SAStageConfig

    return ModelConfig(
        sa_stages=(
            SAStageConfig(96, 1.0, (8, 8)),
            SAStageConfig(48, 2.0, (8, 8)),
            SAStageConfig(24, 4.0, (16, 16)),
            SAStageConfig(12, 8.0, (16, 16)),
        ),
        fp_widths=(16, 16),
        attention_k=8,
        max_neighbors=32,
    )


class TestTrain:
    def test_returns_best_validation_weights(self):
        train_pairs, val_pairs, model_cfg, cfg = quick_train_setup()
        best, history = train(train_pairs, val_pairs, model_cfg, cfg)
        assert len(history) == cfg.epochs
        best_recorded = min(h.val_loss for h in history)
        revalidated = np.mean([pair_loss(best, p, cfg) for p in val_pairs])
        assert revalidated == pytest.approx(best_recorded, abs=1e-12)

    def test_learning_rate_schedule(self):
        train_pairs, val_pairs, model_cfg, cfg = quick_train_setup(epochs=5)
        _, history = train(train_pairs, val_pairs, model_cfg, cfg)
        rates = [h.learning_rate for h in history]
        assert rates == [0.01, 0.01, 0.005, 0.005, 0.0025]

    def test_seeded_determinism(self):
        train_pairs, val_pairs, model_cfg, cfg = quick_train_setup(epochs=2)
        _, first = train(train_pairs, val_pairs, model_cfg, cfg)
        _, second = train(train_pairs, val_pairs, model_cfg, cfg)
        assert [(h.train_loss, h.val_loss) for h in first] == [
            (h.train_loss, h.val_loss) for h in second
        ]

    def test_rejects_empty_split(self):
        train_pairs, val_pairs, model_cfg, cfg = quick_train_setup(epochs=1)
        with pytest.raises(ValueError):
            train([], val_pairs, model_cfg, cfg)

    @pytest.mark.slow
    def test_loss_trend_on_20_pair_toy_set(self):
        from pointreg import generate_dataset

        pairs = generate_dataset(toy_scene_config(seed=71), 26)
        cfg = TrainConfig(
            learning_rate=0.01, lr_halving_period=5, epochs=20, batch_size=2,
            rng_seed=1,
        )
        _, history = train(pairs[:20], pairs[20:], tiny_desk_config(), cfg)
        losses = [h.train_loss for h in history]
        windows = [float(np.mean(losses[i : i + 5])) for i in range(0, 20, 5)]
        assert windows[-1] < windows[0]
        assert all(b <= a + 0.05 for a, b in zip(windows, windows[1:]))
        assert losses[-1] < losses[0]
