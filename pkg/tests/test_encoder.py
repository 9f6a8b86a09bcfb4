"""Tests for the hierarchical feature encoder."""

import numpy as np
import pytest

from pointreg import InsufficientPointsError, PointCloud, encode, fp_layer, sa_layer
from pointreg.encoder import SALayerParams
from pointreg.model import (
    desk_config,
    full_config,
    init_model,
    named_parameters,
    tiny_config,
)

from reference import encode_reference, fp_reference, mlp_reference, sa_reference


def make_sa_params(rng, in_feature_dim, widths, num_samples, radius, cap=64):
    weights, biases = [], []
    dim = 3 + in_feature_dim
    for w in widths:
        weights.append(rng.uniform(-0.5, 0.5, (dim, w)))
        biases.append(rng.uniform(-0.5, 0.5, w))
        dim = w
    return SALayerParams(num_samples, radius, weights, biases, max_neighbors=cap)


class TestSALayer:
    def test_single_neighbor_equals_mlp_output(self, rng):
        # isolated points: every center's neighborhood is just itself
        coords = np.array([[0.0, 0, 0], [100.0, 0, 0], [0, 100.0, 0]])
        features = rng.standard_normal((3, 2))
        params = make_sa_params(rng, 2, (5,), num_samples=3, radius=0.5)
        _, out = sa_layer(coords, features, params)
        for i in range(3):
            x = np.concatenate([np.zeros(3), features[i]])
            np.testing.assert_allclose(
                out[i], mlp_reference(x, params.weights, params.biases), rtol=1e-12
            )

    def test_zero_weights_zero_output(self, rng):
        coords = rng.uniform(0, 1, (50, 3))
        features = rng.standard_normal((50, 2))
        params = make_sa_params(rng, 2, (4, 4), num_samples=10, radius=0.5)
        for w in params.weights:
            w[...] = 0.0
        for b in params.biases:
            b[...] = 0.0
        _, out = sa_layer(coords, features, params)
        np.testing.assert_array_equal(out, np.zeros((10, 4)))

    def test_matches_naive_reference(self, rng):
        coords = rng.uniform(0, 5, (1000, 3))
        features = rng.standard_normal((1000, 3))
        params = make_sa_params(rng, 3, (8, 8), num_samples=256, radius=0.8, cap=16)
        centers, out = sa_layer(coords, features, params)
        ref_centers, ref_out = sa_reference(coords, features, params)
        np.testing.assert_array_equal(centers, ref_centers)
        assert np.abs(out - ref_out).max() < 1e-6

    def test_output_coords_subset_of_input(self, rng):
        coords = rng.uniform(0, 2, (100, 3))
        features = rng.standard_normal((100, 1))
        params = make_sa_params(rng, 1, (4,), num_samples=20, radius=1.0)
        centers, _ = sa_layer(coords, features, params)
        as_set = {tuple(row) for row in coords}
        assert all(tuple(row) in as_set for row in centers)

    def test_insufficient_points(self, rng):
        params = make_sa_params(rng, 1, (4,), num_samples=10, radius=1.0)
        with pytest.raises(InsufficientPointsError):
            sa_layer(np.zeros((5, 3)), np.zeros((5, 1)), params)


class TestFPLayer:
    def make_fp(self, rng, skip_dim, upper_dim, widths):
        from pointreg.encoder import FPLayerParams

        weights, biases = [], []
        dim = skip_dim + upper_dim
        for w in widths:
            weights.append(rng.uniform(-0.5, 0.5, (dim, w)))
            biases.append(rng.uniform(-0.5, 0.5, w))
            dim = w
        return FPLayerParams(weights, biases)

    def test_coincident_point_dominates(self, rng):
        upper_coords = np.array([[0.0, 0, 0], [5.0, 0, 0], [0, 5.0, 0]])
        upper_features = rng.standard_normal((3, 2))
        lower_coords = np.array([[0.0, 0, 0]])  # exactly on upper point 0
        skip = rng.standard_normal((1, 2))
        params = self.make_fp(rng, 2, 2, (3,))
        out = fp_layer(lower_coords, skip, upper_coords, upper_features, params)
        # clamped-distance weight of the coincident point dominates (~1)
        x = np.concatenate([skip[0], upper_features[0]])
        expected = mlp_reference(x, params.weights, params.biases)
        np.testing.assert_allclose(out[0], expected, atol=1e-6)

    def test_identical_upper_features_pass_through(self, rng):
        upper_coords = rng.uniform(0, 1, (5, 3))
        v = rng.standard_normal(4)
        upper_features = np.tile(v, (5, 1))
        lower_coords = rng.uniform(0, 1, (7, 3))
        skip = rng.standard_normal((7, 2))
        params = self.make_fp(rng, 2, 4, (6,))
        out = fp_layer(lower_coords, skip, upper_coords, upper_features, params)
        for i in range(7):
            x = np.concatenate([skip[i], v])
            np.testing.assert_allclose(
                out[i], mlp_reference(x, params.weights, params.biases), rtol=1e-9
            )

    def test_matches_idw_reference(self, rng):
        upper_coords = rng.uniform(0, 3, (20, 3))
        upper_features = rng.standard_normal((20, 5))
        lower_coords = rng.uniform(0, 3, (40, 3))
        skip = rng.standard_normal((40, 3))
        params = self.make_fp(rng, 3, 5, (6, 4))
        out = fp_layer(lower_coords, skip, upper_coords, upper_features, params)
        expected = fp_reference(lower_coords, skip, upper_coords, upper_features, params)
        assert np.abs(out - expected).max() < 1e-9

    def test_needs_three_upper_points(self, rng):
        params = self.make_fp(rng, 1, 1, (2,))
        with pytest.raises(InsufficientPointsError):
            fp_layer(np.zeros((4, 3)), np.zeros((4, 1)), np.zeros((2, 3)),
                     np.zeros((2, 1)), params)


class TestEncode:
    def toy_cloud(self, rng, n=600, extent=10.0):
        return PointCloud(
            rng.uniform(0, extent, (n, 3)), rng.uniform(0, 1, n)
        )

    def toy_model(self, seed=3):
        from pointreg.model import ModelConfig, SAStageConfig

        config = ModelConfig(
            sa_stages=(
                SAStageConfig(128, 0.8, (6, 6)),
                SAStageConfig(64, 1.4, (8, 8)),
                SAStageConfig(32, 2.5, (12, 12)),
                SAStageConfig(12, 4.0, (16, 16)),
            ),
            fp_widths=(10, 10),
            attention_k=4,
            max_neighbors=16,
        )
        return init_model(config, seed=seed)

    def test_output_shapes(self, rng):
        model = self.toy_model()
        kp = encode(self.toy_cloud(rng), model.encoder)
        assert kp.coords.shape == (32, 3)
        assert kp.features.shape == (32, 10)

    def test_full_preset_shape_contract(self):
        config = full_config()
        assert config.num_keypoints == 512
        assert config.feature_dim == 128
        model = init_model(config, seed=0)
        model.validate()
        assert model.encoder.output_dim() == 128

    def test_deterministic(self, rng):
        model = self.toy_model()
        cloud = self.toy_cloud(rng)
        a = encode(cloud, model.encoder)
        b = encode(PointCloud(cloud.coords, cloud.intensity), model.encoder)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.coords, b.coords)

    def test_rotated_cloud_still_encodes(self, rng):
        from pointreg.geometry import rotation_about_z

        model = self.toy_model()
        cloud = self.toy_cloud(rng)
        rotated = PointCloud(cloud.coords @ rotation_about_z(1.0).T, cloud.intensity)
        a = encode(cloud, model.encoder)
        b = encode(rotated, model.encoder)
        assert a.features.shape == b.features.shape

    def test_missing_intensity_uses_ones(self, rng):
        model = self.toy_model()
        cloud = self.toy_cloud(rng)
        no_intensity = PointCloud(cloud.coords)
        ones = PointCloud(cloud.coords, np.ones(len(cloud)))
        np.testing.assert_array_equal(
            encode(no_intensity, model.encoder).features,
            encode(ones, model.encoder).features,
        )

    def test_zero_weights_constant_bias_features(self, rng):
        model = self.toy_model()
        for name, arr in named_parameters(model).items():
            if name.endswith("weight"):
                arr[...] = 0.0
        kp = encode(self.toy_cloud(rng), model.encoder)
        assert np.isfinite(kp.features).all()
        assert np.abs(kp.features - kp.features[0]).max() == 0.0

    def test_matches_naive_reference(self, rng):
        from pointreg.encoder import input_features

        model = self.toy_model()
        for trial in range(5):
            cloud = self.toy_cloud(np.random.default_rng(100 + trial), n=1200)
            kp = encode(cloud, model.encoder)
            ref_coords, ref_features = encode_reference(
                cloud.coords, input_features(cloud), model.encoder
            )
            np.testing.assert_array_equal(kp.coords, ref_coords)
            assert np.abs(kp.features - ref_features).max() < 1e-6

    def test_insufficient_points_message(self, rng):
        model = init_model(desk_config(), seed=0)
        with pytest.raises(InsufficientPointsError, match="relax downsampling"):
            encode(self.toy_cloud(rng, n=100), model.encoder)

    def test_radii_strictly_increase_validated(self):
        from pointreg.model import ModelConfig, SAStageConfig

        with pytest.raises(ValueError, match="radii"):
            ModelConfig(
                sa_stages=(
                    SAStageConfig(64, 2.0, (4,)),
                    SAStageConfig(32, 1.0, (4,)),
                    SAStageConfig(16, 3.0, (4,)),
                    SAStageConfig(8, 4.0, (4,)),
                ),
                fp_widths=(4,),
            )

    def test_presets_validate(self):
        for config in (full_config(), desk_config(), tiny_config()):
            init_model(config, seed=1).validate()
