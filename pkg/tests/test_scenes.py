"""Tests for the synthetic scene generator and dataset persistence."""

import json

import numpy as np
import pytest

from pointreg import (
    SceneConfig,
    SensorModel,
    dataset_load,
    dataset_save,
    dataset_statistics,
    generate_dataset,
    generate_scene,
    overlap_ratio,
)
from pointreg.scenes import DatasetError, ScenePair
from pointreg.geometry import transform_points

from conftest import toy_scene_config


class TestGenerateScene:
    def test_coincident_sensors_identity(self):
        cfg = toy_scene_config(seed=3, max_separation=0.0)
        cfg = SceneConfig(
            world_extent=cfg.world_extent, num_boxes=cfg.num_boxes,
            num_cylinders=cfg.num_cylinders, num_walls=cfg.num_walls,
            sensor=cfg.sensor, max_sensor_separation=0.0, occlusion=True,
            noise_sigma=0.0, rng_seed=3,
        )
        pair = generate_scene(cfg)
        assert np.linalg.norm(pair.ground_truth.translation) < 1e-9
        # same position, arbitrary yaws: rotation is about z only
        assert abs(pair.ground_truth.rotation[2, 2] - 1.0) < 1e-12
        assert pair.overlap == pytest.approx(1.0, abs=0.02)

    def test_ground_truth_alignment_exact_when_noise_free(self):
        # scan once from a known pose, express it in both sensor frames, and
        # check that the recorded ground-truth transform maps the source-frame
        # points onto the target-frame re-expression of the same world points
        from pointreg.geometry import RigidTransform, rotation_about_z
        from pointreg.scenes import _build_world, _scan

        cfg = toy_scene_config(seed=9)
        rng = np.random.default_rng(9)
        ground_albedo, boxes, cylinders = _build_world(cfg, rng)
        pos1 = np.array([1.0, -2.0, 1.7])
        pos2 = np.array([4.0, 3.0, 1.7])
        yaw1, yaw2 = 0.7, -1.9
        world_pts, _ = _scan(cfg, pos1, yaw1, ground_albedo, boxes, cylinders)
        assert world_pts.shape[0] > 1000
        source = (world_pts - pos1) @ rotation_about_z(yaw1)
        in_target_frame = (world_pts - pos2) @ rotation_about_z(yaw2)
        gt = RigidTransform(
            rotation_about_z(yaw2).T @ rotation_about_z(yaw1),
            rotation_about_z(yaw2).T @ (pos1 - pos2),
        )
        aligned = transform_points(source, gt)
        assert np.abs(aligned - in_target_frame).max() < 1e-9

    def test_stored_overlap_matches_definition(self):
        pair = generate_scene(toy_scene_config(seed=5))
        recomputed = overlap_ratio(pair.source, pair.target, pair.ground_truth, 0.3)
        assert pair.overlap == pytest.approx(recomputed, abs=1e-9)

    def test_seed_determinism(self):
        cfg = toy_scene_config(seed=21)
        a = generate_scene(cfg)
        b = generate_scene(cfg)
        np.testing.assert_array_equal(a.source.coords, b.source.coords)
        np.testing.assert_array_equal(a.target.intensity, b.target.intensity)
        np.testing.assert_array_equal(
            a.ground_truth.matrix(), b.ground_truth.matrix()
        )
        assert a.overlap == b.overlap

    def test_minimum_cloud_size(self):
        pair = generate_scene(toy_scene_config(seed=2))
        assert len(pair.source) >= 2000
        assert len(pair.target) >= 2000

    def test_intensity_is_albedo_in_unit_range(self):
        pair = generate_scene(toy_scene_config(seed=4))
        for cloud in (pair.source, pair.target):
            assert cloud.intensity is not None
            assert cloud.intensity.min() >= 0.0
            assert cloud.intensity.max() <= 1.0

    def test_overlap_decreases_with_separation(self):
        overlaps = []
        for sep in (0.0, 6.0, 18.0):
            base = toy_scene_config(seed=31)
            cfg = SceneConfig(
                world_extent=48.0, num_boxes=base.num_boxes,
                num_cylinders=base.num_cylinders, num_walls=base.num_walls,
                sensor=SensorModel(max_range=30.0, num_fans=24, fan_min_deg=-22.0,
                                   fan_max_deg=3.0, azimuth_step_deg=1.5),
                max_sensor_separation=max(sep, 1e-9), occlusion=True,
                noise_sigma=0.0, rng_seed=31,
            )
            # same world/seed, increasing separation cap on a ray: overlap falls
            pair = generate_scene(cfg)
            overlaps.append(pair.overlap)
        assert overlaps[0] >= overlaps[1] >= overlaps[2] - 0.05

    def test_impossible_config_raises(self):
        base = toy_scene_config(seed=1)
        starved = SceneConfig(
            world_extent=24.0, num_boxes=0, num_cylinders=0, num_walls=0,
            sensor=SensorModel(max_range=1.0, num_fans=2, fan_min_deg=2.0,
                               fan_max_deg=3.0, azimuth_step_deg=30.0),
            max_sensor_separation=1.0, occlusion=True,
            noise_sigma=0.0, rng_seed=1,
        )
        from pointreg.scenes import SceneGenerationError

        with pytest.raises(SceneGenerationError):
            generate_scene(starved)


class TestDatasetRoundTrip:
    def test_save_load_bit_exact(self, tmp_path):
        pairs = generate_dataset(toy_scene_config(seed=40), 5)
        dataset_save(pairs, tmp_path / "ds")
        loaded = dataset_load(tmp_path / "ds")
        assert len(loaded) == 5
        for a, b in zip(pairs, loaded):
            assert a.scene_id == b.scene_id
            np.testing.assert_array_equal(a.source.coords, b.source.coords)
            np.testing.assert_array_equal(a.source.intensity, b.source.intensity)
            np.testing.assert_array_equal(a.target.coords, b.target.coords)
            np.testing.assert_array_equal(
                a.ground_truth.matrix(), b.ground_truth.matrix()
            )
            assert a.overlap == b.overlap

    def test_truncated_cloud_file_named_in_error(self, tmp_path):
        pairs = generate_dataset(toy_scene_config(seed=41), 2)
        dataset_save(pairs, tmp_path / "ds")
        victim = next((tmp_path / "ds").glob("*_source.freg"))
        victim.write_bytes(victim.read_bytes()[:100])
        with pytest.raises(Exception, match=victim.name):
            dataset_load(tmp_path / "ds")

    def test_missing_file_referenced_by_manifest(self, tmp_path):
        pairs = generate_dataset(toy_scene_config(seed=42), 2)
        dataset_save(pairs, tmp_path / "ds")
        victim = next((tmp_path / "ds").glob("*_target.freg"))
        victim.unlink()
        with pytest.raises(DatasetError, match="missing file"):
            dataset_load(tmp_path / "ds")

    def test_malformed_manifest_line(self, tmp_path):
        pairs = generate_dataset(toy_scene_config(seed=43), 1)
        dataset_save(pairs, tmp_path / "ds")
        manifest = tmp_path / "ds" / "manifest.jsonl"
        manifest.write_text(manifest.read_text() + "{not json\n")
        with pytest.raises(DatasetError, match="bad record"):
            dataset_load(tmp_path / "ds")

    def test_manifest_records_are_complete(self, tmp_path):
        pairs = generate_dataset(toy_scene_config(seed=44), 1)
        dataset_save(pairs, tmp_path / "ds")
        record = json.loads(
            (tmp_path / "ds" / "manifest.jsonl").read_text().splitlines()[0]
        )
        assert set(record) == {
            "scene_id", "source_file", "target_file",
            "ground_truth", "overlap", "separation",
        }
        assert len(record["ground_truth"]) == 16
        assert record["separation"] == pytest.approx(
            float(np.linalg.norm(pairs[0].ground_truth.translation))
        )


class TestDatasetStatistics:
    def test_single_pair_unit_step(self):
        pair = generate_scene(toy_scene_config(seed=50))
        stats = dataset_statistics([pair])
        for table in stats.values():
            assert table.shape == (1, 2)
            assert table[0, 1] == 1.0

    def test_two_value_ecdf(self):
        pair = generate_scene(toy_scene_config(seed=51))
        import dataclasses

        far = ScenePair(
            source=pair.source, target=pair.target,
            ground_truth=pair.ground_truth, overlap=pair.overlap,
            scene_id="other",
        )
        stats = dataset_statistics([pair, far])
        table = stats["relative_distance"]
        np.testing.assert_allclose(table[:, 1], [0.5, 1.0])

    def test_matches_sort_and_rank(self):
        pairs = generate_dataset(toy_scene_config(seed=52), 12)
        stats = dataset_statistics(pairs)
        overlaps = np.sort([p.overlap for p in pairs])
        np.testing.assert_allclose(stats["overlap_ratio"][:, 0], overlaps)
        np.testing.assert_allclose(
            stats["overlap_ratio"][:, 1], np.arange(1, 13) / 12
        )
