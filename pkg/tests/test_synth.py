import math
from dataclasses import replace

import numpy as np
import pytest

from fusionpose import dataio, synth
from fusionpose.model import Pose3D, validate_sample

# largest double below 1: the config keeps probabilities in [0, 1)
ALMOST_ONE = float(np.nextafter(1.0, 0.0))

MODEL = synth.BodyModel()


def _bone_lengths(joints, model):
    return np.array([np.linalg.norm(joints[a] - joints[b]) for a, b, _ in model.bones()])


class TestPose:
    def test_rest_pose(self):
        j = synth.forward_kinematics(MODEL, synth.rest_angles())
        np.testing.assert_allclose(_bone_lengths(j, MODEL), [L for *_, L in MODEL.bones()], atol=1e-12)
        # neutral pose: limbs hang straight down, left/right mirror images
        L, R = synth.J["left_ankle"], synth.J["right_ankle"]
        np.testing.assert_allclose(j[L] * [1, -1, 1], j[R], atol=1e-12)
        assert j[synth.J["left_wrist"], 2] < j[synth.J["left_elbow"], 2] < j[synth.J["left_shoulder"], 2]

    def test_sampled_bones_are_rigid(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            m = MODEL.scaled(rng.uniform(0.9, 1.1))
            pose = synth.sample_pose(m, rng)
            np.testing.assert_allclose(_bone_lengths(pose.joints, m), [L for *_, L in m.bones()], atol=1e-9)

    def test_seeded(self):
        a = synth.sample_pose(MODEL, np.random.default_rng(42))
        b = synth.sample_pose(MODEL, np.random.default_rng(42))
        np.testing.assert_array_equal(a.joints, b.joints)


def _pose(seed=0, distance=(6.0, 6.0)):
    return synth.sample_pose(MODEL, np.random.default_rng(seed), distance_range=distance)


class TestLidar:
    def test_noiseless_points_on_surface(self):
        cfg = synth.profile_config("clean")
        pose = _pose()
        cloud, src = synth.render_lidar(pose, MODEL, cfg, np.random.default_rng(1), return_sources=True)
        caps = synth.capsules(pose, MODEL)
        A = np.stack([caps[k][0] for k in src])
        B = np.stack([caps[k][1] for k in src])
        r = np.array([caps[k][2] for k in src])
        np.testing.assert_allclose(synth.point_segment_distance(cloud.points, A, B), r, atol=1e-9)

    def test_empty_cloud(self):
        cfg = synth.profile_config("clean", dropout_prob=ALMOST_ONE, density_at_10m=50.0)
        with pytest.raises(synth.EmptyCloudError):
            synth.render_lidar(_pose(), MODEL, cfg, np.random.default_rng(0))

    def test_noise_is_half_normal(self):
        sigma = 0.02
        cfg = synth.profile_config("clean", lidar_noise_sigma=sigma, points_per_body=(1, 10**6), density_at_10m=20000.0)
        d = []
        rng = np.random.default_rng(5)
        seed = 0
        while sum(map(len, d)) < 10_000:
            pose = _pose(seed)
            seed += 1
            cloud, src = synth.render_lidar(pose, MODEL, cfg, rng, return_sources=True)
            caps = synth.capsules(pose, MODEL)
            A = np.stack([caps[k][0] for k in src])
            B = np.stack([caps[k][1] for k in src])
            r = np.array([caps[k][2] for k in src])
            d.append(np.abs(synth.point_segment_distance(cloud.points, A, B) - r))
        mean = np.concatenate(d).mean()
        assert mean == pytest.approx(sigma * math.sqrt(2 / math.pi), rel=0.1)

    def test_point_budget_cap(self):
        cfg = synth.profile_config("clean", points_per_body=(10, 120))
        cloud = synth.render_lidar(_pose(), MODEL, cfg, np.random.default_rng(0))
        assert len(cloud) == 120


class TestKeypoints:
    def test_noiseless_projection(self):
        from fusionpose import geometry
        cfg = synth.profile_config("clean")
        cam = synth.make_camera()
        pose = synth.sample_pose(MODEL, np.random.default_rng(3), cam)
        kp = synth.render_keypoints(pose, cam, cfg, np.random.default_rng(0))
        uv, _ = geometry.project_to_image(geometry.vehicle_to_camera(pose.joints, cam), cam)
        np.testing.assert_allclose(kp.joints, uv, atol=1e-9)
        np.testing.assert_array_equal(kp.confidence, 1.0)

    def test_forced_outliers(self):
        cfg = synth.profile_config("clean", outlier_prob=ALMOST_ONE, outlier_shift=50.0)
        cam = synth.make_camera()
        rng = np.random.default_rng(8)
        pose = synth.sample_pose(MODEL, rng, cam)
        exact = synth.render_keypoints(pose, cam, synth.profile_config("clean"), np.random.default_rng(0))
        kp = synth.render_keypoints(pose, cam, cfg, rng)
        np.testing.assert_allclose(np.linalg.norm(kp.joints - exact.joints, axis=1), 50.0, atol=1e-9)

    def test_confidence_tracks_error(self):
        cfg = synth.profile_config("nominal")
        cam = synth.make_camera()
        rng = np.random.default_rng(21)
        conf, err = [], []
        while len(conf) < 10_000:
            pose = synth.sample_pose(MODEL, rng, cam)
            kp, e = synth.render_keypoints(pose, cam, cfg, rng, model=MODEL, return_errors=True)
            vis = kp.confidence > 0
            conf.extend(kp.confidence[vis])
            err.extend(e[vis])
        assert np.corrcoef(conf, err)[0, 1] < -0.5

    def test_occluded_joint_has_zero_confidence(self):
        # rest pose seen exactly side-on: the far-side joints hide behind the body
        cam = synth.make_camera()
        body = synth.forward_kinematics(MODEL, synth.rest_angles())
        world = body @ synth._rz(math.pi / 2).T + [8.0, 1.5, MODEL.radii["shin"] - body[:, 2].min()]
        kp = synth.render_keypoints(Pose3D.full(world), cam, synth.profile_config("clean"),
                                    np.random.default_rng(0), model=MODEL)
        assert (kp.confidence == 0).any() and (kp.confidence == 1).any()


class TestDataset:
    def test_empty(self):
        assert synth.generate_dataset(synth.SynthConfig(n_samples=0)) == []

    def test_byte_identical(self, tmp_path):
        cfg = synth.SynthConfig(n_samples=15, rng_seed=9)
        dataio.write_samples(synth.generate_dataset(cfg), tmp_path / "a.jsonl")
        dataio.write_samples(synth.generate_dataset(cfg), tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_workers_do_not_change_output(self):
        cfg = synth.SynthConfig(n_samples=6, rng_seed=4)
        a = synth.generate_dataset(cfg)
        b = synth.generate_dataset(cfg, workers=2)
        assert [dataio.encode_sample(s) for s in a] == [dataio.encode_sample(s) for s in b]

    @pytest.mark.slow
    def test_default_config_passes_filter(self):
        data = synth.generate_dataset(synth.SynthConfig(n_samples=1000))
        assert len(data) == 1000
        assert all(validate_sample(s).accepted for s in data)
        assert len({s.id for s in data}) == 1000

    def test_unfiltered_generation_can_fail_filter(self):
        cfg = synth.SynthConfig(n_samples=60, rng_seed=1, require_valid=False, distance_range=(45.0, 50.0))
        data = synth.generate_dataset(replace(cfg, points_per_body=(1, 1000)))
        assert any(not validate_sample(s).accepted for s in data)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            synth.SynthConfig(dropout_prob=1.0)
        with pytest.raises(ValueError):
            synth.SynthConfig(lidar_noise_sigma=-0.1)
        with pytest.raises(ValueError):
            synth.profile_config("foggy")
