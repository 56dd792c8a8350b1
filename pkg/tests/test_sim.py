import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sdfgraph.evaluation import fuse_global_map, reconstruction_error
from sdfgraph.io import MapperConfig
from sdfgraph.pipeline import build_frontend
from sdfgraph.sim import (DriftModel, SensorModel, SyntheticWorld, apply_drift, box, cylinder,
                          increments, load_scenario, orbit_trajectory, plane, render_scan,
                          scenario_from_dict, sphere, trace_rays, world_sdf)
from sdfgraph.transforms import make_transform, pose_to_matrix, yaw_of

WORLD = SyntheticWorld([plane((0, 0, 1), 0.0, ground=True),
                        box((0, 0, 2), (2, 1.5, 2), 0.4),
                        sphere((5, 2, 1.5), 1.2),
                        cylinder((-4, -3), 1.0, 0.0, 3.0)])


class TestWorldSdf:
    def test_sphere(self):
        d, g = world_sdf(SyntheticWorld([sphere((0, 0, 0), 1.0)]), (2, 0, 0))
        assert d == pytest.approx(1.0)
        np.testing.assert_allclose(g, (1, 0, 0), atol=1e-12)

    def test_ground_plane(self):
        d, g = world_sdf(SyntheticWorld([plane((0, 0, 1), 0.0)]), (0, 0, -0.5))
        assert d == pytest.approx(-0.5)
        np.testing.assert_allclose(g, (0, 0, 1))

    def test_box_corner(self):
        d, _ = world_sdf(SyntheticWorld([box((0, 0, 0), (1, 1, 1))]), (2, 2, 0))
        assert d == pytest.approx(np.sqrt(2))

    def test_box_inside(self):
        d, g = world_sdf(SyntheticWorld([box((0, 0, 0), (1, 2, 3))]), (0.7, 0, 0))
        assert d == pytest.approx(-0.3)
        np.testing.assert_allclose(g, (1, 0, 0), atol=1e-12)

    def test_cylinder(self):
        w = SyntheticWorld([cylinder((0, 0), 1.0, 0.0, 2.0)])
        assert world_sdf(w, (3, 0, 1))[0] == pytest.approx(2.0)
        assert world_sdf(w, (0, 0, 3))[0] == pytest.approx(1.0)

    def test_min_over_primitives(self):
        d, _, which = WORLD.sdf(np.array([[5, 2, 3.0], [0, 0, -1.0]]))
        assert which.tolist() == [2, 0]
        assert d[0] == pytest.approx(0.3)

    def test_round_trip_dict(self):
        p = np.random.default_rng(0).uniform(-6, 6, (50, 3))
        back = SyntheticWorld.from_dict(WORLD.to_dict())
        np.testing.assert_array_equal(back.sdf(p)[0], WORLD.sdf(p)[0])


points = st.lists(st.floats(-8, 8), min_size=3, max_size=3)


@given(points, points)
def test_world_sdf_is_lipschitz(a, b):
    da, _ = world_sdf(WORLD, a)
    db, _ = world_sdf(WORLD, b)
    assert abs(da - db) <= np.linalg.norm(np.subtract(a, b)) + 1e-9


@given(points)
def test_gradient_matches_finite_differences(p):
    p = np.array(p)
    d, g = world_sdf(WORLD, p)
    h = 1e-6
    fd = np.array([(world_sdf(WORLD, p + h * e)[0] - world_sdf(WORLD, p - h * e)[0]) / (2 * h)
                   for e in np.eye(3)])
    # skip the measure-zero kinks where the nearest primitive or feature changes
    if np.linalg.norm(fd) > 1 - 1e-4:
        np.testing.assert_allclose(g, fd, atol=1e-4)


class TestRendering:
    def test_single_ray_hits_plane(self):
        w = SyntheticWorld([plane((-1, 0, 0), -5.0)])  # free space is x < 5
        r = trace_rays(w, np.zeros(3), np.array([[1.0, 0, 0]]), 20.0)
        assert r[0] == pytest.approx(5.0, abs=1e-4)

    def test_empty_space(self):
        w = SyntheticWorld([sphere((0, 0, -100), 1.0)])
        f = render_scan(w, np.eye(4), SensorModel(elevation_min=0, elevation_max=30))
        assert len(f.points) == 0

    def test_max_range_is_a_miss(self):
        w = SyntheticWorld([plane((-1, 0, 0), -5.0)])
        assert trace_rays(w, np.zeros(3), np.array([[1.0, 0, 0]]), 4.0)[0] < 0

    def test_hits_lie_on_surface(self):
        T = make_transform(t=(8, -6, 2.5))
        f = render_scan(WORLD, T, SensorModel())
        assert len(f.points) > 500
        world_pts = f.points @ T[:3, :3].T + T[:3, 3]
        assert np.max(np.abs(WORLD.sdf(world_pts)[0])) < 1e-4

    def test_range_noise_statistics(self):
        w = SyntheticWorld([plane((0, 0, 1), -20.0)])
        kw = dict(n_azimuth=500, n_elevation=20, elevation_min=-80, elevation_max=-10,
                  max_range=500.0, min_range=0.0)
        clean = render_scan(w, np.eye(4), SensorModel(**kw))
        noisy = render_scan(w, np.eye(4), SensorModel(range_noise=0.01, **kw),
                            np.random.default_rng(0))
        assert len(noisy.points) == 10_000
        diff = np.linalg.norm(noisy.points, axis=1) - np.linalg.norm(clean.points, axis=1)
        assert np.std(diff) == pytest.approx(0.01, rel=0.1)
        assert abs(np.mean(diff)) < 1e-3

    def test_rays_rotate_between_frames(self):
        s = SensorModel()
        assert not np.allclose(s.directions(0), s.directions(1))
        np.testing.assert_allclose(np.linalg.norm(s.directions(3), axis=1), 1.0)


class TestDrift:
    poses = orbit_trajectory(duration=20.0, rate=5.0)[1]

    def test_zero_drift_is_ground_truth(self):
        out = apply_drift(increments(self.poses), DriftModel(), self.poses[0])
        for a, b in zip(out, self.poses):
            np.testing.assert_allclose(a, b, atol=1e-9)

    def test_pure_yaw_bias(self):
        k = 50
        incs = [np.eye(4)] * k
        out = apply_drift(incs, DriftModel(bias_yaw=0.01))
        assert yaw_of(out[-1]) == pytest.approx(k * 0.01, abs=1e-12)
        np.testing.assert_allclose(out[-1][:3, 3], 0.0)

    def test_roll_pitch_untouched(self):
        roll = np.array([[1, 0, 0], [0, np.cos(0.02), -np.sin(0.02)],
                         [0, np.sin(0.02), np.cos(0.02)]])
        incs = [make_transform(pose_to_matrix([0, 0, 0, 0.1])[:3, :3] @ roll, (0.3, 0, 0))] * 30
        truth = [np.eye(4)]
        for T in incs:
            truth.append(truth[-1] @ T)
        out = apply_drift(incs, DriftModel(sigma_yaw=0.01, bias_yaw=0.003, seed=5))
        for a, b in zip(out, truth):
            # same gravity direction in the body frame
            np.testing.assert_allclose(a[2, :3], b[2, :3], atol=1e-12)

    def test_reproducible(self):
        m = DriftModel(sigma_t=(0.01, 0.01, 0.01), bias_t=(0.01, 0, 0), sigma_yaw=0.001, seed=3)
        a = apply_drift(increments(self.poses), m)
        b = apply_drift(increments(self.poses), m)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        m.seed = 4
        c = apply_drift(increments(self.poses), m)
        assert not np.array_equal(a[-1], c[-1])

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            DriftModel(sigma_yaw=-1.0)

    def test_heavy_drift_preset(self):
        sc = load_scenario("orbit")
        assert sc.timestamps[-1] - sc.timestamps[0] == pytest.approx(242.0)
        err = np.linalg.norm(sc.odometry()[-1][:3, 3] - sc.poses[-1][:3, 3])
        assert err == pytest.approx(9.9, abs=0.5)


def small_scenario(drift=None):
    return scenario_from_dict({
        "seed": 1, "frame_rate": 2.0,
        "world": WORLD.to_dict(),
        "trajectory": {"type": "orbit", "center": [0, 0], "radius": 7.0, "altitude": 3.0,
                       "duration": 30.0},
        "sensor": {"n_azimuth": 240, "n_elevation": 16, "elevation_min": -40,
                   "elevation_max": 20, "max_range": 12.0},
        "drift": drift or {},
    })


def test_scenario_render_is_reproducible():
    sc = small_scenario({"sigma_t": [0.01, 0.01, 0.0], "seed": 2})
    a, b = sc.render(), sc.render()
    assert all(np.array_equal(x.points, y.points)
               and np.array_equal(x.odometry_pose, y.odometry_pose) for x, y in zip(a, b))


def test_drift_free_reconstruction_within_a_voxel():
    sc = small_scenario()
    cfg = MapperConfig(voxel_size=0.2, frames_per_submap=10)
    coll = build_frontend(sc.render(), cfg)
    fused = fuse_global_map(coll)
    rec = reconstruction_error(fused, sc.world, truncation=cfg.truncation)
    assert rec["count"] > 10_000
    assert rec["rmse"] < cfg.voxel_size
