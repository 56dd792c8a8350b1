from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import sdf_grid
from sdfgraph.errors import (DegenerateWeights, MissingSubmap, NotConnected, SameSubmap,
                             TimestampOutOfRange, UnobservedRegion)
from sdfgraph.esdf import compute_esdf
from sdfgraph.integration import PointcloudFrame
from sdfgraph.pose_graph import (BackendConfig, PoseGraph, add_loop_closure,
                                 approximate_registration_cost, full_registration_cost,
                                 loop_residual, odometry_residual, optimize,
                                 registration_residual, registration_residuals,
                                 sample_registration_points, total_cost)
from sdfgraph.submap import SubmapCollection
from sdfgraph.surface import IsoSurfacePointSet, extract_isosurface
from sdfgraph.transforms import (inverse, make_transform, matrix_to_pose, pose_to_matrix,
                                 se3_exp, translation, wrap_angle)
from sdfgraph.voxel_grid import ESDF, VoxelGrid

R = 0.1


def esdf_from(fn, lo=(-10, -10, -10), hi=(20, 20, 20), r=R):
    """ESDF grid holding ``fn`` at every voxel center of an index box, all measured."""
    axes = [np.arange(a, b) for a, b in zip(lo, hi)]
    idx = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    g = VoxelGrid(r, ESDF)
    g.set_voxels(idx, fn((idx + 0.5) * r), 1.0)
    g.freeze()
    return g


def plane_esdf(normal=(1, 0, 0), offset=1.0, **kw):
    n = np.asarray(normal, float) / np.linalg.norm(normal)
    return esdf_from(lambda p: p @ n - offset, **kw)


def sphere_esdf(center=(0.5, 0.5, 0.5), radius=0.6):
    c = np.asarray(center, float)
    return esdf_from(lambda p: np.linalg.norm(p - c, axis=1) - radius)


def random_pose(rng, scale=2.0):
    return np.concatenate([rng.uniform(-scale, scale, 3), [rng.uniform(-np.pi, np.pi)]])


def random_se3(rng, scale=1.0):
    return se3_exp(np.concatenate([rng.normal(0, scale, 3), rng.normal(0, 0.3, 3)]))


def central_difference(f, q_i, q_j, h=1e-6):
    x0 = np.concatenate([q_i, q_j])
    cols = []
    for k in range(8):
        e = np.zeros(8)
        e[k] = h
        a, b = x0 + e, x0 - e
        cols.append((f(a[:4], a[4:]) - f(b[:4], b[4:])) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_err(J, fd):
    return np.linalg.norm(J - fd) / max(np.linalg.norm(fd), 1e-12)


# --------------------------------------------------------------------------
# relative-pose residuals

class TestOdometryResidual:
    def test_identity(self):
        e, _, _ = odometry_residual(np.zeros(4), np.zeros(4), np.eye(4))
        np.testing.assert_array_equal(e, 0.0)

    def test_consistent(self):
        e, _, _ = odometry_residual(np.eye(4), translation(1.0), translation(1.0))
        np.testing.assert_allclose(e, 0.0, atol=1e-15)

    def test_pure_translation_error(self):
        e, _, _ = odometry_residual(np.eye(4), translation(1.1), translation(1.0))
        np.testing.assert_allclose(e, (0.1, 0, 0, 0, 0, 0), atol=1e-12)

    def test_accepts_parameters_or_matrices(self, rng):
        qi, qj = random_pose(rng), random_pose(rng)
        T = random_se3(rng)
        a = odometry_residual(qi, qj, T)[0]
        b = odometry_residual(pose_to_matrix(qi), pose_to_matrix(qj), T)[0]
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestLoopResidual:
    def test_identity(self):
        I = np.eye(4)
        np.testing.assert_array_equal(loop_residual(np.zeros(4), np.zeros(4), I, I, I)[0], 0)

    def test_reduces_to_odometry(self, rng):
        for _ in range(5):
            qi, qj, T = random_pose(rng), random_pose(rng), random_se3(rng)
            lo = loop_residual(qi, qj, T, np.eye(4), np.eye(4))
            od = odometry_residual(qi, qj, T)
            for a, b in zip(lo, od):
                np.testing.assert_allclose(a, b, atol=1e-14)

    def test_constructed_consistency(self, rng):
        for _ in range(20):
            qi, qj = random_pose(rng), random_pose(rng)
            A, C = random_se3(rng), random_se3(rng)
            T_WCl = pose_to_matrix(qi) @ A
            T_WCk = pose_to_matrix(qj) @ C
            e, _, _ = loop_residual(qi, qj, inverse(T_WCl) @ T_WCk, A, C)
            assert np.linalg.norm(e) < 1e-12


@given(st.integers(0, 2**31 - 1))
def test_relative_jacobians_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    qi, qj = random_pose(rng), random_pose(rng)
    T, A, C = random_se3(rng), random_se3(rng), random_se3(rng)
    for f in (lambda a, b: odometry_residual(a, b, T),
              lambda a, b: loop_residual(a, b, T, A, C)):
        _, Ji, Jj = f(qi, qj)
        fd = central_difference(lambda a, b: f(a, b)[0], qi, qj)
        assert rel_err(np.hstack([Ji, Jj]), fd) < 1e-5


# --------------------------------------------------------------------------
# registration residuals

class TestRegistrationResidual:
    def test_plane_offset(self):
        r, _ = registration_residual(np.array([1.07, 0.0, 0.0]), np.zeros(4), np.zeros(4),
                                     plane_esdf())
        # distances are stored in single precision
        assert r == pytest.approx(-0.07, abs=1e-6)

    def test_relative_pose_is_applied(self):
        # S_j sits 0.5 m ahead of S_i, so the point lands at x = 0.6 in S_j
        r, _ = registration_residual(np.array([1.1, 0.0, 0.0]), np.zeros(4),
                                     np.array([0.5, 0, 0, 0]), plane_esdf())
        assert r == pytest.approx(0.4, abs=1e-6)

    def test_unobserved_raises(self):
        with pytest.raises(UnobservedRegion):
            registration_residual(np.array([50.0, 0, 0]), np.zeros(4), np.zeros(4),
                                  plane_esdf())

    def test_batch_flags_invalid(self):
        r, J, ok = registration_residuals(np.array([[1.2, 0, 0], [50.0, 0, 0]]),
                                          np.zeros(4), np.zeros(4), plane_esdf())
        assert ok.tolist() == [True, False]
        assert r[0] == pytest.approx(-0.2)

    def test_self_registration_is_zero(self):
        box = lambda p: np.max(np.abs(p - 0.8) - [0.5, 0.4, 0.3], axis=1)
        tsdf = sdf_grid(box, R, (0, 0, 0), (1.6, 1.6, 1.6), 0.3)
        esdf = compute_esdf(tsdf)
        iso = extract_isosurface(tsdf, with_mesh=False)
        q = np.array([1.0, -2.0, 0.3, 0.7])
        r, _, ok = registration_residuals(iso.points, q, q, esdf)
        assert ok.mean() > 0.9
        np.testing.assert_allclose(r[ok], 0.0, atol=1e-6)


def fd_safe(points, q_i, q_j, margin=1e-3):
    """Mask of points whose mapped location stays clear of trilinear cell faces."""
    T = inverse(pose_to_matrix(q_j)) @ pose_to_matrix(q_i)
    s = points @ T[:3, :3].T + T[:3, 3]
    frac = (s / R - 0.5) % 1.0
    return np.all((frac > margin) & (frac < 1 - margin), axis=1)


@given(st.integers(0, 2**31 - 1))
def test_registration_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    esdf = sphere_esdf()
    q_j = random_pose(rng, 0.3)
    q_i = q_j + np.concatenate([rng.uniform(-0.2, 0.2, 3), [rng.uniform(-0.5, 0.5)]])
    pts = rng.uniform(-0.2, 1.2, size=(20, 3))
    pts = pts[fd_safe(pts, q_i, q_j)]
    for p in pts:
        r, J = registration_residual(p, q_i, q_j, esdf)
        fd = central_difference(lambda a, b: registration_residual(p, a, b, esdf)[0],
                                q_i, q_j, h=1e-7)
        assert rel_err(J, fd) < 1e-5


@given(st.integers(0, 2**31 - 1))
def test_registration_jacobian_orthogonal_to_plane_tangents(seed):
    rng = np.random.default_rng(seed)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    esdf = plane_esdf(n, 0.2, lo=(-20, -20, -20), hi=(20, 20, 20))
    q_i, q_j = random_pose(rng, 0.3), random_pose(rng, 0.3)
    t1 = np.cross(n, rng.normal(size=3))
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    R_j = pose_to_matrix(q_j)[:3, :3]
    _, J, ok = registration_residuals(rng.uniform(-0.5, 0.5, (10, 3)), q_i, q_j, esdf)
    assert ok.all()
    for t in (t1, t2):
        w = R_j @ t  # the tangent direction expressed in the world frame
        np.testing.assert_allclose(J[:, :3] @ w, 0.0, atol=1e-6)
        np.testing.assert_allclose(J[:, 4:7] @ w, 0.0, atol=1e-6)


# --------------------------------------------------------------------------
# sampling

def iso_set(weights, rng=None):
    n = len(weights)
    pts = np.zeros((n, 3)) if rng is None else rng.uniform(-0.5, 0.5, (n, 3))
    return IsoSurfacePointSet(pts, np.asarray(weights, dtype=float))


class TestSampling:
    def test_count_with_replacement(self):
        s = sample_registration_points(iso_set(np.ones(100)), 1.0, rng_seed=0)
        assert len(s.indices) == 100 and len(np.unique(s.indices)) < 100
        np.testing.assert_allclose(s.factors, 1.0)
        s = sample_registration_points(iso_set(np.ones(101)), 0.05, rng_seed=0)
        assert len(s.indices) == 6
        np.testing.assert_allclose(s.factors, 20.0)

    def test_uniform_frequencies_within_three_sigma(self):
        n, trials = 100, 100_000
        iso = iso_set(np.ones(n))
        rng = np.random.default_rng(7)
        counts = np.zeros(n)
        for _ in range(trials):
            counts += np.bincount(sample_registration_points(iso, 1.0, rng=rng).indices,
                                  minlength=n)
        total = n * trials
        sigma = np.sqrt(total * (1 / n) * (1 - 1 / n))
        assert np.all(np.abs(counts - total / n) <= 3 * sigma)

    def test_degenerate_mass(self):
        s = sample_registration_points(iso_set([1.0] + [0.0] * 9), 1.0, rng_seed=3)
        np.testing.assert_array_equal(s.indices, 0)

    def test_multinomial_proportions(self):
        # 2 points at alpha 1 draw only twice; repeat to reach 1e5 draws
        rng = np.random.default_rng(4)
        draws = np.concatenate([sample_registration_points(iso_set([1.0, 3.0]), 1.0,
                                                           rng=rng).indices
                                for _ in range(50_000)])
        freq = np.mean(draws == 1)
        assert len(draws) == 100_000 and freq == pytest.approx(0.75, abs=0.01)

    def test_errors(self):
        with pytest.raises(DegenerateWeights):
            sample_registration_points(iso_set(np.zeros(5)), 0.5, rng_seed=0)
        with pytest.raises(ValueError):
            sample_registration_points(iso_set(np.ones(5)), 0.0, rng_seed=0)
        with pytest.raises(ValueError):
            sample_registration_points(iso_set(np.ones(5)), 0.5, strategy="stratified")

    def test_same_seed_same_draw(self):
        iso = iso_set(np.arange(1.0, 50.0))
        a = sample_registration_points(iso, 0.3, rng_seed=9)
        b = sample_registration_points(iso, 0.3, rng_seed=9)
        np.testing.assert_array_equal(a.indices, b.indices)


@settings(max_examples=10)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["weighted", "uniform-weighted",
                                                   "uniform-unweighted"]))
def test_subsampled_cost_is_unbiased(seed, strategy):
    rng = np.random.default_rng(seed)
    esdf = plane_esdf((0, 0, 1), 0.0)
    n = 40
    iso = IsoSurfacePointSet(np.column_stack([rng.uniform(-0.5, 0.5, (n, 2)),
                                              rng.uniform(-0.3, 0.3, n)]),
                             rng.uniform(0.1, 2.0, n))
    T = make_transform(t=(0.0, 0.0, 0.05))
    r2 = (iso.points[:, 2] + 0.05) ** 2
    if strategy == "uniform-unweighted":
        expected = r2.sum()
        assert full_registration_cost(iso, esdf, T) == pytest.approx(expected, rel=1e-6)
    else:
        expected = n * np.sum(iso.weights * r2) / iso.weights.sum()
    draws = [approximate_registration_cost(iso, esdf, T, 0.25, rng=rng, strategy=strategy)
             for _ in range(4000)]
    stderr = np.std(draws) / np.sqrt(len(draws))
    assert abs(np.mean(draws) - expected) <= 5 * stderr


# --------------------------------------------------------------------------
# graph and solver

def compose(q, T):
    return matrix_to_pose(pose_to_matrix(q) @ T)


class TestGraph:
    def test_yaw_is_wrapped(self):
        g = PoseGraph()
        assert g.add_node(0, [0, 0, 0, 3 * np.pi]).q[3] == pytest.approx(np.pi)

    def test_errors(self):
        g = PoseGraph()
        g.add_node(0, np.zeros(4))
        g.add_node(1, np.zeros(4))
        with pytest.raises(MissingSubmap):
            g.add_odometry(0, 2, np.eye(4))
        with pytest.raises(ValueError):
            g.add_odometry(0, 0, np.eye(4))
        with pytest.raises(NotConnected):
            optimize(g)
        with pytest.raises(MissingSubmap):
            optimize(PoseGraph())
        with pytest.raises(ValueError):
            PoseGraph(BackendConfig(alpha=1.5))
        with pytest.raises(ValueError):
            PoseGraph(BackendConfig(strategy="uniform"))

    def test_symmetric_registration_pairs(self):
        g = PoseGraph()
        for k in range(3):
            g.add_node(k, np.zeros(4))
        g.set_registration_pairs([(0, 2)])
        assert g.registration_pairs == [(0, 2), (2, 0)]

    def test_dump(self, tmp_path):
        g = PoseGraph()
        g.add_node(0, np.zeros(4), fixed=True)
        g.add_node(1, [1.1, 0, 0, 0])
        g.add_odometry(0, 1, translation(1.0))
        g.dump(tmp_path / "g.txt")
        lines = (tmp_path / "g.txt").read_text().splitlines()
        assert lines[0].split()[:2] == ["node", "0"]
        assert lines[2].split()[0] == "odometry"
        assert float(lines[2].split()[-1]) == pytest.approx(0.1)


class TestOptimize:
    def test_exactly_determined(self):
        g = PoseGraph()
        q0 = np.array([1.0, 2.0, 0.5, 0.4])
        T = make_transform(pose_to_matrix([0, 0, 0, 0.3])[:3, :3], (2.0, -1.0, 0.2))
        g.add_node(0, q0, fixed=True)
        g.add_node(1, np.zeros(4))
        g.add_odometry(0, 1, T)
        rep = optimize(g)
        np.testing.assert_allclose(g.nodes[1].q, compose(q0, T), atol=1e-8)
        assert rep.final_cost < 1e-12 and rep.initial_cost > 1.0
        np.testing.assert_allclose(g.nodes[0].q, q0, atol=1e-15)

    def test_square_loop_with_yaw_bias(self):
        truth = [np.array([0, 0, 0, 0.0]), np.array([4, 0, 0, np.pi / 2]),
                 np.array([4, 4, 0, np.pi]), np.array([0, 4, 0, -np.pi / 2]),
                 np.array([0, 0, 0, 0.0])]
        bias = pose_to_matrix([0, 0, 0, 0.03])
        g = PoseGraph()
        q = truth[0]
        g.add_node(0, q, fixed=True)
        for k in range(1, 5):
            T_hat = inverse(pose_to_matrix(truth[k - 1])) @ pose_to_matrix(truth[k]) @ bias
            q = compose(q, T_hat)
            g.add_node(k, q)
            g.add_odometry(k - 1, k, T_hat)
        assert np.linalg.norm(g.nodes[4].q[:3]) > 0.3
        # sensor frames coincide with the submap frames
        loop_cov = np.diag(np.full(6, 1e-4) ** 2)
        c = g.add_loop(4, 0, np.eye(4), np.eye(4), np.eye(4), loop_cov)
        optimize(g)
        assert np.linalg.norm(g.residual(g.constraints[c])[0]) < 1e-3
        gap = pose_to_matrix(g.nodes[4].q)[:3, 3] - pose_to_matrix(g.nodes[0].q)[:3, 3]
        assert np.linalg.norm(gap) < 0.01

    def test_registration_recovers_offset(self):
        # a room-like box: walls constrain every direction and the yaw
        box = lambda p: -np.max(np.abs(p - [1.6, 1.2, 1.0]) - [1.1, 0.8, 0.6], axis=1)
        tsdf = sdf_grid(box, R, (0, 0, 0), (3.2, 2.4, 2.0), 0.3)
        sm = SimpleNamespace(isosurface=extract_isosurface(tsdf, with_mesh=False),
                             esdf=compute_esdf(tsdf))
        coll = {0: sm, 1: sm}
        g = PoseGraph(BackendConfig(alpha=0.2, max_iterations=60, sigma_r=0.05))
        g.add_node(0, np.zeros(4), fixed=True)
        g.add_node(1, [0.3 / np.sqrt(3)] * 3 + [np.radians(5.0)])
        g.set_registration_pairs([(0, 1)])
        # registration-only: no odometry, so connectivity is supplied by hand
        g.check_connected = lambda: None
        optimize(g, coll)
        q = g.nodes[1].q
        assert np.linalg.norm(q[:3]) < 0.5 * R
        assert abs(np.degrees(wrap_angle(q[3]))) < 0.5

    def test_zero_residual_fixed_point(self, rng):
        truth = [random_pose(rng) for _ in range(4)]
        g = PoseGraph()
        for k, q in enumerate(truth):
            g.add_node(k, q, fixed=k == 0)
        for k in range(1, 4):
            g.add_odometry(k - 1, k, inverse(pose_to_matrix(truth[k - 1]))
                           @ pose_to_matrix(truth[k]))
        g.add_loop(3, 0, inverse(pose_to_matrix(truth[3])) @ pose_to_matrix(truth[0]),
                   np.eye(4), np.eye(4))
        rep = optimize(g)
        assert rep.iterations == 1
        for k, q in enumerate(truth):
            assert np.linalg.norm(g.nodes[k].q - q) <= g.config.epsilon_q

    def test_report_and_publish(self):
        published = {}
        coll = SimpleNamespace(publish_poses=published.update)
        g = PoseGraph()
        g.add_node(0, np.zeros(4))
        g.add_node(1, np.zeros(4))
        g.add_odometry(0, 1, translation(1.0))
        rep = optimize(g, coll)
        assert g.nodes[0].fixed and list(published) == [1]
        assert rep.seed == 0 and rep.wall_time >= 0 and rep.iterations >= 1


@given(st.integers(0, 2**31 - 1), st.integers(3, 6))
def test_cost_never_increases_without_registration(seed, n):
    rng = np.random.default_rng(seed)
    truth = [random_pose(rng, 3.0) for _ in range(n)]
    g = PoseGraph()
    for k, q in enumerate(truth):
        g.add_node(k, q + np.concatenate([rng.normal(0, 0.3, 3), rng.normal(0, 0.2, 1)]),
                   fixed=k == 0)
    for k in range(1, n):
        noisy = inverse(pose_to_matrix(truth[k - 1])) @ pose_to_matrix(truth[k])
        g.add_odometry(k - 1, k, noisy @ random_se3(rng, 0.05))
    g.add_loop(n - 1, 0, inverse(pose_to_matrix(truth[-1])) @ pose_to_matrix(truth[0]),
               np.eye(4), np.eye(4))
    before = total_cost(g)
    rep = optimize(g)
    hist = [rep.initial_cost] + rep.cost_history
    assert all(b <= a * (1 + 1e-12) for a, b in zip(hist[:-1], hist[1:]))
    assert total_cost(g) <= before


@given(st.integers(0, 2**31 - 1))
def test_gauge_invariance(seed):
    rng = np.random.default_rng(seed)
    G = pose_to_matrix(random_pose(rng, 5.0))
    qi, qj = random_pose(rng), random_pose(rng)
    gi = matrix_to_pose(G @ pose_to_matrix(qi))
    gj = matrix_to_pose(G @ pose_to_matrix(qj))
    T, A, C = random_se3(rng), random_se3(rng), random_se3(rng)
    np.testing.assert_allclose(odometry_residual(gi, gj, T)[0],
                               odometry_residual(qi, qj, T)[0], atol=1e-9)
    np.testing.assert_allclose(loop_residual(gi, gj, T, A, C)[0],
                               loop_residual(qi, qj, T, A, C)[0], atol=1e-9)
    esdf = sphere_esdf()
    pts = rng.uniform(0.0, 1.0, (10, 3))
    pts = pts[fd_safe(pts, qi, qi)]
    a, _, oka = registration_residuals(pts, qi, qi, esdf)
    b, _, okb = registration_residuals(pts, gi, gi, esdf)
    np.testing.assert_array_equal(oka, okb)
    np.testing.assert_allclose(a[oka], b[okb], atol=1e-9)


# --------------------------------------------------------------------------
# loop-closure binding

def six_submaps():
    wall = np.stack(np.meshgrid([3.0], np.linspace(-1, 1, 6), np.linspace(-0.5, 0.5, 4),
                                indexing="ij"), -1).reshape(-1, 3)
    coll = SubmapCollection(0.2, 4)
    rng = np.random.default_rng(2)
    for k in range(24):
        T = make_transform(pose_to_matrix([0, 0, 0, rng.uniform(-0.2, 0.2)])[:3, :3],
                           (0.1 * k, 0.0, 0.0))
        coll.add_frame(PointcloudFrame(0.1 * k, wall, T))
    coll.finalize()
    g = PoseGraph()
    for sm in coll:
        g.add_node(sm.id, sm.q, fixed=sm.id == 0)
    return coll, g


class TestAddLoopClosure:
    def test_binds_history_entries(self):
        coll, g = six_submaps()
        assert len(coll) == 6
        c = g.constraints[add_loop_closure(g, coll, 0.1, 2.2, np.eye(4), 0.05)]
        assert (c.i, c.j) == (0, 5)
        np.testing.assert_array_equal(c.T_SiCl, coll[0].pose_history[1][1])
        np.testing.assert_array_equal(c.T_SjCk, coll[5].pose_history[2][1])

    def test_same_submap(self):
        coll, g = six_submaps()
        with pytest.raises(SameSubmap):
            add_loop_closure(g, coll, 0.8, 1.1, np.eye(4), 0.05)

    def test_out_of_range(self):
        coll, g = six_submaps()
        with pytest.raises(TimestampOutOfRange):
            add_loop_closure(g, coll, 0.1, 7.0, np.eye(4), 0.05)

    def test_nearest_entry(self):
        coll, g = six_submaps()
        # 0.33 is nearer history entry 0.3 than 0.4, both in submap 0
        c = g.constraints[add_loop_closure(g, coll, 0.33, 1.68, np.eye(4), 0.05)]
        np.testing.assert_array_equal(c.T_SiCl, coll[0].pose_history[3][1])
        np.testing.assert_array_equal(c.T_SjCk, coll[4].pose_history[1][1])
