import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import plane_sdf, sdf_grid, sphere_sdf
from sdfgraph.errors import EmptyMap
from sdfgraph.esdf import EXTRAPOLATED, MEASURED, compute_esdf, esdf_brute_force
from sdfgraph.voxel_grid import TSDF, VoxelGrid

R = 0.1
TRUNC = 0.3
NEIGHBOURS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)
                       if (i, j, k) != (0, 0, 0)])


def band_only(d):
    return np.abs(d) < TRUNC


def esdf_values(esdf, idx):
    d, w, found = esdf.lookup(idx)
    return d, found & (w > 0)


def test_plane_distance():
    g = sdf_grid(plane_sdf((1, 0, 0), 1.0), R, (0, 0, 0), (3.2, 1.6, 1.6), TRUNC, band_only)
    e = compute_esdf(g, max_distance=2.0)
    d, ok = esdf_values(e, np.array([[20, 5, 5]]))   # center x = 2.05
    assert ok[0] and d[0] == pytest.approx(1.05, abs=R)
    ref, _ = esdf_values(esdf_brute_force(g), np.array([[20, 5, 5]]))
    assert abs(d[0] - ref[0]) <= R


def test_all_unobserved_raises():
    g = VoxelGrid(R, TSDF, default_distance=TRUNC)
    g.allocate_block((0, 0, 0))
    with pytest.raises(EmptyMap):
        compute_esdf(g)
    with pytest.raises(EmptyMap):
        esdf_brute_force(g)


def test_band_voxels_copy_tsdf():
    g = sdf_grid(sphere_sdf((0.8, 0.8, 0.8), 0.5), R, (0, 0, 0), (1.6, 1.6, 1.6), TRUNC,
                 band_only)
    e = compute_esdf(g)
    idx, d, _ = g.observed_voxels()
    band = np.abs(d) < TRUNC
    ed, ok = esdf_values(e, idx[band])
    assert ok.all()
    np.testing.assert_array_equal(ed, d[band])
    # sign agreement everywhere the TSDF is observed
    ed_all, ok_all = esdf_values(e, idx)
    assert np.all(np.sign(ed_all[ok_all]) == np.sign(d[ok_all]))


def test_max_distance_limits_propagation():
    g = sdf_grid(plane_sdf((1, 0, 0), 0.5), R, (0, 0, 0), (3.2, 1.6, 1.6), TRUNC, band_only)
    e = compute_esdf(g, max_distance=1.0)
    idx, d, w = e.observed_voxels()
    assert np.all(np.abs(d) <= 1.0 + R)
    far = np.array([[28, 5, 5]])  # 2.35 m from the plane
    assert not esdf_values(e, far)[1][0]


def test_measured_and_extrapolated_weights():
    g = sdf_grid(plane_sdf((1, 0, 0), 0.5), R, (0, 0, 0), (3.2, 1.6, 1.6), TRUNC, band_only)
    e = compute_esdf(g)
    idx, _, w = e.observed_voxels()
    _, tw, _ = g.lookup(idx)
    np.testing.assert_array_equal(w, np.where(tw > 0, MEASURED, EXTRAPOLATED))


class TestBruteForce:
    def test_sphere_center(self):
        c = np.array([0.85, 0.85, 0.85])  # a voxel center
        g = sdf_grid(sphere_sdf(c, 1.0), R, (-0.6, -0.6, -0.6), (2.3, 2.3, 2.3), TRUNC)
        d, ok = esdf_values(esdf_brute_force(g), np.array([[8, 8, 8]]))
        assert ok[0] and d[0] == pytest.approx(-1.0, abs=0.05)

    def test_plane_matches_analytic(self):
        fn = plane_sdf((1, 2, 0.5), 1.3)
        g = sdf_grid(fn, R, (0, 0, 0), (1.6, 1.6, 1.6), TRUNC)
        e = esdf_brute_force(g)
        idx, d, _ = e.observed_voxels()
        c = (idx + 0.5) * R
        n = np.array([1, 2, 0.5]) / np.linalg.norm([1, 2, 0.5])
        # the grid holds no surface beyond its faces, so only compare voxels
        # whose nearest plane point lies inside it
        foot = c - fn(c)[:, None] * n
        inside = np.all((foot > R) & (foot < 1.6 - R), axis=1)
        assert inside.sum() > 1000
        np.testing.assert_allclose(d[inside], fn(c[inside]), atol=0.5 * R)

    def test_single_site(self):
        g = VoxelGrid(R, TSDF, default_distance=TRUNC)
        g.allocate_block((0, 0, 0))
        g.set_voxels([[3, 4, 5]], 0.0, 1.0)
        e = esdf_brute_force(g)
        idx, d, _ = e.observed_voxels()
        assert len(idx) == 16**3
        np.testing.assert_allclose(d, np.linalg.norm((idx - [3, 4, 5]) * R, axis=1),
                                   atol=1e-12)


def random_case(seed):
    """Random plane or sphere TSDF with the analytic SDF gradient."""
    rng = np.random.default_rng(seed)
    L = 3.2
    if rng.random() < 0.5:
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        fn = plane_sdf(n, n @ np.full(3, L / 2) + rng.uniform(-0.5, 0.5))
        grad = lambda p: np.broadcast_to(n, p.shape)
    else:
        c = rng.uniform(1.2, 2.0, 3)
        fn = sphere_sdf(c, rng.uniform(0.4, 1.0))
        grad = lambda p: (p - c) / np.linalg.norm(p - c, axis=1)[:, None]
    return sdf_grid(fn, R, (0, 0, 0), (L, L, L), TRUNC, band_only), fn, grad


def interior_foot(idx, fn, grad, L=3.2):
    """Voxels whose nearest surface point lies at least a voxel inside the grid."""
    c = (idx + 0.5) * R
    foot = c - fn(c)[:, None] * grad(c)
    return np.all((foot > R) & (foot < L - R), axis=1)


@given(st.integers(0, 2**31 - 1))
def test_discrete_eikonal(seed):
    e = compute_esdf(random_case(seed)[0], max_distance=1.5)
    idx, d, _ = e.observed_voxels()
    for step in NEIGHBOURS:
        nd, ok = esdf_values(e, idx + step)
        gap = np.abs(d[ok] - nd[ok])
        assert np.all(gap <= np.linalg.norm(step) * R + 1e-9)


@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1))
def test_oracle_agreement_small(seed):
    g, fn, grad = random_case(seed)
    e = compute_esdf(g, max_distance=1.0)
    ref = esdf_brute_force(g)
    idx, d, _ = e.observed_voxels()
    rd, rok = esdf_values(ref, idx)
    assert rok.all()
    keep = interior_foot(idx, fn, grad)
    assert np.max(np.abs(d - rd)[keep]) <= R
