from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import plane_sdf, sdf_grid, sphere_sdf
from sdfgraph.errors import EmptyMap, NoSurface
from sdfgraph.surface import (AxisAlignedBoundingBox, OrientedBoundingBox, aabb_overlap,
                              compute_obb, extract_isosurface, read_ply, write_ply)
from sdfgraph.transforms import make_transform, pose_to_matrix, yaw_matrix
from sdfgraph.voxel_grid import TSDF, VoxelGrid, interpolate_many

R = 0.1
TRUNC = 0.3


def fake_submap(obb, T_WS):
    return SimpleNamespace(world_aabb=lambda: AxisAlignedBoundingBox.from_obb(obb, T_WS))


UNIT = OrientedBoundingBox(np.zeros(3), np.ones(3))


class TestIsosurface:
    def test_plane_is_exact(self):
        g = sdf_grid(plane_sdf((1, 0, 0), 1.05), R, (0, 0, 0), (1.6, 1.6, 1.6), TRUNC)
        iso = extract_isosurface(g)
        assert len(iso) > 100
        np.testing.assert_allclose(iso.points[:, 0], 1.05, atol=1e-6)

    def test_sphere_radius(self):
        g = sdf_grid(sphere_sdf((1.6, 1.6, 1.6), 1.0), R, (0, 0, 0), (3.2, 3.2, 3.2), TRUNC)
        iso = extract_isosurface(g)
        rad = np.linalg.norm(iso.points - 1.6, axis=1)
        assert np.max(np.abs(rad - 1.0)) <= 0.5 * R

    def test_positive_field_has_no_surface(self):
        g = sdf_grid(lambda p: np.full(len(p), 0.2), R, (0, 0, 0), (1.6, 1.6, 1.6), TRUNC)
        with pytest.raises(NoSurface):
            extract_isosurface(g)

    def test_no_duplicates(self):
        g = sdf_grid(sphere_sdf((0.8, 0.8, 0.8), 0.5), R, (0, 0, 0), (1.6, 1.6, 1.6), TRUNC)
        iso = extract_isosurface(g)
        assert len(np.unique(np.round(iso.points, 9), axis=0)) == len(iso)

    def test_weights_interpolate_voxel_weights(self):
        g = VoxelGrid(R, TSDF, default_distance=TRUNC)
        idx = np.stack(np.meshgrid(range(2), range(2), range(2), indexing="ij"),
                       -1).reshape(-1, 3)
        # zero crossing a quarter of the way along x, weights 2 and 6
        g.set_voxels(idx, np.where(idx[:, 0] == 0, -0.025, 0.075),
                     np.where(idx[:, 0] == 0, 2.0, 6.0))
        iso = extract_isosurface(g)
        assert len(iso) == 4
        np.testing.assert_allclose(iso.points[:, 0], 0.075)
        np.testing.assert_allclose(iso.weights, 3.0)

    def test_unobserved_cells_skipped(self):
        g = sdf_grid(plane_sdf((1, 0, 0), 0.8), R, (0, 0, 0), (1.6, 1.6, 1.6), TRUNC,
                     observe=lambda d: np.ones(len(d), bool))
        full = len(extract_isosurface(g))
        idx, d, w = g.observed_voxels()
        half = idx[:, 1] < 8
        g.set_voxels(idx[half], d[half], 0.0)
        assert 0 < len(extract_isosurface(g)) < full

    def test_mesh_export(self, tmp_path):
        g = sdf_grid(sphere_sdf((0.8, 0.8, 0.8), 0.5), R, (0, 0, 0), (1.6, 1.6, 1.6), TRUNC)
        iso = extract_isosurface(g)
        assert len(iso.faces) > 0 and iso.faces.max() < len(iso.mesh_vertices)
        path = tmp_path / "m.ply"
        write_ply(path, iso.points, None, iso.weights)
        v, f, q = read_ply(path)
        np.testing.assert_allclose(v, iso.points, atol=1e-7)
        np.testing.assert_allclose(q, iso.weights, rtol=1e-7)
        assert len(f) == 0


@given(st.integers(0, 2**31 - 1))
def test_points_lie_on_trilinear_zero_level(seed):
    rng = np.random.default_rng(seed)
    fn = sphere_sdf(rng.uniform(0.6, 1.0, 3), rng.uniform(0.2, 0.5))
    noise = rng.normal(scale=0.02, size=4096)
    g = sdf_grid(lambda p: fn(p) + noise[:len(p)], R, (0, 0, 0), (1.6, 1.6, 1.6), TRUNC)
    iso = extract_isosurface(g, with_mesh=False)
    vals, _, _, ok = interpolate_many(g, iso.points)
    assert ok.all()
    assert np.max(np.abs(vals)) <= 0.05 * R


class TestBoxes:
    def test_single_block_obb(self):
        g = VoxelGrid(R, TSDF)
        g.allocate_block((0, 0, 0))
        obb = compute_obb(g)
        np.testing.assert_allclose(obb.min_corner, 0)
        np.testing.assert_allclose(obb.max_corner, 1.6)

    def test_union_of_blocks(self):
        g = VoxelGrid(R, TSDF)
        g.allocate_block((0, 0, 0))
        g.allocate_block((2, 0, 0))
        assert compute_obb(g).max_corner[0] == pytest.approx(4.8)

    def test_no_blocks(self):
        with pytest.raises(EmptyMap):
            compute_obb(VoxelGrid(R, TSDF))

    def test_self_overlap(self):
        a = fake_submap(UNIT, np.eye(4))
        assert aabb_overlap(a, a, 0.0)

    def test_far_apart(self):
        a = fake_submap(UNIT, np.eye(4))
        b = fake_submap(UNIT, make_transform(t=(10, 0, 0)))
        assert not aabb_overlap(a, b, 0.0)

    def test_margin(self):
        # unit cubes 1.3 m apart leave a 0.3 m gap on x
        a = fake_submap(UNIT, np.eye(4))
        b = fake_submap(UNIT, make_transform(t=(1.3, 0, 0)))
        assert not aabb_overlap(a, b, 0.2)
        assert aabb_overlap(a, b, 0.4)

    def test_rotated_box_grows(self):
        aabb = AxisAlignedBoundingBox.from_obb(UNIT, make_transform(yaw_matrix(np.pi / 4)))
        assert aabb.max_corner[0] - aabb.min_corner[0] == pytest.approx(np.sqrt(2))


poses = st.tuples(*[st.floats(-5, 5)] * 3, st.floats(-np.pi, np.pi))
extents = st.tuples(*[st.floats(0.1, 3)] * 3)


@given(poses, extents)
def test_aabb_contains_obb_corners(q, ext):
    obb = OrientedBoundingBox(-np.array(ext) / 2, np.array(ext))
    T = pose_to_matrix(np.array(q))
    aabb = AxisAlignedBoundingBox.from_obb(obb, T)
    corners = (T[:3, :3] @ obb.corners().T).T + T[:3, 3]
    assert aabb.contains(corners)


@given(poses, poses, extents, extents, st.floats(0, 2))
def test_overlap_symmetry(qa, qb, ea, eb, margin):
    a = fake_submap(OrientedBoundingBox(np.zeros(3), np.array(ea)), pose_to_matrix(np.array(qa)))
    b = fake_submap(OrientedBoundingBox(np.zeros(3), np.array(eb)), pose_to_matrix(np.array(qb)))
    assert aabb_overlap(a, b, margin) == aabb_overlap(b, a, margin)
