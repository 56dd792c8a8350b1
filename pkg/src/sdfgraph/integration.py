"""Projective TSDF fusion of pointclouds by ray casting into a voxel grid."""

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .transforms import transform_points
from .voxel_grid import TSDF, VoxelGrid, allocate_block

CONSTANT = "constant"
INVERSE_SQUARE = "inverse-square"


@dataclass
class PointcloudFrame:
    timestamp: float
    points: np.ndarray  # (M, 3) in the sensor frame C
    odometry_pose: np.ndarray  # T_OC, 4x4


@dataclass
class IntegrationConfig:
    truncation_distance: float
    max_weight: float = 1e4
    min_range: float = 0.0
    max_range: float = math.inf
    weighting: str = CONSTANT

    @classmethod
    def for_voxel_size(cls, voxel_size, **kwargs):
        kwargs.setdefault("truncation_distance", 4.0 * voxel_size)
        return cls(**kwargs)

    def validate(self, voxel_size):
        if self.truncation_distance < 2.0 * voxel_size - 1e-12:
            raise ValueError("truncation_distance must be at least 2 voxels")
        if self.max_weight <= 0:
            raise ValueError("max_weight must be positive")
        if self.weighting not in (CONSTANT, INVERSE_SQUARE):
            raise ValueError(f"unknown weighting mode {self.weighting!r}")
        if self.min_range < 0 or self.max_range <= self.min_range:
            raise ValueError("invalid range limits")


def new_tsdf(voxel_size, cfg, block_size=16):
    return VoxelGrid(voxel_size, TSDF, block_size, default_distance=cfg.truncation_distance)


@njit(cache=True)
def _integrate_rays(keys, vals, coords, dist, weight, counter, shift, default_distance,
                    voxel_size, origin, endpoints, ranges, obs_weights, trunc,
                    max_weight, start):
    """Walk rays [start, M) through the grid and fuse projective distances.

    Returns (next_ray, n_updates).  ``next_ray < M`` means the block store
    ran out of room before that ray; it was left untouched.
    """
    bsize = 1 << shift
    bmask = bsize - 1
    capacity = coords.shape[0]
    n_updates = 0
    ox, oy, oz = origin[0], origin[1], origin[2]
    o = np.empty(3)
    o[0], o[1], o[2] = ox, oy, oz
    v = np.empty(3, dtype=np.int64)
    step = np.empty(3, dtype=np.int64)
    tmax = np.empty(3)
    tdelta = np.empty(3)
    direction = np.empty(3)
    for i in range(start, endpoints.shape[0]):
        rng = ranges[i]
        length = rng + trunc
        bound = 3 * (int(length / (voxel_size * bsize)) + 2) + 1
        if counter[0] + bound > capacity:
            return i, n_updates
        for a in range(3):
            direction[a] = (endpoints[i, a] - o[a]) / rng
            v[a] = np.int64(math.floor(o[a] / voxel_size))
            if direction[a] > 0.0:
                step[a] = 1
                tmax[a] = ((v[a] + 1) * voxel_size - o[a]) / direction[a]
                tdelta[a] = voxel_size / direction[a]
            elif direction[a] < 0.0:
                step[a] = -1
                tmax[a] = (v[a] * voxel_size - o[a]) / direction[a]
                tdelta[a] = -voxel_size / direction[a]
            else:
                step[a] = 0
                tmax[a] = np.inf
                tdelta[a] = np.inf
        w_obs = obs_weights[i]
        last_bx = np.int64(1) << 40
        last_by = last_bx
        last_bz = last_bx
        slot = -1
        while True:
            cx = (v[0] + 0.5) * voxel_size - ox
            cy = (v[1] + 0.5) * voxel_size - oy
            cz = (v[2] + 0.5) * voxel_size - oz
            d_obs = rng - (cx * direction[0] + cy * direction[1] + cz * direction[2])
            if d_obs >= -trunc:
                if d_obs > trunc:
                    d_obs = trunc
                bx, by, bz = v[0] >> shift, v[1] >> shift, v[2] >> shift
                if bx != last_bx or by != last_by or bz != last_bz:
                    slot = allocate_block(keys, vals, coords, dist, weight, counter,
                                          bx, by, bz, default_distance)
                    last_bx, last_by, last_bz = bx, by, bz
                lin = (v[0] & bmask) + bsize * ((v[1] & bmask) + bsize * (v[2] & bmask))
                w_old = weight[slot, lin]
                w_sum = w_old + w_obs
                dist[slot, lin] = (w_old * dist[slot, lin] + w_obs * d_obs) / w_sum
                weight[slot, lin] = w_sum if w_sum < max_weight else max_weight
                n_updates += 1
            a = 0
            if tmax[1] < tmax[a]:
                a = 1
            if tmax[2] < tmax[a]:
                a = 2
            if tmax[a] > length:
                break
            v[a] += step[a]
            tmax[a] += tdelta[a]
    return endpoints.shape[0], n_updates


def integrate_frame(tsdf, frame, T_SC, cfg):
    """Fuse one pointcloud into ``tsdf`` with the sensor at pose ``T_SC``.

    Every voxel a ray traverses from the sensor origin up to
    ``truncation_distance`` behind its endpoint receives the projective
    distance (clamped to +-truncation) as a weighted-mean update.

    Returns:
        Number of voxel updates performed (0 if no point survives filtering).
    """
    tsdf.check_writable()
    cfg.validate(tsdf.voxel_size)
    pts = np.asarray(frame.points, dtype=float).reshape(-1, 3)
    ranges = np.linalg.norm(pts, axis=1)
    keep = np.isfinite(pts).all(axis=1) & (ranges >= cfg.min_range) & (ranges <= cfg.max_range) & (ranges > 0)
    if not keep.any():
        return 0
    pts, ranges = pts[keep], ranges[keep]
    endpoints = np.ascontiguousarray(transform_points(T_SC, pts))
    origin = np.ascontiguousarray(np.asarray(T_SC, dtype=float)[:3, 3])
    if cfg.weighting == INVERSE_SQUARE:
        obs_w = 1.0 / ranges**2
    else:
        obs_w = np.ones_like(ranges)

    start, total = 0, 0
    while True:
        keys, vals, coords, dist, weight, counter = tsdf.writable_args()
        nxt, count = _integrate_rays(keys, vals, coords, dist, weight, counter,
                                     tsdf.block_shift, tsdf.default_distance,
                                     tsdf.voxel_size, origin, endpoints, ranges, obs_w,
                                     float(cfg.truncation_distance), float(cfg.max_weight),
                                     start)
        total += int(count)
        if nxt >= len(endpoints):
            return total
        tsdf.grow()
        start = nxt
