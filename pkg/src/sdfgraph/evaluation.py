"""Map fusion, reconstruction error against ground truth and trajectory ATE."""

import csv
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import EmptyCollection, InsufficientCorrespondences
from .transforms import (inverse, make_transform, pose_to_matrix, row_to_transform,
                         transform_to_row, yaw_matrix)
from .voxel_grid import TSDF, VoxelGrid, allocate_block, trilinear_partial

DEFAULT_MIN_COVERAGE = 0.5


# --------------------------------------------------------------------------
# trajectories

@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: np.ndarray  # (n, 4, 4)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.poses = np.asarray(self.poses, dtype=float).reshape(-1, 4, 4)

    def __len__(self):
        return len(self.timestamps)

    @property
    def positions(self):
        return self.poses[:, :3, 3]

    @classmethod
    def from_collection(cls, collection, poses=None):
        """Sensor trajectory T_WS^i T_SiC over every pose-history entry."""
        ts, Ts = [], []
        for sm in collection:
            T_WS = sm.T_WS if poses is None else pose_to_matrix(poses[sm.id])
            for t, T_SC in sm.pose_history:
                ts.append(t)
                Ts.append(T_WS @ T_SC)
        return cls(np.array(ts), np.array(Ts))

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp", "tx", "ty", "tz", "qw", "qx", "qy", "qz"])
            for t, T in zip(self.timestamps, self.poses):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in transform_to_row(T)])

    @classmethod
    def load_csv(cls, path):
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith(("#", "timestamp"))]
        if not rows:
            return cls(np.zeros(0), np.zeros((0, 4, 4)))
        data = np.array([[float(v) for v in r[:8]] for r in rows])
        return cls(data[:, 0], np.array([row_to_transform(r[1:]) for r in data]))


def associate(est, ref, tolerance):
    """Index pairs (i_est, i_ref) matching each estimate to the nearest
    reference timestamp within ``tolerance``."""
    if len(ref) == 0 or len(est) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    order = np.argsort(ref.timestamps)
    rt = ref.timestamps[order]
    pos = np.clip(np.searchsorted(rt, est.timestamps), 1, max(len(rt) - 1, 1))
    left = np.clip(pos - 1, 0, len(rt) - 1)
    right = np.clip(pos, 0, len(rt) - 1)
    pick = np.where(np.abs(rt[left] - est.timestamps) <= np.abs(rt[right] - est.timestamps),
                    left, right)
    ok = np.abs(rt[pick] - est.timestamps) <= tolerance
    return np.stack([np.nonzero(ok)[0], order[pick[ok]]], axis=1)


def align_4dof(p_est, p_ref):
    """Yaw + translation minimizing sum |R p_est + t - p_ref|^2."""
    me, mr = p_est.mean(axis=0), p_ref.mean(axis=0)
    a, b = p_est - me, p_ref - mr
    yaw = math.atan2(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]),
                     np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
    R = yaw_matrix(yaw)
    return make_transform(R, mr - R @ me)


def align_6dof(p_est, p_ref):
    """Rotation + translation (no scale) minimizing sum |R p_est + t - p_ref|^2."""
    me, mr = p_est.mean(axis=0), p_ref.mean(axis=0)
    U, _, Vt = np.linalg.svd((p_est - me).T @ (p_ref - mr))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return make_transform(R, mr - R @ me)


def ate(est, ref, dof=4, tolerance=None):
    """Aligned position errors.

    Returns:
        dict with ``rmse``, per-sample ``errors``, ``alignment`` (4x4 applied
        to the estimate), ``pairs`` and ``timestamps``.
    """
    if dof not in (4, 6):
        raise ValueError("dof must be 4 or 6")
    if tolerance is None:
        dt = np.diff(np.sort(ref.timestamps))
        tolerance = 0.5 * float(np.median(dt)) if len(dt) else 0.0
    pairs = associate(est, ref, tolerance)
    if len(pairs) < 3:
        raise InsufficientCorrespondences(f"{len(pairs)} correspondences, need 3")
    pe = est.positions[pairs[:, 0]]
    pr = ref.positions[pairs[:, 1]]
    A = align_4dof(pe, pr) if dof == 4 else align_6dof(pe, pr)
    err = np.linalg.norm(pe @ A[:3, :3].T + A[:3, 3] - pr, axis=1)
    return {"rmse": float(np.sqrt(np.mean(err**2))), "errors": err, "alignment": A,
            "pairs": pairs, "timestamps": est.timestamps[pairs[:, 0]],
            "est": pe @ A[:3, :3].T + A[:3, 3], "ref": pr}


def ate_rmse(est, ref, dof=4, tolerance=None):
    """RMSE of positions after closed-form alignment of ``est`` onto ``ref``."""
    return ate(est, ref, dof, tolerance)["rmse"]


def final_position_error(est, ref, tolerance=None):
    """Distance between the last associated positions, without alignment."""
    if tolerance is None:
        dt = np.diff(np.sort(ref.timestamps))
        tolerance = 0.5 * float(np.median(dt)) if len(dt) else 0.0
    pairs = associate(est, ref, tolerance)
    if len(pairs) == 0:
        raise InsufficientCorrespondences("no associated samples")
    i, j = pairs[np.argmax(est.timestamps[pairs[:, 0]])]
    return float(np.linalg.norm(est.positions[i] - ref.positions[j]))


def write_ate_csv(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "est_x", "est_y", "est_z", "ref_x", "ref_y", "ref_z", "error"])
        for t, e, r, d in zip(result["timestamps"], result["est"], result["ref"],
                              result["errors"]):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in (*e, *r, d)])


# --------------------------------------------------------------------------
# fusion

@njit(cache=True)
def _fuse_blocks(s_keys, s_vals, s_dist, s_weight, shift, r_src, src_coords, T_WS, T_SW,
                 keys, vals, coords, dist, weight, counter, r_t, min_cov, start):
    """Resample source cells block by block into the accumulating target.

    Every target voxel center is assigned to the source block owning the
    lower corner of its interpolation cell, so no voxel is counted twice.
    Target ``dist`` accumulates weight * distance, ``weight`` the weights.
    Returns the block index to resume from when the target ran out of room.
    """
    B = 1 << shift
    bmask = B - 1
    capacity = coords.shape[0]
    cache = np.full(4, -2, dtype=np.int64)
    out = np.empty(2)
    lo = np.empty(3)
    hi = np.empty(3)
    for b in range(start, src_coords.shape[0]):
        for a in range(3):
            lo[a] = np.inf
            hi[a] = -np.inf
        for c in range(8):
            cs = np.empty(3)
            for a in range(3):
                k = src_coords[b, a] + ((c >> a) & 1)
                cs[a] = (k * B + 0.5) * r_src
            for a in range(3):
                w = T_WS[a, 3] + T_WS[a, 0] * cs[0] + T_WS[a, 1] * cs[1] + T_WS[a, 2] * cs[2]
                lo[a] = min(lo[a], w)
                hi[a] = max(hi[a], w)
        i0 = np.empty(3, dtype=np.int64)
        i1 = np.empty(3, dtype=np.int64)
        bound = 1
        for a in range(3):
            i0[a] = np.int64(math.ceil(lo[a] / r_t - 0.5))
            i1[a] = np.int64(math.floor(hi[a] / r_t - 0.5))
            bound *= (i1[a] - i0[a] + 1) // B + 2
        if counter[0] + bound > capacity:
            return b
        last = np.array([1 << 40, 0, 0], dtype=np.int64)
        slot = -1
        # x innermost to follow the x-fastest voxel layout
        for vz in range(i0[2], i1[2] + 1):
            cz = (vz + 0.5) * r_t
            for vy in range(i0[1], i1[1] + 1):
                cy = (vy + 0.5) * r_t
                for vx in range(i0[0], i1[0] + 1):
                    cx = (vx + 0.5) * r_t
                    sx = T_SW[0, 3] + T_SW[0, 0] * cx + T_SW[0, 1] * cy + T_SW[0, 2] * cz
                    sy = T_SW[1, 3] + T_SW[1, 0] * cx + T_SW[1, 1] * cy + T_SW[1, 2] * cz
                    sz = T_SW[2, 3] + T_SW[2, 0] * cx + T_SW[2, 1] * cy + T_SW[2, 2] * cz
                    ox = np.int64(math.floor(sx / r_src - 0.5)) >> shift
                    oy = np.int64(math.floor(sy / r_src - 0.5)) >> shift
                    oz = np.int64(math.floor(sz / r_src - 0.5)) >> shift
                    if ox != src_coords[b, 0] or oy != src_coords[b, 1] or oz != src_coords[b, 2]:
                        continue
                    if not trilinear_partial(s_keys, s_vals, s_dist, s_weight, shift, r_src,
                                             sx, sy, sz, cache, min_cov, out):
                        continue
                    bx, by, bz = vx >> shift, vy >> shift, vz >> shift
                    if bx != last[0] or by != last[1] or bz != last[2]:
                        slot = allocate_block(keys, vals, coords, dist, weight, counter,
                                              bx, by, bz, 0.0)
                        last[0], last[1], last[2] = bx, by, bz
                    lin = (vx & bmask) + B * ((vy & bmask) + B * (vz & bmask))
                    dist[slot, lin] += out[1] * out[0]
                    weight[slot, lin] += out[1]
    return src_coords.shape[0]


def fuse_global_map(collection, voxel_size=None, poses=None, min_coverage=DEFAULT_MIN_COVERAGE):
    """Weighted-mean fusion of all frozen submap TSDFs into one world-frame grid.

    Each submap is resampled at target voxel centers by trilinear lookup
    (renormalised over observed corners, needing ``min_coverage``).

    Raises:
        EmptyCollection: no frozen submaps.
    """
    subs = [s for s in collection if s.frozen]
    if not subs:
        raise EmptyCollection("no frozen submaps to fuse")
    r_t = float(voxel_size or subs[0].voxel_size)
    B = subs[0].tsdf.block_size
    trunc = subs[0].integration.truncation_distance
    out = VoxelGrid(r_t, TSDF, B, default_distance=0.0,
                    initial_blocks=max(64, sum(s.tsdf.num_blocks for s in subs) // 2))
    for sm in subs:
        if sm.tsdf.num_blocks == 0:
            continue
        T_WS = sm.T_WS if poses is None else pose_to_matrix(poses[sm.id])
        T_SW = inverse(T_WS)
        s_args = sm.tsdf.kernel_args()
        src_coords = sm.tsdf.block_indices()
        start = 0
        while start < len(src_coords):
            keys, vals, coords, dist, weight, counter = out.writable_args()
            start = _fuse_blocks(*s_args[:4], s_args[4], sm.voxel_size, src_coords, T_WS, T_SW,
                                 keys, vals, coords, dist, weight, counter, r_t,
                                 float(min_coverage), start)
            if start < len(src_coords):
                out.grow()
    n = out.num_blocks
    _, _, _, dist, weight, _ = out.writable_args()
    w = weight[:n]
    d = dist[:n]
    seen = w > 0
    d[seen] /= w[seen]
    d[~seen] = trunc
    out.default_distance = trunc
    out.freeze()
    return out


# --------------------------------------------------------------------------
# reconstruction error

def reconstruction_error(fused, world, exclude_ground=True, truncation=None):
    """RMSE between fused distances and the ground-truth SDF at observed voxels.

    With ``truncation`` the ground truth is clamped to the same band as the
    fused TSDF.  With ``exclude_ground`` voxels whose nearest primitive is a
    ground plane are left out.

    Returns:
        dict(rmse, count, l2) where ``l2`` is the root of the unnormalized sum.
    """
    idx, d, _ = fused.observed_voxels()
    if len(idx) == 0:
        raise EmptyCollection("fused map has no observed voxels")
    centers = (idx + 0.5) * fused.voxel_size
    gt, _, which = world.sdf(centers)
    if truncation is not None:
        gt = np.clip(gt, -truncation, truncation)
    keep = ~world.ground_mask(which) if exclude_ground else np.ones(len(d), dtype=bool)
    if not keep.any():
        raise EmptyCollection("no voxels left after ground exclusion")
    diff = d[keep] - gt[keep]
    sq = float(np.sum(diff**2))
    return {"rmse": math.sqrt(sq / len(diff)), "count": int(len(diff)), "l2": math.sqrt(sq)}


def segment_errors(result, trajectory_ids):
    """Mean aligned error per segment label (e.g. submap id per sample)."""
    labels = np.asarray(trajectory_ids)[result["pairs"][:, 0]]
    return {int(k): float(np.mean(result["errors"][labels == k])) for k in np.unique(labels)}
