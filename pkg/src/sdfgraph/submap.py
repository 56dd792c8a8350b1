"""Submaps: fixed-cadence creation, pose histories, freezing and archives."""

import csv
import os
import threading

import numpy as np
import yaml

from .errors import EmptyMap, MissingSubmap, NonMonotonicTimestamp, NoSurface
from .esdf import DEFAULT_MAX_DISTANCE, compute_esdf
from .integration import IntegrationConfig, integrate_frame, new_tsdf
from .surface import (AxisAlignedBoundingBox, IsoSurfacePointSet, OrientedBoundingBox,
                      compute_obb, extract_isosurface, read_ply, write_ply)
from .transforms import (gravity_aligned, inverse, matrix_to_pose, pose_to_matrix,
                         row_to_transform, transform_to_row, wrap_angle)
from .timing import NullTimings
from .voxel_grid import ESDF, VoxelGrid, load_grid, save_grid

DEFAULT_FRAMES_PER_SUBMAP = 20
MIN_FINAL_FRAMES = 3


class Submap:
    """Locally consistent TSDF built from a contiguous run of frames.

    The payload (grids, isosurface, box, pose history) is fixed once the
    submap is frozen; only the world pose ``q = (x, y, z, yaw)`` changes.
    """

    def __init__(self, submap_id, voxel_size, T_SO, integration, block_size=16):
        self.id = int(submap_id)
        self.integration = integration
        self.tsdf = new_tsdf(voxel_size, integration, block_size)
        self.esdf = None
        self.isosurface = None
        self.obb = None
        self.T_SO = np.asarray(T_SO, dtype=float)
        self.pose_history = []
        self.q = np.zeros(4)
        self.frames = []

    @property
    def voxel_size(self):
        return self.tsdf.voxel_size

    @property
    def frozen(self):
        return self.tsdf.frozen

    @property
    def T_WS(self):
        return pose_to_matrix(self.q)

    @property
    def T_OS(self):
        return inverse(self.T_SO)

    def set_pose(self, q):
        q = np.asarray(q, dtype=float).copy()
        q[3] = wrap_angle(q[3])
        self.q = q

    @property
    def timestamps(self):
        return np.array([t for t, _ in self.pose_history])

    def integrate(self, frame, keep_frame=False):
        self.tsdf.check_writable()
        if self.pose_history and frame.timestamp <= self.pose_history[-1][0]:
            raise NonMonotonicTimestamp(f"{frame.timestamp} after {self.pose_history[-1][0]}")
        T_SC = self.T_SO @ frame.odometry_pose
        n = integrate_frame(self.tsdf, frame, T_SC, self.integration)
        self.pose_history.append((float(frame.timestamp), T_SC))
        if keep_frame:
            self.frames.append(frame)
        return n

    def finish(self, esdf_max_distance=DEFAULT_MAX_DISTANCE, timer=None):
        """Freeze the TSDF and derive ESDF, isosurface points and box."""
        timer = timer or NullTimings()
        self.tsdf.freeze()
        trunc = self.integration.truncation_distance
        with timer("esdf"):
            try:
                self.esdf = compute_esdf(self.tsdf, esdf_max_distance, trunc)
            except EmptyMap:
                self.esdf = VoxelGrid(self.voxel_size, ESDF, self.tsdf.block_size)
                self.esdf.freeze()
        with timer("isosurface"):
            try:
                self.isosurface = extract_isosurface(self.tsdf, with_mesh=False)
            except NoSurface:
                self.isosurface = IsoSurfacePointSet(np.zeros((0, 3)), np.zeros(0))
        try:
            self.obb = compute_obb(self.tsdf)
        except EmptyMap:
            self.obb = OrientedBoundingBox(np.zeros(3), np.zeros(3))

    def world_aabb(self, q=None):
        T = self.T_WS if q is None else pose_to_matrix(q)
        return AxisAlignedBoundingBox.from_obb(self.obb, T)

    def nearest_history(self, t):
        """(index, |dt|) of the pose-history entry closest in time to ``t``."""
        ts = self.timestamps
        k = int(np.argmin(np.abs(ts - t)))
        return k, abs(ts[k] - t)

    def world_sensor_poses(self, q=None):
        """T_WC for every pose-history entry, under pose ``q`` (current if None)."""
        T = self.T_WS if q is None else pose_to_matrix(q)
        return [(t, T @ T_SC) for t, T_SC in self.pose_history]

    def __repr__(self):
        state = "frozen" if self.frozen else "active"
        return f"Submap(id={self.id}, frames={len(self.pose_history)}, {state})"


class SubmapCollection:
    """Registry of submaps, cut every ``frames_per_submap`` frames.

    The pose table is published as a whole under a lock so that readers
    always see one consistent batch.
    """

    def __init__(self, voxel_size, frames_per_submap=DEFAULT_FRAMES_PER_SUBMAP,
                 integration=None, esdf_max_distance=DEFAULT_MAX_DISTANCE, block_size=16,
                 min_final_frames=MIN_FINAL_FRAMES):
        if frames_per_submap < 1:
            raise ValueError("frames_per_submap must be positive")
        self.voxel_size = float(voxel_size)
        self.frames_per_submap = int(frames_per_submap)
        self.integration = integration or IntegrationConfig.for_voxel_size(voxel_size)
        self.integration.validate(voxel_size)
        self.esdf_max_distance = float(esdf_max_distance)
        self.block_size = block_size
        self.min_final_frames = min_final_frames
        self.submaps = []
        self.active_id = None
        self.last_timestamp = -np.inf
        self.timer = NullTimings()
        self._lock = threading.Lock()

    def __getstate__(self):
        state = dict(self.__dict__)
        state.pop("_lock")
        state["timer"] = NullTimings()
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.submaps)

    def __getitem__(self, i):
        if not 0 <= i < len(self.submaps):
            raise MissingSubmap(f"no submap {i}")
        return self.submaps[i]

    def __iter__(self):
        return iter(self.submaps)

    @property
    def active(self):
        return None if self.active_id is None else self.submaps[self.active_id]

    def frozen_ids(self):
        return [s.id for s in self.submaps if s.frozen]

    def _new_submap(self):
        sm = Submap(len(self.submaps), self.voxel_size, np.eye(4), self.integration,
                    self.block_size)
        self.submaps.append(sm)
        self.active_id = sm.id
        return sm

    def _anchor(self, sm, frame):
        """Fix S from the first frame: odometry position and yaw, no roll/pitch."""
        T_OS = gravity_aligned(frame.odometry_pose)
        sm.T_SO = inverse(T_OS)
        if sm.id > 0:
            prev = self.submaps[sm.id - 1]
            sm.set_pose(matrix_to_pose(prev.T_WS @ prev.T_SO @ T_OS))
        else:
            sm.set_pose(matrix_to_pose(T_OS))

    def add_frame(self, frame):
        """Integrate ``frame``; return the id of a submap frozen by this call.

        The next submap is opened right away but only anchored by its first
        frame.
        """
        if frame.timestamp <= self.last_timestamp:
            raise NonMonotonicTimestamp(f"{frame.timestamp} after {self.last_timestamp}")
        self.last_timestamp = float(frame.timestamp)
        sm = self.active or self._new_submap()
        if not sm.pose_history:
            self._anchor(sm, frame)
        with self.timer("integration"):
            sm.integrate(frame, keep_frame=True)
        if len(sm.pose_history) < self.frames_per_submap:
            return None
        self._freeze(sm)
        self._new_submap()
        return sm.id

    def _freeze(self, sm):
        sm.finish(self.esdf_max_distance, self.timer)
        # only the newest frozen submap keeps its frames (for a final merge)
        for other in self.submaps[:sm.id]:
            other.frames = []
        self.active_id = None

    def finalize(self):
        """Close the stream.

        A trailing submap with at least ``min_final_frames`` frames is frozen.
        A shorter one is folded into its predecessor, whose payload is rebuilt.
        An opened but still empty submap is dropped.

        Returns:
            Id of the submap frozen or rebuilt by this call, or None.
        """
        sm = self.active
        if sm is None:
            return None
        if not sm.pose_history:
            self.submaps.pop()
            self.active_id = None
            return None
        if len(sm.pose_history) >= self.min_final_frames or sm.id == 0:
            self._freeze(sm)
            return sm.id
        prev = self.submaps[sm.id - 1]
        frames = prev.frames + sm.frames
        rebuilt = Submap(prev.id, self.voxel_size, prev.T_SO, self.integration,
                         self.block_size)
        rebuilt.set_pose(prev.q)
        with self.timer("integration"):
            for f in frames:
                rebuilt.integrate(f, keep_frame=True)
        self.submaps[prev.id] = rebuilt
        self.submaps.pop()
        self._freeze(rebuilt)
        return rebuilt.id

    def relative_odometry(self, i, j=None):
        """T_{S_i S_j} implied by odometry alone (j defaults to i + 1)."""
        j = i + 1 if j is None else j
        a, b = self[i], self[j]
        if not (a.frozen and b.frozen):
            raise MissingSubmap(f"submaps {i} and {j} must both be frozen")
        return a.T_SO @ b.T_OS

    def locate(self, t, tolerance):
        """Frozen submap and pose-history entry nearest in time to ``t``.

        Returns:
            (submap id, history index) or None when no entry is within tolerance.
        """
        best = None
        for sm in self.submaps:
            if not sm.frozen or not sm.pose_history:
                continue
            k, dt = sm.nearest_history(t)
            if dt <= tolerance and (best is None or dt < best[2]):
                best = (sm.id, k, dt)
        return None if best is None else best[:2]

    def pose_snapshot(self):
        with self._lock:
            return {s.id: s.q.copy() for s in self.submaps}

    def publish_poses(self, poses):
        """Write a batch of world poses at once."""
        with self._lock:
            for i, q in poses.items():
                self.submaps[i].set_pose(q)

    def propagate_active_pose(self):
        """Re-seed the active submap's pose from its optimized predecessor."""
        sm = self.active
        if sm is None or sm.id == 0 or not sm.pose_history:
            return
        prev = self.submaps[sm.id - 1]
        with self._lock:
            sm.set_pose(matrix_to_pose(prev.T_WS @ prev.T_SO @ sm.T_OS))


# --------------------------------------------------------------------------
# archives

def _write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "tx", "ty", "tz", "qw", "qx", "qy", "qz"])
        for t, T in history:
            w.writerow([repr(float(t))] + [repr(float(v)) for v in transform_to_row(T)])


def _read_history(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [(float(r[0]), row_to_transform([float(v) for v in r[1:]])) for r in rows]


def save_submap(sm, directory):
    """Write one frozen submap as a directory of grid, mesh, CSV and YAML files."""
    os.makedirs(directory, exist_ok=True)
    save_grid(sm.tsdf, os.path.join(directory, "tsdf.bin"))
    save_grid(sm.esdf, os.path.join(directory, "esdf.bin"))
    write_ply(os.path.join(directory, "isosurface.ply"), sm.isosurface.points,
              quality=sm.isosurface.weights)
    _write_history(os.path.join(directory, "pose_history.csv"), sm.pose_history)
    meta = {
        "id": sm.id,
        "T_WS": [float(v) for v in sm.q],
        "N": len(sm.pose_history),
        "T_SO": [float(v) for v in transform_to_row(sm.T_SO)],
        "truncation_distance": float(sm.integration.truncation_distance),
        "obb_min": [float(v) for v in sm.obb.min_corner],
        "obb_max": [float(v) for v in sm.obb.max_corner],
    }
    with open(os.path.join(directory, "meta.yaml"), "w") as fh:
        yaml.safe_dump(meta, fh, sort_keys=False)


def load_submap(directory):
    with open(os.path.join(directory, "meta.yaml")) as fh:
        meta = yaml.safe_load(fh)
    trunc = meta["truncation_distance"]
    tsdf = load_grid(os.path.join(directory, "tsdf.bin"), default_distance=trunc)
    cfg = IntegrationConfig(truncation_distance=trunc)
    sm = Submap(meta["id"], tsdf.voxel_size, row_to_transform(meta["T_SO"]), cfg,
                tsdf.block_size)
    sm.tsdf = tsdf
    tsdf.freeze()
    sm.esdf = load_grid(os.path.join(directory, "esdf.bin"))
    sm.esdf.freeze()
    pts, _, w = read_ply(os.path.join(directory, "isosurface.ply"))
    sm.isosurface = IsoSurfacePointSet(pts, w if w is not None else np.ones(len(pts)))
    sm.pose_history = _read_history(os.path.join(directory, "pose_history.csv"))
    sm.obb = OrientedBoundingBox(np.array(meta["obb_min"]), np.array(meta["obb_max"]))
    sm.set_pose(meta["T_WS"])
    return sm


def save_collection(coll, directory):
    for sm in coll:
        if sm.frozen:
            save_submap(sm, os.path.join(directory, f"submap_{sm.id:04d}"))


def load_collection(directory):
    """Frozen submaps from ``save_collection`` output, ordered by id."""
    names = sorted(n for n in os.listdir(directory) if n.startswith("submap_"))
    subs = [load_submap(os.path.join(directory, n)) for n in names]
    if not subs:
        raise MissingSubmap(f"no submap archives under {directory}")
    coll = SubmapCollection(subs[0].voxel_size, max(len(s.pose_history) for s in subs),
                            IntegrationConfig(subs[0].integration.truncation_distance))
    coll.submaps = subs
    return coll
