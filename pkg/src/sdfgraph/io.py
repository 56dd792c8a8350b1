"""Dataset directories and mapper configuration files.

Dataset layout::

    frames/000000.bin    uint32 count, then count x 3 float32 xyz (sensor frame)
    odometry.csv         timestamp, tx, ty, tz, qw, qx, qy, qz   (T_OC)
    loop_closures.csv    t_l, t_k, tx, ty, tz, qw, qx, qy, qz    (optional)
    ground_truth.csv     timestamp, tx, ty, tz, qw, qx, qy, qz   (optional, T_WC)
    scenario.yaml        (optional, simulator input)

All binary data is little-endian.
"""

import csv
import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .integration import CONSTANT, IntegrationConfig, PointcloudFrame
from .pose_graph import DEFAULT_ODOMETRY_SIGMAS, WEIGHTED, BackendConfig
from .transforms import row_to_transform, transform_to_row

POSE_HEADER = ["timestamp", "tx", "ty", "tz", "qw", "qx", "qy", "qz"]
LOOP_HEADER = ["t_l", "t_k", "tx", "ty", "tz", "qw", "qx", "qy", "qz"]


# --------------------------------------------------------------------------
# frames and CSVs

def write_frame(path, points):
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(np.array([len(pts)], dtype="<u4").tobytes())
        fh.write(pts.tobytes())


def read_frame(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise ValueError(f"{path}: truncated frame header")
    n = int(np.frombuffer(data[:4], dtype="<u4")[0])
    if len(data) != 4 + 12 * n:
        raise ValueError(f"{path}: expected {n} points, file size {len(data)}")
    return np.frombuffer(data[4:], dtype="<f4").reshape(n, 3).astype(np.float64)


def write_pose_csv(path, timestamps, poses):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(POSE_HEADER)
        for t, T in zip(timestamps, poses):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in transform_to_row(T)])


def _numeric_rows(path, width):
    rows = []
    with open(path, newline="") as fh:
        for k, r in enumerate(csv.reader(fh)):
            if not r or r[0].strip().startswith("#"):
                continue
            try:
                vals = [float(v) for v in r]
            except ValueError:
                if k == 0:
                    continue  # header
                raise ValueError(f"{path}:{k + 1}: non-numeric row")
            if len(vals) != width:
                raise ValueError(f"{path}:{k + 1}: expected {width} columns, got {len(vals)}")
            rows.append(vals)
    return np.array(rows).reshape(-1, width)


def read_pose_csv(path):
    """(timestamps, list of 4x4 poses) from a timestamp/translation/quaternion CSV."""
    data = _numeric_rows(path, 8)
    return data[:, 0], [row_to_transform(r[1:]) for r in data]


def write_loop_csv(path, loops):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOOP_HEADER)
        for t_l, t_k, T in loops:
            w.writerow([repr(float(t_l)), repr(float(t_k))]
                       + [repr(float(v)) for v in transform_to_row(T)])


def read_loop_csv(path):
    data = _numeric_rows(path, 9)
    return [(r[0], r[1], row_to_transform(r[2:])) for r in data]


# --------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    path: str
    timestamps: np.ndarray
    odometry: list
    loop_closures: list = field(default_factory=list)
    ground_truth: tuple = None
    scenario: dict = None

    def __len__(self):
        return len(self.timestamps)

    def frame_path(self, k):
        return os.path.join(self.path, "frames", f"{k:06d}.bin")

    def frame(self, k):
        return PointcloudFrame(float(self.timestamps[k]), read_frame(self.frame_path(k)),
                               self.odometry[k])

    def frames(self):
        for k in range(len(self)):
            yield self.frame(k)

    @property
    def frame_period(self):
        return float(np.median(np.diff(self.timestamps))) if len(self) > 1 else 1.0


def write_dataset(directory, frames, ground_truth=None, loop_closures=None, scenario=None):
    """Write frames (with their odometry poses) and optional extras."""
    os.makedirs(os.path.join(directory, "frames"), exist_ok=True)
    for k, f in enumerate(frames):
        write_frame(os.path.join(directory, "frames", f"{k:06d}.bin"), f.points)
    write_pose_csv(os.path.join(directory, "odometry.csv"), [f.timestamp for f in frames],
                   [f.odometry_pose for f in frames])
    if ground_truth is not None:
        write_pose_csv(os.path.join(directory, "ground_truth.csv"), *ground_truth)
    if loop_closures:
        write_loop_csv(os.path.join(directory, "loop_closures.csv"), loop_closures)
    if scenario is not None:
        with open(os.path.join(directory, "scenario.yaml"), "w") as fh:
            yaml.safe_dump(scenario, fh, sort_keys=False)


def read_dataset(directory):
    """Parse a dataset directory; frames are read lazily.

    Raises:
        ValueError: on missing or malformed files.
    """
    odo_path = os.path.join(directory, "odometry.csv")
    if not os.path.isfile(odo_path):
        raise ValueError(f"{directory}: missing odometry.csv")
    t, odo = read_pose_csv(odo_path)
    if np.any(np.diff(t) <= 0):
        raise ValueError(f"{odo_path}: timestamps must increase strictly")
    for k in range(len(t)):
        p = os.path.join(directory, "frames", f"{k:06d}.bin")
        if not os.path.isfile(p):
            raise ValueError(f"{directory}: missing frame file {p}")
    ds = Dataset(directory, t, odo)
    lc = os.path.join(directory, "loop_closures.csv")
    if os.path.isfile(lc):
        ds.loop_closures = read_loop_csv(lc)
    gt = os.path.join(directory, "ground_truth.csv")
    if os.path.isfile(gt):
        ds.ground_truth = read_pose_csv(gt)
    sc = os.path.join(directory, "scenario.yaml")
    if os.path.isfile(sc):
        with open(sc) as fh:
            ds.scenario = yaml.safe_load(fh)
    return ds


# --------------------------------------------------------------------------
# configuration

@dataclass
class MapperConfig:
    """Every mapper setting with its default.

    voxel_size: voxel edge length in meters.
    truncation_distance: TSDF band half-width; None means 4 voxels.
    max_weight, min_range, max_range, weighting: integration settings.
    frames_per_submap: frames fused into each submap.
    esdf_max_distance: propagation limit of each submap ESDF.
    block_size: voxels per block side.
    alpha, strategy, sigma_r: registration subsampling and weight.
    odometry_sigmas, loop_sigmas: diagonal standard deviations (x, y, z,
        roll, pitch, yaw); loop_sigmas None means twice the odometry ones.
    overlap_margin: AABB gap tolerance; None means one truncation distance.
    max_iterations, epsilon, epsilon_q, window: solver limits.
    loop_tolerance: timestamp match tolerance; None means half a frame period.
    use_registration: include SDF registration terms.
    seed: drives every random draw.
    """

    voxel_size: float = 0.2
    truncation_distance: float = None
    max_weight: float = 1e4
    min_range: float = 0.0
    max_range: float = float("inf")
    weighting: str = CONSTANT
    frames_per_submap: int = 20
    esdf_max_distance: float = 2.0
    block_size: int = 16
    alpha: float = 0.05
    strategy: str = WEIGHTED
    sigma_r: float = 1.0
    odometry_sigmas: tuple = DEFAULT_ODOMETRY_SIGMAS
    loop_sigmas: tuple = None
    overlap_margin: float = None
    max_iterations: int = 30
    epsilon: float = 1e-4
    epsilon_q: float = 1e-6
    window: int = 5
    loop_tolerance: float = None
    use_registration: bool = True
    seed: int = 0

    @property
    def truncation(self):
        return self.truncation_distance if self.truncation_distance else 4.0 * self.voxel_size

    @property
    def margin(self):
        return self.truncation if self.overlap_margin is None else self.overlap_margin

    def integration(self):
        return IntegrationConfig(self.truncation, self.max_weight, self.min_range,
                                 self.max_range, self.weighting)

    def backend(self):
        return BackendConfig(alpha=self.alpha, strategy=self.strategy, sigma_r=self.sigma_r,
                             odometry_sigmas=tuple(self.odometry_sigmas),
                             loop_sigmas=None if self.loop_sigmas is None else tuple(self.loop_sigmas),
                             overlap_margin=self.margin, use_registration=self.use_registration,
                             max_iterations=self.max_iterations, epsilon=self.epsilon,
                             epsilon_q=self.epsilon_q, window=self.window,
                             loop_tolerance=self.loop_tolerance, seed=self.seed)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["odometry_sigmas"] = list(d["odometry_sigmas"])
        if d["loop_sigmas"] is not None:
            d["loop_sigmas"] = list(d["loop_sigmas"])
        if d["max_range"] == float("inf"):
            d["max_range"] = None
        return d


def config_from_dict(d):
    d = dict(d or {})
    known = {f.name for f in dataclasses.fields(MapperConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if d.get("max_range", 0) is None:
        d["max_range"] = float("inf")
    for k in ("odometry_sigmas", "loop_sigmas"):
        if d.get(k) is not None:
            d[k] = tuple(float(v) for v in d[k])
            if len(d[k]) != 6:
                raise ValueError(f"{k} needs 6 entries")
    cfg = MapperConfig(**d)
    cfg.integration().validate(cfg.voxel_size)
    cfg.backend().validate()
    return cfg


def load_config(path=None):
    """MapperConfig from a YAML file; None gives all defaults."""
    if path is None:
        return MapperConfig()
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is not None and not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return config_from_dict(data)


def save_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
