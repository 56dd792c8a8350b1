"""End-to-end mapping, simulation, evaluation and sweep workflows."""

import csv
import logging
import os
import queue
import threading
import time

import numpy as np
import yaml

from .errors import SameSubmap, SdfGraphError, TimestampOutOfRange
from .evaluation import (Trajectory, ate, final_position_error, fuse_global_map,
                         reconstruction_error, write_ate_csv)
from .io import (load_config, read_dataset, read_pose_csv, save_config, write_dataset)
from .pose_graph import PoseGraph, add_loop_closure, detect_overlaps, optimize
from .sim import SyntheticWorld, load_scenario, scenario_from_dict
from .submap import SubmapCollection, load_collection, save_collection
from .surface import extract_isosurface, write_ply
from .timing import Timings
from .transforms import inverse, matrix_to_pose

log = logging.getLogger("sdfgraph")


def new_collection(cfg, timer=None):
    coll = SubmapCollection(cfg.voxel_size, cfg.frames_per_submap, cfg.integration(),
                            cfg.esdf_max_distance, cfg.block_size)
    if timer is not None:
        coll.timer = timer
    return coll


class BackEnd:
    """Pose graph over frozen submaps, re-optimized after every new submap."""

    def __init__(self, collection, cfg, timer=None, frame_period=0.1):
        self.collection = collection
        self.cfg = cfg
        self.timer = timer or Timings()
        self.graph = PoseGraph(cfg.backend())
        self.loop_tolerance = (cfg.loop_tolerance if cfg.loop_tolerance is not None
                               else 0.5 * frame_period)
        self.pending_loops = []
        self.reports = []
        self.skipped_loops = []

    def add_loop_closures(self, loops):
        self.pending_loops.extend(loops)

    def _ingest_loops(self, final=False):
        keep = []
        for t_l, t_k, T in self.pending_loops:
            a = self.collection.locate(t_l, self.loop_tolerance)
            b = self.collection.locate(t_k, self.loop_tolerance)
            # a replayed collection is fully frozen, so also wait for the nodes
            nodes = self.graph.nodes
            if a is None or b is None or a[0] not in nodes or b[0] not in nodes:
                if final:
                    log.warning("loop closure (%.3f, %.3f) not covered by any submap; skipped",
                                t_l, t_k)
                    self.skipped_loops.append((t_l, t_k))
                else:
                    keep.append((t_l, t_k, T))
                continue
            try:
                add_loop_closure(self.graph, self.collection, t_l, t_k, T, self.loop_tolerance)
            except (SameSubmap, TimestampOutOfRange) as exc:
                log.warning("loop closure (%.3f, %.3f) skipped: %s", t_l, t_k, exc)
                self.skipped_loops.append((t_l, t_k))
        self.pending_loops = keep

    def on_frozen(self, sid, final=False):
        """Add (or refresh) submap ``sid`` and run a global optimization."""
        sm = self.collection[sid]
        if sid not in self.graph.nodes:
            self.graph.add_node(sid, sm.q, fixed=not self.graph.nodes)
            if sid > 0 and sid - 1 in self.graph.nodes:
                self.graph.add_odometry(sid - 1, sid, self.collection.relative_odometry(sid - 1))
        self._ingest_loops(final)
        ids = list(self.graph.nodes)
        if self.cfg.use_registration:
            with self.timer("overlap"):
                pairs = detect_overlaps(self.collection, ids, self.cfg.margin)
            self.graph.set_registration_pairs(pairs)
        with self.timer("optimization"):
            rng = np.random.default_rng([self.cfg.seed, len(self.reports)])
            report = optimize(self.graph, self.collection, rng=rng)
        self.reports.append(report)
        self.collection.propagate_active_pose()
        return report

    @property
    def solver_time(self):
        return sum(r.wall_time for r in self.reports)


class Mapper:
    """Streams frames through submap creation and the back-end.

    In sequential mode the back-end runs right after each submap freeze,
    which makes runs bit-for-bit reproducible.  With ``concurrent`` it runs
    in a worker thread and consumes frozen submaps as they appear.
    """

    def __init__(self, cfg, loop_closures=(), frame_period=0.1, timer=None, concurrent=False):
        self.cfg = cfg
        self.timer = timer or Timings()
        self.collection = new_collection(cfg, self.timer)
        self.backend = BackEnd(self.collection, cfg, self.timer, frame_period)
        self.backend.add_loop_closures(list(loop_closures))
        self.concurrent = concurrent
        self._queue = None
        self._worker = None
        self._error = None
        if concurrent:
            self._queue = queue.Queue()
            self._worker = threading.Thread(target=self._run_backend, daemon=True)
            self._worker.start()

    def _run_backend(self):
        while True:
            sid = self._queue.get()
            try:
                if sid is None:
                    return
                # coalesce a burst of frozen submaps into one optimization
                while True:
                    try:
                        nxt = self._queue.get_nowait()
                    except queue.Empty:
                        break
                    self._queue.task_done()
                    if nxt is None:
                        self._add_quiet(sid)
                        return
                    self._add_quiet(sid)
                    sid = nxt
                self.backend.on_frozen(sid)
            except Exception as exc:  # surfaced in finish()
                self._error = exc
            finally:
                self._queue.task_done()

    def _add_quiet(self, sid):
        g = self.backend.graph
        if sid not in g.nodes:
            g.add_node(sid, self.collection[sid].q, fixed=not g.nodes)
            if sid > 0:
                g.add_odometry(sid - 1, sid, self.collection.relative_odometry(sid - 1))

    def process(self, frame):
        sid = self.collection.add_frame(frame)
        if sid is None:
            return None
        if self.concurrent:
            self._queue.put(sid)
        else:
            self.backend.on_frozen(sid)
        return sid

    def finish(self):
        if self.concurrent:
            self._queue.put(None)
            self._worker.join()
            if self._error is not None:
                raise self._error
            self.concurrent = False
        sid = self.collection.finalize()
        if sid is not None:
            self.backend.on_frozen(sid, final=True)
        elif self.backend.pending_loops:
            self.backend._ingest_loops(final=True)
        return self.collection

    def trajectory(self):
        return Trajectory.from_collection(self.collection)


# --------------------------------------------------------------------------
# front-end caching and back-end replay

def build_frontend(frames, cfg, timer=None):
    """Frozen submaps for a frame stream, without any optimization."""
    coll = new_collection(cfg, timer)
    for f in frames:
        coll.add_frame(f)
    coll.finalize()
    return coll


def odometry_poses(collection):
    """Submap poses implied by odometry alone (odometry frame = world)."""
    return {sm.id: matrix_to_pose(sm.T_OS) for sm in collection}


def replay_backend(collection, cfg, loop_closures=(), frame_period=0.1, timer=None):
    """Run the incremental back-end over an already built collection.

    Submap poses are re-seeded in order from the optimized predecessor and
    the relative odometry, as the streaming mapper would have done.
    """
    for sm in collection:
        sm.set_pose(np.zeros(4))
    backend = BackEnd(collection, cfg, timer, frame_period)
    backend.add_loop_closures(list(loop_closures))
    n = len(collection)
    for sid in range(n):
        sm = collection[sid]
        if sid == 0:
            sm.set_pose(matrix_to_pose(sm.T_OS))
        else:
            prev = collection[sid - 1]
            sm.set_pose(matrix_to_pose(prev.T_WS @ prev.T_SO @ sm.T_OS))
        backend.on_frozen(sid, final=sid == n - 1)
    return backend


# --------------------------------------------------------------------------
# workflows

def _write_outputs(out, mapper_or_backend, collection, cfg, timer, extra=None):
    backend = getattr(mapper_or_backend, "backend", mapper_or_backend)
    os.makedirs(out, exist_ok=True)
    with timer("export"):
        save_collection(collection, os.path.join(out, "submaps"))
        backend.graph.dump(os.path.join(out, "pose_graph.txt"), collection)
        Trajectory.from_collection(collection).save_csv(os.path.join(out, "trajectory.csv"))
        save_config(cfg, os.path.join(out, "config.yaml"))
        with open(os.path.join(out, "optimization.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["call", "nodes", "iterations", "initial_cost", "final_cost",
                        "wall_time", "reason"])
            for k, r in enumerate(backend.reports):
                w.writerow([k, r.nodes, r.iterations, repr(r.initial_cost), repr(r.final_cost),
                            f"{r.wall_time:.6f}", r.reason])
    with timer("fusion"):
        fused = fuse_global_map(collection)
        try:
            iso = extract_isosurface(fused, with_mesh=True)
            verts, faces = iso.mesh_vertices, iso.faces
        except SdfGraphError:
            verts, faces = np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    with timer("export"):
        write_ply(os.path.join(out, "mesh.ply"), verts, faces)
        info = {"submaps": len(collection), "seed": cfg.seed}
        info.update(extra or {})
        with open(os.path.join(out, "run_info.yaml"), "w") as fh:
            yaml.safe_dump(info, fh, sort_keys=False)
    return fused


def map_dataset(dataset_path, cfg, output_dir=None, concurrent=False, timer=None):
    """Run the mapper over a dataset directory; returns the Mapper."""
    timer = timer or Timings()
    with timer("io"):
        ds = read_dataset(dataset_path)
    mapper = Mapper(cfg, ds.loop_closures, ds.frame_period, timer, concurrent)
    for k in range(len(ds)):
        with timer("io"):
            frame = ds.frame(k)
        mapper.process(frame)
    mapper.finish()
    if output_dir is not None:
        _write_outputs(output_dir, mapper, mapper.collection, cfg, timer,
                       {"dataset": os.path.abspath(dataset_path),
                        "skipped_loop_closures": len(mapper.backend.skipped_loops)})
        with open(os.path.join(output_dir, "timing.yaml"), "w") as fh:
            yaml.safe_dump(timer.report(), fh, sort_keys=False)
    return mapper


def run_map(dataset_path, config_path=None, output_dir="map_out", seed=None, concurrent=False):
    """CLI entry for mapping; returns a process exit status."""
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg = cfg.replace(seed=int(seed))
        map_dataset(dataset_path, cfg, output_dir, concurrent)
    except (ValueError, OSError, SdfGraphError, yaml.YAMLError) as exc:
        log.error("map failed: %s", exc)
        return 1
    return 0


def simulate(scenario, output_dir, seed=None):
    """Render a scenario into a dataset directory (with ground truth)."""
    sc = load_scenario(scenario) if isinstance(scenario, str) else scenario
    if seed is not None:
        raw = dict(sc.raw)
        raw["seed"] = int(seed)
        raw["drift"] = dict(raw.get("drift") or {}, seed=int(seed))
        sc = scenario_from_dict(raw)
    frames = sc.render()
    loops = []
    index = {round(float(t), 9): k for k, t in enumerate(sc.timestamps)}
    for t_l, t_k in sc.loop_closures:
        kl, kk = index[round(t_l, 9)], index[round(t_k, 9)]
        loops.append((t_l, t_k, inverse(sc.poses[kl]) @ sc.poses[kk]))
    write_dataset(output_dir, frames, (sc.timestamps, sc.poses), loops, sc.raw)
    return sc


def run_simulate(scenario_path, output_dir, seed=None):
    try:
        simulate(scenario_path, output_dir, seed)
    except (ValueError, KeyError, TypeError, OSError, yaml.YAMLError) as exc:
        log.error("simulate failed: %s", exc)
        return 1
    return 0


def _load_truth(truth):
    """(world or None, ground-truth Trajectory or None) from a path."""
    world, traj = None, None
    if os.path.isdir(truth):
        gt = os.path.join(truth, "ground_truth.csv")
        if os.path.isfile(gt):
            traj = Trajectory(*read_pose_csv(gt))
        sc = os.path.join(truth, "scenario.yaml")
        if os.path.isfile(sc):
            world = load_scenario(sc).world
    elif truth.endswith(".csv"):
        traj = Trajectory(*read_pose_csv(truth))
    else:
        sc = load_scenario(truth)
        world = sc.world
        traj = Trajectory(sc.timestamps, sc.poses)
    return world, traj


def evaluate_map(map_dir, truth, output_dir=None, exclude_ground=True):
    """Trajectory and reconstruction errors of a mapping run against ground truth."""
    world, gt = _load_truth(truth)
    coll = load_collection(os.path.join(map_dir, "submaps"))
    trunc = coll[0].integration.truncation_distance
    report = {"submaps": len(coll)}
    est = Trajectory.load_csv(os.path.join(map_dir, "trajectory.csv"))
    odo = None
    info_path = os.path.join(map_dir, "run_info.yaml")
    if os.path.isfile(info_path):
        with open(info_path) as fh:
            info = yaml.safe_load(fh) or {}
        odo_csv = os.path.join(info.get("dataset", ""), "odometry.csv")
        if os.path.isfile(odo_csv):
            odo = Trajectory(*read_pose_csv(odo_csv))
    result = None
    if gt is not None:
        result = ate(est, gt, 4)
        report["ate_rmse"] = result["rmse"]
        report["final_position_error"] = final_position_error(est, gt)
        A = result["alignment"]
        report["alignment"] = {"yaw": float(np.arctan2(A[1, 0], A[0, 0])),
                               "translation": [float(v) for v in A[:3, 3]]}
        segs = {}
        for sm in coll:
            ts = np.array([t for t, _ in sm.pose_history])
            mask = np.isin(result["timestamps"], ts)
            if mask.any():
                segs[sm.id] = float(np.mean(result["errors"][mask]))
        report["segment_errors"] = segs
        if odo is not None:
            report["odometry_ate_rmse"] = ate_rmse_safe(odo, gt)
            report["odometry_final_position_error"] = final_position_error(odo, gt)
    if world is not None:
        fused = fuse_global_map(coll)
        rec = reconstruction_error(fused, world, exclude_ground, trunc)
        report["reconstruction"] = rec
        base = fuse_global_map(coll, poses=odometry_poses(coll))
        report["odometry_reconstruction"] = reconstruction_error(base, world, exclude_ground,
                                                                 trunc)
    if output_dir is not None:
        os.makedirs(output_dir, exist_ok=True)
        with open(os.path.join(output_dir, "evaluation.yaml"), "w") as fh:
            yaml.safe_dump(report, fh, sort_keys=False)
        if result is not None:
            write_ate_csv(os.path.join(output_dir, "ate.csv"), result)
    return report


def ate_rmse_safe(est, ref):
    try:
        return ate(est, ref, 4)["rmse"]
    except SdfGraphError:
        return float("nan")


def run_evaluate(map_dir, truth, output_dir=None):
    try:
        report = evaluate_map(map_dir, truth, output_dir or map_dir)
    except (ValueError, OSError, SdfGraphError, yaml.YAMLError) as exc:
        log.error("evaluate failed: %s", exc)
        return 1
    print(yaml.safe_dump(report, sort_keys=False), end="")
    return 0


def sweep(scenario, ratios, strategies, trials, cfg=None, output_csv=None, frames=None,
          collection=None, progress=None):
    """Back-end runs over a grid of sampling ratios, strategies and seeds.

    The front-end (submap building) is computed once and shared by every
    cell, since it does not depend on the back-end.

    Returns:
        list of row dicts (strategy, ratio, trial, rmse, position_rmse, solver_time).
    """
    sc = load_scenario(scenario) if isinstance(scenario, str) else scenario
    cfg = cfg or load_config(None)
    if collection is None:
        frames = frames if frames is not None else sc.render()
        collection = build_frontend(frames, cfg)
    gt = Trajectory(sc.timestamps, sc.poses)
    trunc = cfg.truncation
    rows = []
    for strategy in strategies:
        for ratio in ratios:
            if not 0.0 < ratio <= 1.0:
                raise ValueError("ratios must lie in (0, 1]")
            for trial in range(trials):
                c = cfg.replace(alpha=float(ratio), strategy=strategy, seed=int(trial))
                backend = replay_backend(collection, c, frame_period=sc.frame_period)
                fused = fuse_global_map(collection)
                rec = reconstruction_error(fused, sc.world, True, trunc)
                est = Trajectory.from_collection(collection)
                row = {"strategy": strategy, "ratio": float(ratio), "trial": trial,
                       "rmse": rec["rmse"], "position_rmse": ate(est, gt, 4)["rmse"],
                       "solver_time": backend.solver_time}
                rows.append(row)
                if progress:
                    progress(row)
    if output_csv is not None:
        with open(output_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["strategy"])
            w.writeheader()
            w.writerows(rows)
    return rows


def run_sweep(scenario, ratios, strategies, trials, output_csv, config_path=None, seed=None):
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg = cfg.replace(seed=int(seed))
        t0 = time.perf_counter()
        rows = sweep(scenario, ratios, strategies, trials, cfg, output_csv,
                     progress=lambda r: log.info("%s", r))
        log.info("sweep of %d cells took %.1f s", len(rows), time.perf_counter() - t0)
    except (ValueError, OSError, SdfGraphError, yaml.YAMLError) as exc:
        log.error("sweep failed: %s", exc)
        return 1
    return 0
