"""Submap pose graph: odometry, loop-closure and SDF registration terms,
stochastic residual subsampling and a Levenberg-Marquardt solver.

Poses are gravity aligned, ``q = (x, y, z, yaw)``.  Relative-pose terms use
SE(3) logarithms with Jacobians taken through right perturbations; the
registration term reads one submap's isosurface points in the other's ESDF.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import (DegenerateWeights, MissingSubmap, NotConnected, SameSubmap,
                     SolverDiverged, TimestampOutOfRange, UnobservedRegion)
from .esdf import MEASURED
from .surface import aabb_overlap
from .transforms import (adjoint, inverse, pose_local_twists, pose_to_matrix, se3_log,
                         se3_right_jacobian, wrap_angle)
from .voxel_grid import block_key, find_slot

ODOMETRY = "odometry"
LOOP = "loop"
REGISTRATION = "registration"

WEIGHTED = "weighted"
UNIFORM_WEIGHTED = "uniform-weighted"
UNIFORM = "uniform-unweighted"
STRATEGIES = (WEIGHTED, UNIFORM_WEIGHTED, UNIFORM)

DEFAULT_ODOMETRY_SIGMAS = (0.05, 0.05, 0.05, 0.02, 0.02, 0.02)


@dataclass
class BackendConfig:
    """Weights, sampling and solver limits.

    ``odometry_sigmas`` are the standard deviations on the diagonal of the
    odometry covariance; the loop covariance defaults to four times it.
    ``overlap_margin`` of None means one truncation distance.
    """

    alpha: float = 0.05
    strategy: str = WEIGHTED
    sigma_r: float = 1.0
    odometry_sigmas: tuple = DEFAULT_ODOMETRY_SIGMAS
    loop_sigmas: tuple = None
    overlap_margin: float = None
    symmetric: bool = True
    use_registration: bool = True
    max_iterations: int = 30
    epsilon: float = 1e-4
    epsilon_q: float = 1e-6
    window: int = 5
    initial_lambda: float = 1e-4
    max_lambda: float = 1e10
    loop_tolerance: float = None
    seed: int = 0

    def validate(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown sampling strategy {self.strategy!r}")
        if self.sigma_r <= 0:
            raise ValueError("sigma_r must be positive")

    @property
    def odometry_covariance(self):
        return np.diag(np.asarray(self.odometry_sigmas, dtype=float) ** 2)

    @property
    def loop_covariance(self):
        if self.loop_sigmas is None:
            return 4.0 * self.odometry_covariance
        return np.diag(np.asarray(self.loop_sigmas, dtype=float) ** 2)


@dataclass
class PoseNode:
    id: int
    q: np.ndarray
    fixed: bool = False


@dataclass
class Constraint:
    kind: str
    i: int
    j: int
    measurement: np.ndarray = None
    covariance: np.ndarray = None
    T_SiCl: np.ndarray = None
    T_SjCk: np.ndarray = None

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("constraint endpoints must differ")
        if self.covariance is not None:
            self.information = np.linalg.inv(self.covariance)


# --------------------------------------------------------------------------
# relative-pose residuals

def _matrix(x):
    x = np.asarray(x, dtype=float)
    return x if x.shape == (4, 4) else pose_to_matrix(x)


def _params(x):
    x = np.asarray(x, dtype=float)
    if x.shape == (4, 4):
        return np.array([x[0, 3], x[1, 3], x[2, 3], math.atan2(x[1, 0], x[0, 0])])
    return x


def _relative_residual(qi, qj, T_hat, A, C):
    """e = log(T_hat^-1 A^-1 T_i^-1 T_j C) with Jacobians w.r.t. q_i and q_j."""
    Ti, Tj = _matrix(qi), _matrix(qj)
    B = inverse(Ti) @ Tj @ C
    E = inverse(T_hat) @ inverse(A) @ B
    e = se3_log(E)
    Jr_inv = np.linalg.inv(se3_right_jacobian(e))
    Ji = -Jr_inv @ adjoint(inverse(B)) @ pose_local_twists(_params(qi))
    Jj = Jr_inv @ adjoint(inverse(C)) @ pose_local_twists(_params(qj))
    return e, Ji, Jj


def odometry_residual(q_i, q_j, T_hat):
    """log(T_hat^-1 T_WSi^-1 T_WSj) and its 6x4 Jacobians for both poses.

    Poses may be given as (x, y, z, yaw) or as 4x4 matrices.
    """
    I = np.eye(4)
    return _relative_residual(q_i, q_j, T_hat, I, I)


def loop_residual(q_i, q_j, T_hat, T_SiCl, T_SjCk):
    """Loop-closure residual between sensor frames C^l (in S_i) and C^k (in S_j).

    Written as log(T_hat^-1 (T_WSi T_SiCl)^-1 T_WSj T_SjCk), which reduces to
    the odometry residual when both sensor poses coincide with their submap
    frames.
    """
    return _relative_residual(q_i, q_j, T_hat, T_SiCl, T_SjCk)


# --------------------------------------------------------------------------
# registration residuals

MODE_COST = 0
MODE_ACCUMULATE = 1
MODE_POINTWISE = 2


_MEASURED_MIN = MEASURED - 1e-9


@njit(cache=True)
def _packed_corner(keys, vals, packed, shift, vx, vy, vz, cache):
    bx, by, bz = vx >> shift, vy >> shift, vz >> shift
    if cache[3] >= -1 and bx == cache[0] and by == cache[1] and bz == cache[2]:
        slot = cache[3]
    else:
        slot = find_slot(keys, vals, block_key(bx, by, bz))
        cache[0] = bx
        cache[1] = by
        cache[2] = bz
        cache[3] = slot
    if slot < 0:
        return np.nan
    bmask = (1 << shift) - 1
    bs = bmask + 1
    return packed[slot, (vx & bmask) + bs * ((vy & bmask) + bs * (vz & bmask))]


@njit(cache=True)
def _packed_trilinear(keys, vals, packed, shift, voxel_size, px, py, pz, cache, out):
    """Strict trilinear value and gradient on a packed ESDF (NaN = unusable)."""
    ux = px / voxel_size - 0.5
    uy = py / voxel_size - 0.5
    uz = pz / voxel_size - 0.5
    fx = math.floor(ux)
    fy = math.floor(uy)
    fz = math.floor(uz)
    x0, y0, z0 = np.int64(fx), np.int64(fy), np.int64(fz)
    dx, dy, dz = ux - fx, uy - fy, uz - fz
    bmask = (1 << shift) - 1
    if (x0 & bmask) != bmask and (y0 & bmask) != bmask and (z0 & bmask) != bmask:
        bx, by, bz = x0 >> shift, y0 >> shift, z0 >> shift
        if cache[3] >= -1 and bx == cache[0] and by == cache[1] and bz == cache[2]:
            slot = cache[3]
        else:
            slot = find_slot(keys, vals, block_key(bx, by, bz))
            cache[0] = bx
            cache[1] = by
            cache[2] = bz
            cache[3] = slot
        if slot < 0:
            return False
        bs = bmask + 1
        sz = bs * bs
        i0 = (x0 & bmask) + bs * ((y0 & bmask) + bs * (z0 & bmask))
        row = packed[slot]
        g0 = np.float64(row[i0])
        g1 = np.float64(row[i0 + 1])
        g2 = np.float64(row[i0 + bs])
        g3 = np.float64(row[i0 + sz])
        g4 = np.float64(row[i0 + 1 + bs])
        g5 = np.float64(row[i0 + bs + sz])
        g6 = np.float64(row[i0 + 1 + sz])
        g7 = np.float64(row[i0 + 1 + bs + sz])
    else:
        g0 = np.float64(_packed_corner(keys, vals, packed, shift, x0, y0, z0, cache))
        g1 = np.float64(_packed_corner(keys, vals, packed, shift, x0 + 1, y0, z0, cache))
        g2 = np.float64(_packed_corner(keys, vals, packed, shift, x0, y0 + 1, z0, cache))
        g3 = np.float64(_packed_corner(keys, vals, packed, shift, x0, y0, z0 + 1, cache))
        g4 = np.float64(_packed_corner(keys, vals, packed, shift, x0 + 1, y0 + 1, z0, cache))
        g5 = np.float64(_packed_corner(keys, vals, packed, shift, x0, y0 + 1, z0 + 1, cache))
        g6 = np.float64(_packed_corner(keys, vals, packed, shift, x0 + 1, y0, z0 + 1, cache))
        g7 = np.float64(_packed_corner(keys, vals, packed, shift, x0 + 1, y0 + 1, z0 + 1,
                                       cache))
    # NaN fails every comparison, so this rejects any unusable corner
    if not (g0 == g0 and g1 == g1 and g2 == g2 and g3 == g3 and g4 == g4 and g5 == g5
            and g6 == g6 and g7 == g7):
        return False
    c1 = g1 - g0
    c2 = g2 - g0
    c3 = g3 - g0
    c4 = g4 - g1 - g2 + g0
    c5 = g5 - g2 - g3 + g0
    c6 = g6 - g1 - g3 + g0
    c7 = g7 - g4 - g5 - g6 + g1 + g2 + g3 - g0
    out[0] = (g0 + c1 * dx + c2 * dy + c3 * dz + c4 * dx * dy + c5 * dy * dz
              + c6 * dz * dx + c7 * dx * dy * dz)
    out[1] = (c1 + c4 * dy + c6 * dz + c7 * dy * dz) / voxel_size
    out[2] = (c2 + c4 * dx + c5 * dz + c7 * dx * dz) / voxel_size
    out[3] = (c3 + c5 * dy + c6 * dx + c7 * dx * dy) / voxel_size
    return True


def packed_esdf(esdf):
    """(keys, vals, packed, shift) for registration lookups.

    ``packed`` holds float32 distances, NaN where the ESDF is unobserved or
    only extrapolated.  Cached on frozen grids.
    """
    cached = getattr(esdf, "_registration_view", None)
    if cached is not None:
        return cached
    keys, vals, dist, weight, shift = esdf.kernel_args()
    packed = np.where(weight >= _MEASURED_MIN, dist, np.nan).astype(np.float32)
    view = (keys, vals, packed, shift)
    if esdf.frozen:
        esdf._registration_view = view
    return view


@njit(cache=True)
def _registration_terms(keys, vals, packed, shift, voxel_size, points, factors,
                        qi, qj, mode, H, g, res, jac, valid):
    """Evaluate r = -Phi_j(T_SjSi p) over ``points``.

    mode 0 sums factor * r^2, mode 1 also accumulates the 8x8 normal matrix
    and gradient over (q_i, q_j), mode 2 writes per-point residuals and
    Jacobians.  Points whose lookup fails, or whose cell holds extrapolated
    (never measured) ESDF values, are skipped.

    Returns:
        (cost, number of valid points)
    """
    ci, si = math.cos(qi[3]), math.sin(qi[3])
    cj, sj = math.cos(qj[3]), math.sin(qj[3])
    cache = np.full(4, -2, dtype=np.int64)
    out = np.empty(5)
    J = np.empty(8)
    cost = 0.0
    n_valid = 0
    for m in range(points.shape[0]):
        px, py, pz = points[m, 0], points[m, 1], points[m, 2]
        dx = ci * px - si * py + qi[0] - qj[0]
        dy = si * px + ci * py + qi[1] - qj[1]
        dz = pz + qi[2] - qj[2]
        sx = cj * dx + sj * dy
        sy = -sj * dx + cj * dy
        ok = _packed_trilinear(keys, vals, packed, shift, voxel_size, sx, sy, dz, cache, out)
        if mode == MODE_POINTWISE:
            valid[m] = ok
        if not ok:
            continue
        n_valid += 1
        r = -out[0]
        gx, gy, gz = out[1], out[2], out[3]
        # a = R_j grad, so grad . (R_j^T v) = a . v
        ax = cj * gx - sj * gy
        ay = sj * gx + cj * gy
        ux = -si * px - ci * py
        uy = ci * px - si * py
        vx = -sj * dx + cj * dy
        vy = -cj * dx - sj * dy
        J[0] = -ax
        J[1] = -ay
        J[2] = -gz
        J[3] = -(ax * ux + ay * uy)
        J[4] = ax
        J[5] = ay
        J[6] = gz
        J[7] = -(gx * vx + gy * vy)
        if mode == MODE_POINTWISE:
            res[m] = r
            for a in range(8):
                jac[m, a] = J[a]
            continue
        c = factors[m]
        cost += c * r * r
        if mode == MODE_ACCUMULATE:
            for a in range(8):
                g[a] += c * J[a] * r
                for b in range(a, 8):
                    H[a, b] += c * J[a] * J[b]
    if mode == MODE_ACCUMULATE:
        for a in range(8):
            for b in range(a):
                H[a, b] = H[b, a]
    return cost, n_valid


_NO_H = np.zeros((8, 8))
_NO_G = np.zeros(8)
_NO_RES = np.zeros(1)
_NO_JAC = np.zeros((1, 8))
_NO_VALID = np.zeros(1, dtype=np.bool_)


def registration_residuals(points, q_i, q_j, esdf_j):
    """Residuals -Phi_j(T_SjSi p) and 1x8 Jacobians over (q_i, q_j) for many points.

    Returns:
        (residuals (M,), jacobians (M, 8), valid (M,) bool)
    """
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
    m = len(pts)
    res = np.zeros(m)
    jac = np.zeros((m, 8))
    valid = np.zeros(m, dtype=bool)
    if esdf_j.num_blocks and m:
        keys, vals, packed, shift = packed_esdf(esdf_j)
        _registration_terms(keys, vals, packed, shift, esdf_j.voxel_size, pts,
                            np.ones(m), _params(q_i), _params(q_j), MODE_POINTWISE,
                            _NO_H, _NO_G, res, jac, valid)
    return res, jac, valid


def registration_residual(point, q_i, q_j, esdf_j):
    """Single-point registration residual and its Jacobian (8,) over (q_i, q_j).

    Raises:
        UnobservedRegion: the mapped point touches unobserved ESDF voxels.
    """
    r, J, ok = registration_residuals(point, q_i, q_j, esdf_j)
    if not ok[0]:
        raise UnobservedRegion("registration point maps outside the observed ESDF")
    return float(r[0]), J[0]


def _registration_cost(esdf, points, factors, qi, qj, H=None, g=None):
    if esdf.num_blocks == 0 or len(points) == 0:
        return 0.0, 0
    keys, vals, packed, shift = packed_esdf(esdf)
    mode = MODE_COST if H is None else MODE_ACCUMULATE
    return _registration_terms(keys, vals, packed, shift, esdf.voxel_size, points,
                               factors, qi, qj, mode, _NO_H if H is None else H,
                               _NO_G if g is None else g, _NO_RES, _NO_JAC, _NO_VALID)


# --------------------------------------------------------------------------
# subsampling

@dataclass
class RegistrationSample:
    points: np.ndarray
    indices: np.ndarray
    factors: np.ndarray


def sample_count(n, alpha):
    return int(math.ceil(alpha * n - 1e-9))


def _cumulative(weights):
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    c = np.cumsum(w)
    if c[-1] <= 0:
        raise DegenerateWeights("all isosurface weights are zero")
    return c


def sample_registration_points(iso, alpha, rng_seed=None, strategy=WEIGHTED, rng=None,
                               cdf=None):
    """Draw ceil(alpha * N) isosurface points with replacement.

    ``weighted`` draws in proportion to the point weights, the two uniform
    strategies draw uniformly.  ``factors`` are the per-draw multipliers that
    make the summed squared residuals an unbiased estimate: 1/alpha, times
    w/mean(w) for ``uniform-weighted``.

    Raises:
        DegenerateWeights: weighted strategy with all weights zero.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    rng = rng if rng is not None else np.random.default_rng(rng_seed)
    n = len(iso.points)
    m = sample_count(n, alpha)
    # draws are sorted: same multiset, but memory access follows the
    # spatially ordered isosurface points
    if strategy == WEIGHTED:
        c = _cumulative(iso.weights) if cdf is None else cdf
        idx = np.searchsorted(c, np.sort(rng.random(m)) * c[-1], side="right")
        idx = np.minimum(idx, n - 1)
        factors = np.full(m, 1.0 / alpha)
    elif strategy in (UNIFORM_WEIGHTED, UNIFORM):
        idx = np.sort(rng.integers(0, n, size=m))
        factors = np.full(m, 1.0 / alpha)
        if strategy == UNIFORM_WEIGHTED:
            w = np.asarray(iso.weights, dtype=float)
            mean = w.mean()
            if mean <= 0:
                raise DegenerateWeights("all isosurface weights are zero")
            factors *= w[idx] / mean
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    return RegistrationSample(np.ascontiguousarray(iso.points[idx]), idx, factors)


def approximate_registration_cost(iso_i, esdf_j, T_SjSi, alpha, rng=None,
                                  strategy=WEIGHTED):
    """Subsampled estimate of the squared registration error of S_i against S_j.

    Points that land in unobserved parts of ``esdf_j`` contribute nothing.
    """
    T = np.asarray(T_SjSi, dtype=float)
    sample = sample_registration_points(iso_i, alpha, rng=rng, strategy=strategy)
    q_rel = _params(T)
    cost, _ = _registration_cost(esdf_j, sample.points, sample.factors, q_rel, np.zeros(4))
    return cost


def full_registration_cost(iso_i, esdf_j, T_SjSi):
    """Exact sum of squared residuals over every isosurface point."""
    pts = np.ascontiguousarray(iso_i.points, dtype=float)
    cost, _ = _registration_cost(esdf_j, pts, np.ones(len(pts)), _params(T_SjSi),
                                 np.zeros(4))
    return cost


# --------------------------------------------------------------------------
# graph

@dataclass
class OptimizationReport:
    iterations: int
    initial_cost: float
    final_cost: float
    wall_time: float
    seed: object
    reason: str
    cost_history: list = field(default_factory=list)
    registration_points: int = 0
    nodes: int = 0


class PoseGraph:
    def __init__(self, config=None):
        self.config = config or BackendConfig()
        self.config.validate()
        self.nodes = {}
        self.constraints = []
        self.registration_pairs = []

    def add_node(self, node_id, q, fixed=False):
        q = np.asarray(q, dtype=float).copy()
        q[3] = wrap_angle(q[3])
        self.nodes[node_id] = PoseNode(node_id, q, fixed)
        return self.nodes[node_id]

    def set_pose(self, node_id, q):
        q = np.asarray(q, dtype=float).copy()
        q[3] = wrap_angle(q[3])
        self.nodes[node_id].q = q

    def poses(self):
        return {k: n.q.copy() for k, n in self.nodes.items()}

    def _check_nodes(self, *ids):
        for i in ids:
            if i not in self.nodes:
                raise MissingSubmap(f"no pose node {i}")

    def add_odometry(self, i, j, T_hat, covariance=None):
        self._check_nodes(i, j)
        cov = self.config.odometry_covariance if covariance is None else covariance
        self.constraints.append(Constraint(ODOMETRY, i, j, np.asarray(T_hat, float), cov))
        return len(self.constraints) - 1

    def add_loop(self, i, j, T_hat, T_SiCl, T_SjCk, covariance=None):
        self._check_nodes(i, j)
        cov = self.config.loop_covariance if covariance is None else covariance
        self.constraints.append(Constraint(LOOP, i, j, np.asarray(T_hat, float), cov,
                                           np.asarray(T_SiCl, float),
                                           np.asarray(T_SjCk, float)))
        return len(self.constraints) - 1

    def set_registration_pairs(self, pairs):
        """Directed (reading submap, distance submap) pairs."""
        out = []
        for i, j in pairs:
            if i == j:
                raise ValueError("registration pair endpoints must differ")
            self._check_nodes(i, j)
            out.append((int(i), int(j)))
            if self.config.symmetric and (j, i) not in pairs:
                out.append((int(j), int(i)))
        self.registration_pairs = sorted(set(out))

    def relative_constraints(self):
        return [c for c in self.constraints if c.kind in (ODOMETRY, LOOP)]

    def residual(self, c, poses=None):
        poses = poses or {k: n.q for k, n in self.nodes.items()}
        if c.kind == ODOMETRY:
            return odometry_residual(poses[c.i], poses[c.j], c.measurement)
        return loop_residual(poses[c.i], poses[c.j], c.measurement, c.T_SiCl, c.T_SjCk)

    def check_connected(self):
        """Raise NotConnected unless odometry edges join every node."""
        ids = list(self.nodes)
        if not ids:
            return
        parent = {i: i for i in ids}

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for c in self.constraints:
            if c.kind == ODOMETRY:
                parent[find(c.i)] = find(c.j)
        if len({find(i) for i in ids}) > 1:
            raise NotConnected("pose graph is not connected through odometry")

    def dump(self, path, collection=None):
        """Text dump: one line per node and per constraint, with residual norms."""
        lines = []
        for k in sorted(self.nodes):
            n = self.nodes[k]
            lines.append("node {} {!r} {!r} {!r} {!r} {}".format(
                k, *[float(v) for v in n.q], int(n.fixed)))
        for c in self.constraints:
            e, _, _ = self.residual(c)
            row = _params(c.measurement)
            lines.append("{} {} {} {!r} {!r} {!r} {!r} {!r}".format(
                c.kind, c.i, c.j, *[float(v) for v in row], float(np.linalg.norm(e))))
        for i, j in self.registration_pairs:
            if collection is None:
                lines.append(f"{REGISTRATION} {i} {j}")
                continue
            r, _, ok = registration_residuals(collection[i].isosurface.points,
                                              self.nodes[i].q, self.nodes[j].q,
                                              collection[j].esdf)
            lines.append("{} {} {} {} {!r}".format(REGISTRATION, i, j, int(ok.sum()),
                                                   float(np.sqrt(np.sum(r[ok] ** 2)))))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def detect_overlaps(collection, ids, margin):
    """Unordered pairs of the given submaps whose world AABBs overlap."""
    ids = sorted(ids)
    pairs = []
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            sa, sb = collection[ids[a]], collection[ids[b]]
            if len(sa.isosurface) == 0 and len(sb.isosurface) == 0:
                continue
            if aabb_overlap(sa, sb, margin):
                pairs.append((ids[a], ids[b]))
    return pairs


def add_loop_closure(graph, collection, t_l, t_k, T_hat, tolerance, covariance=None):
    """Bind a sensor-to-sensor loop measurement to the submaps holding both times.

    Raises:
        TimestampOutOfRange: a timestamp is not within ``tolerance`` of any
            pose-history entry of a finished submap.
        SameSubmap: both timestamps fall in one submap.
    """
    a = collection.locate(t_l, tolerance)
    b = collection.locate(t_k, tolerance)
    if a is None or b is None:
        raise TimestampOutOfRange(f"no finished submap covers t={t_l if a is None else t_k}")
    (i, kl), (j, kk) = a, b
    if i == j:
        raise SameSubmap(f"both timestamps fall in submap {i}")
    T_SiCl = collection[i].pose_history[kl][1]
    T_SjCk = collection[j].pose_history[kk][1]
    return graph.add_loop(i, j, T_hat, T_SiCl, T_SjCk, covariance)


# --------------------------------------------------------------------------
# solver

class _Problem:
    """Flattened view of the free pose parameters and the cost terms."""

    def __init__(self, graph, collection):
        self.graph = graph
        self.collection = collection
        self.free = [k for k in sorted(graph.nodes) if not graph.nodes[k].fixed]
        self.col = {k: 4 * a for a, k in enumerate(self.free)}
        self.dim = 4 * len(self.free)
        self.rel = graph.relative_constraints()
        cfg = graph.config
        self.reg = []
        if cfg.use_registration and collection is not None:
            for i, j in graph.registration_pairs:
                iso, esdf = collection[i].isosurface, collection[j].esdf
                if len(iso) == 0 or esdf.num_blocks == 0:
                    continue
                self.reg.append((i, j))
        self._cdf = {}

    def cdf(self, i):
        if i not in self._cdf:
            self._cdf[i] = _cumulative(self.collection[i].isosurface.weights)
        return self._cdf[i]

    def draw(self, rng):
        cfg = self.graph.config
        w_r = 1.0 / cfg.sigma_r**2
        samples = []
        for i, j in self.reg:
            iso = self.collection[i].isosurface
            s = sample_registration_points(iso, cfg.alpha, rng=rng, strategy=cfg.strategy,
                                           cdf=self.cdf(i) if cfg.strategy == WEIGHTED else None)
            samples.append((i, j, s.points, s.factors * w_r))
        return samples

    def _scatter(self, H, g, ids, Hl, gl):
        for a, ia in enumerate(ids):
            if ia not in self.col:
                continue
            ra = self.col[ia]
            g[ra:ra + 4] += gl[4 * a:4 * a + 4]
            for b, ib in enumerate(ids):
                if ib not in self.col:
                    continue
                rb = self.col[ib]
                H[ra:ra + 4, rb:rb + 4] += Hl[4 * a:4 * a + 4, 4 * b:4 * b + 4]

    def evaluate(self, poses, samples, linearize=False):
        H = np.zeros((self.dim, self.dim)) if linearize else None
        g = np.zeros(self.dim) if linearize else None
        cost = 0.0
        n_points = 0
        for c in self.rel:
            e, Ji, Jj = self.graph.residual(c, poses)
            cost += float(e @ c.information @ e)
            if linearize:
                J = np.hstack([Ji, Jj])
                self._scatter(H, g, (c.i, c.j), J.T @ c.information @ J,
                              J.T @ c.information @ e)
        for i, j, pts, factors in samples:
            esdf = self.collection[j].esdf
            if linearize:
                Hl = np.zeros((8, 8))
                gl = np.zeros(8)
                cst, n = _registration_cost(esdf, pts, factors, poses[i], poses[j], Hl, gl)
                self._scatter(H, g, (i, j), Hl, gl)
            else:
                cst, n = _registration_cost(esdf, pts, factors, poses[i], poses[j])
            cost += cst
            n_points += n
        return cost, H, g, n_points

    def step(self, poses, delta):
        out = {k: v.copy() for k, v in poses.items()}
        for k, c in self.col.items():
            q = out[k] + delta[c:c + 4]
            q[3] = wrap_angle(q[3])
            out[k] = q
        return out


def _trailing_median_converged(costs, window, eps):
    if len(costs) < window + 1:
        return False
    now = float(np.median(costs[-window:]))
    before = float(np.median(costs[-window - 1:-1]))
    return abs(before - now) <= eps * max(abs(before), 1e-300)


def optimize(graph, collection=None, config=None, rng=None, publish=True):
    """Levenberg-Marquardt over the free pose nodes.

    Registration subsets are redrawn at every iteration; a candidate step is
    judged on the same subset it was linearized with.  Stops when the cost
    changes by less than ``epsilon`` (relative; trailing median over
    ``window`` iterations when registration terms are present), when the
    step norm falls below ``epsilon_q``, or after ``max_iterations``.

    Returns:
        OptimizationReport.  Optimized poses are written back into ``graph``
        and, with ``publish``, into the collection's pose table as one batch.
    """
    cfg = config or graph.config
    t0 = time.perf_counter()
    if not graph.nodes:
        raise MissingSubmap("empty pose graph")
    if not any(n.fixed for n in graph.nodes.values()):
        graph.nodes[min(graph.nodes)].fixed = True
    graph.check_connected()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    prob = _Problem(graph, collection)
    poses = graph.poses()
    stochastic = bool(prob.reg)
    if prob.dim == 0:
        cost, _, _, _ = prob.evaluate(poses, prob.draw(rng))
        return OptimizationReport(0, cost, cost, time.perf_counter() - t0, cfg.seed,
                                  "no free nodes", [cost], nodes=len(graph.nodes))

    lam = cfg.initial_lambda
    history = []
    initial_cost = None
    reason = "max_iterations"
    it = 0
    n_points = 0
    for it in range(1, cfg.max_iterations + 1):
        samples = prob.draw(rng) if stochastic else []
        cost, H, g, n_points = prob.evaluate(poses, samples, linearize=True)
        if not np.isfinite(cost) or not np.all(np.isfinite(H)):
            raise SolverDiverged("non-finite cost or normal matrix")
        if initial_cost is None:
            initial_cost = cost
        diag = np.diag(H).copy()
        accepted = False
        while lam <= cfg.max_lambda:
            A = H + np.diag(lam * diag + lam * 1e-6 + 1e-12)
            try:
                delta = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = prob.step(poses, delta)
            new_cost, _, _, _ = prob.evaluate(cand, samples)
            if np.isfinite(new_cost) and new_cost <= cost:
                accepted = True
                break
            lam *= 4.0
        if not accepted:
            history.append(cost)
            reason = "no descent step"
            break
        poses = cand
        lam = max(lam / 3.0, 1e-12)
        history.append(new_cost)
        if np.linalg.norm(delta) < cfg.epsilon_q:
            reason = "step below epsilon_q"
            break
        if stochastic:
            if _trailing_median_converged(history, cfg.window, cfg.epsilon):
                reason = "cost converged"
                break
        elif cost - new_cost <= cfg.epsilon * max(cost, 1e-300):
            reason = "cost converged"
            break

    for k in prob.free:
        graph.set_pose(k, poses[k])
    if publish and collection is not None and hasattr(collection, "publish_poses"):
        collection.publish_poses({k: poses[k] for k in prob.free})
    final = history[-1] if history else initial_cost
    return OptimizationReport(it, float(initial_cost), float(final),
                              time.perf_counter() - t0, cfg.seed, reason,
                              [float(c) for c in history], n_points, len(graph.nodes))


def total_cost(graph, collection=None, poses=None, full=True, rng=None):
    """Objective value at ``poses`` (graph poses if None).

    With ``full`` every isosurface point enters once with weight 1/sigma_r^2;
    otherwise one subsample is drawn as in the solver.
    """
    prob = _Problem(graph, collection)
    poses = poses or graph.poses()
    if full:
        w_r = 1.0 / graph.config.sigma_r**2
        samples = []
        for i, j in prob.reg:
            pts = np.ascontiguousarray(collection[i].isosurface.points)
            samples.append((i, j, pts, np.full(len(pts), w_r)))
    else:
        samples = prob.draw(rng or np.random.default_rng(graph.config.seed))
    cost, _, _, _ = prob.evaluate(poses, samples)
    return cost
