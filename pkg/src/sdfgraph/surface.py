"""Zero-level isosurface extraction and submap bounding volumes."""

from dataclasses import dataclass, field

import numpy as np
from skimage.measure import marching_cubes

from .errors import EmptyMap, NoSurface
from .transforms import transform_points


@dataclass
class IsoSurfacePointSet:
    """Welded isosurface vertices in the submap frame, with fusion weights."""

    points: np.ndarray
    weights: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    mesh_vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    @property
    def count(self):
        return len(self.points)

    def __len__(self):
        return len(self.points)


@dataclass
class OrientedBoundingBox:
    """Box in the submap frame; oriented in the world through the submap pose."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def corners(self):
        lo, hi = self.min_corner, self.max_corner
        sel = np.array([[(k >> a) & 1 for a in range(3)] for k in range(8)], dtype=bool)
        return np.where(sel, hi, lo)


@dataclass
class AxisAlignedBoundingBox:
    min_corner: np.ndarray
    max_corner: np.ndarray

    @classmethod
    def from_obb(cls, obb, T_WS):
        c = transform_points(T_WS, obb.corners())
        return cls(c.min(axis=0), c.max(axis=0))

    def contains(self, p, tol=1e-9):
        p = np.atleast_2d(p)
        return bool(np.all((p >= self.min_corner - tol) & (p <= self.max_corner + tol)))


def boxes_overlap(a, b, margin=0.0):
    """True iff the per-axis gap between two AABBs is at most ``margin``."""
    gap = np.maximum(a.min_corner - b.max_corner, b.min_corner - a.max_corner)
    return bool(np.all(gap <= margin))


def aabb_overlap(a, b, margin):
    """Overlap test for two submaps from their OBBs and current world poses."""
    return boxes_overlap(a.world_aabb(), b.world_aabb(), margin)


def compute_obb(tsdf):
    """Tight box around all allocated blocks, in the grid's own frame."""
    if tsdf.num_blocks == 0:
        raise EmptyMap("no allocated blocks")
    bi = tsdf.block_indices()
    extent = tsdf.block_size * tsdf.voxel_size
    return OrientedBoundingBox(bi.min(axis=0) * extent, (bi.max(axis=0) + 1) * extent)


def _complete_cells(observed):
    """Cells (lower corner index) whose 8 corner voxels are all observed."""
    o = observed
    return (o[:-1, :-1, :-1] & o[1:, :-1, :-1] & o[:-1, 1:, :-1] & o[:-1, :-1, 1:]
            & o[1:, 1:, :-1] & o[:-1, 1:, 1:] & o[1:, :-1, 1:] & o[1:, 1:, 1:])


def _edges_in_cells(cells, axis):
    """Mask over lattice edges along ``axis`` that border at least one complete cell.

    Edge (i, j, k) along x joins voxels (i, j, k) and (i+1, j, k) and is shared
    by cells (i, j-a, k-b) for a, b in {0, 1}.
    """
    shape = list(cells.shape)
    others = [a for a in range(3) if a != axis]
    shape[others[0]] += 1
    shape[others[1]] += 1
    out = np.zeros(shape, dtype=bool)
    for a in (0, 1):
        for b in (0, 1):
            sl = [slice(None)] * 3
            sl[others[0]] = slice(a, a + cells.shape[others[0]])
            sl[others[1]] = slice(b, b + cells.shape[others[1]])
            out[tuple(sl)] |= cells
    return out


def extract_isosurface(tsdf, with_mesh=True):
    """Zero crossings of ``tsdf`` on cell edges, one vertex per edge.

    Only edges of cells with all 8 corners observed are used.  Vertex position
    is the linear zero crossing, weight the linear interpolation of the two
    voxel weights (the trilinear weight restricted to the edge).  With
    ``with_mesh`` a marching-cubes triangle mesh over the same cells is also
    built, for export only.

    Raises:
        NoSurface: if no observed sign change exists.
    """
    if tsdf.num_observed() == 0:
        raise NoSurface("grid has no observed voxels")
    lo, D, W, _ = tsdf.to_dense()
    r = tsdf.voxel_size
    observed = W > 0
    cells = _complete_cells(observed)
    neg = D < 0
    pts, wts = [], []
    for axis in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[axis] = slice(0, -1)
        b[axis] = slice(1, None)
        a, b = tuple(a), tuple(b)
        crossing = (neg[a] != neg[b]) & _edges_in_cells(cells, axis)
        ii = np.argwhere(crossing)
        if len(ii) == 0:
            continue
        da = D[a][crossing]
        db = D[b][crossing]
        t = da / (da - db)
        p = (ii + lo + 0.5) * r
        p[:, axis] += t * r
        pts.append(p)
        wts.append((1.0 - t) * W[a][crossing] + t * W[b][crossing])
    if not pts:
        raise NoSurface("no sign change between adjacent observed voxels")
    iso = IsoSurfacePointSet(np.concatenate(pts), np.concatenate(wts))
    if with_mesh:
        iso.mesh_vertices, iso.faces = _triangle_mesh(D, cells, lo, r)
    return iso


def _triangle_mesh(D, cells, lo, r):
    # skimage tests its mask at the far corner of each cell
    mask = np.zeros(D.shape, dtype=bool)
    mask[1:, 1:, 1:] = cells
    vol = np.where(np.isfinite(D), D, 0.0)
    try:
        verts, faces, _, _ = marching_cubes(vol, level=0.0, spacing=(r, r, r), mask=mask,
                                            allow_degenerate=False)
    except (RuntimeError, ValueError):
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    return verts + (lo + 0.5) * r, faces.astype(np.int64)


def write_ply(path, vertices, faces=None, quality=None):
    """ASCII PLY with optional faces and per-vertex quality."""
    vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
    faces = np.zeros((0, 3), dtype=np.int64) if faces is None else np.asarray(faces)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(vertices)}",
             "property float x", "property float y", "property float z"]
    if quality is not None:
        lines.append("property float quality")
    lines += [f"element face {len(faces)}", "property list uchar int vertex_indices",
              "end_header"]
    if quality is not None:
        body = [f"{x:.9g} {y:.9g} {z:.9g} {q:.9g}"
                for (x, y, z), q in zip(vertices, np.asarray(quality, dtype=float))]
    else:
        body = [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in vertices]
    body += [f"3 {a} {b} {c}" for a, b, c in faces]
    with open(path, "w") as fh:
        fh.write("\n".join(lines + body) + "\n")


def read_ply(path):
    """Read back an ASCII PLY written by ``write_ply``.

    Returns:
        (vertices, faces, quality or None)
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    n_v = n_f = 0
    has_q = False
    i = 0
    while lines[i] != "end_header":
        tok = lines[i].split()
        if tok[:2] == ["element", "vertex"]:
            n_v = int(tok[2])
        elif tok[:2] == ["element", "face"]:
            n_f = int(tok[2])
        elif tok == ["property", "float", "quality"]:
            has_q = True
        i += 1
    i += 1
    v = np.array([list(map(float, s.split())) for s in lines[i:i + n_v]]).reshape(n_v, -1)
    f = np.array([list(map(int, s.split()[1:])) for s in lines[i + n_v:i + n_v + n_f]],
                 dtype=np.int64).reshape(n_f, 3)
    return v[:, :3], f, (v[:, 3] if has_q else None)
