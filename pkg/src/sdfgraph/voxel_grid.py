"""Sparse voxel grids made of lazily allocated cubic blocks.

Blocks are located through an open-addressing hash table that lives in plain
numpy arrays, so the numba kernels of the integrator, ESDF and registration
code can probe it directly.  Voxel ``v`` has its center at
``(v + 0.5) * voxel_size`` in the grid frame; trilinear interpolation works on
that center lattice.
"""

import math
import struct
from typing import NamedTuple

import numpy as np
from numba import njit

from .errors import EmptyMap, FrozenSubmap, UnobservedRegion

TSDF = "tsdf"
ESDF = "esdf"
_KIND_TAGS = {TSDF: 0, ESDF: 1}

DEFAULT_BLOCK_SIZE = 16

_KEY_OFFSET = 1 << 20
_EMPTY = -1


class TsdfVoxel(NamedTuple):
    distance: float
    weight: float


class EsdfVoxel(NamedTuple):
    distance: float
    observed: bool


class InterpolationResult(NamedTuple):
    value: float
    gradient: np.ndarray
    weight: float


# --------------------------------------------------------------------------
# numba hashing primitives


@njit(cache=True, inline="always")
def block_key(bx, by, bz):
    return ((bx + _KEY_OFFSET) << 42) | ((by + _KEY_OFFSET) << 21) | (bz + _KEY_OFFSET)


@njit(cache=True, inline="always")
def _hash_index(key, mask):
    x = np.uint64(key) * np.uint64(0x9E3779B97F4A7C15)
    x ^= x >> np.uint64(31)
    return np.int64(x & np.uint64(mask))


@njit(cache=True)
def find_slot(keys, vals, key):
    mask = keys.shape[0] - 1
    h = _hash_index(key, mask)
    while True:
        k = keys[h]
        if k == key:
            return vals[h]
        if k == _EMPTY:
            return -1
        h = (h + 1) & mask


@njit(cache=True)
def insert_slot(keys, vals, key, slot):
    mask = keys.shape[0] - 1
    h = _hash_index(key, mask)
    while keys[h] != _EMPTY:
        if keys[h] == key:
            vals[h] = slot
            return
        h = (h + 1) & mask
    keys[h] = key
    vals[h] = slot


@njit(cache=True)
def allocate_block(keys, vals, coords, dist, weight, counter, bx, by, bz, default_distance):
    """Return the slot of block (bx, by, bz), allocating it if needed.

    Returns -1 when the block store is full; the caller grows and retries.
    """
    key = block_key(bx, by, bz)
    slot = find_slot(keys, vals, key)
    if slot >= 0:
        return slot
    n = counter[0]
    if n >= coords.shape[0]:
        return -1
    coords[n, 0] = bx
    coords[n, 1] = by
    coords[n, 2] = bz
    dist[n, :] = default_distance
    weight[n, :] = 0.0
    insert_slot(keys, vals, key, n)
    counter[0] = n + 1
    return n


@njit(cache=True)
def _rebuild_table(keys, vals, coords, n):
    for s in range(n):
        insert_slot(keys, vals, block_key(coords[s, 0], coords[s, 1], coords[s, 2]), s)


@njit(cache=True)
def _lookup_many(keys, vals, dist, weight, shift, indices, out_d, out_w, out_found):
    bmask = (1 << shift) - 1
    bsize = 1 << shift
    for m in range(indices.shape[0]):
        vx, vy, vz = indices[m, 0], indices[m, 1], indices[m, 2]
        slot = find_slot(keys, vals, block_key(vx >> shift, vy >> shift, vz >> shift))
        if slot < 0:
            out_found[m] = False
            continue
        lin = (vx & bmask) + bsize * ((vy & bmask) + bsize * (vz & bmask))
        out_d[m] = dist[slot, lin]
        out_w[m] = weight[slot, lin]
        out_found[m] = True


@njit(cache=True)
def _assign_many(keys, vals, coords, dist, weight, counter, shift, default_distance,
                 indices, values, weights):
    bmask = (1 << shift) - 1
    bsize = 1 << shift
    for m in range(indices.shape[0]):
        vx, vy, vz = indices[m, 0], indices[m, 1], indices[m, 2]
        slot = allocate_block(keys, vals, coords, dist, weight, counter,
                              vx >> shift, vy >> shift, vz >> shift, default_distance)
        if slot < 0:
            return m
        lin = (vx & bmask) + bsize * ((vy & bmask) + bsize * (vz & bmask))
        dist[slot, lin] = values[m]
        weight[slot, lin] = weights[m]
    return indices.shape[0]


@njit(cache=True)
def voxel_sample(keys, vals, dist, weight, shift, vx, vy, vz, cache):
    """Distance/weight of voxel (vx, vy, vz); weight -1 if its block is missing.

    ``cache`` is a length-4 int64 scratch array (bx, by, bz, slot) that avoids
    re-probing the table for consecutive queries inside one block.
    """
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
        return 0.0, -1.0
    bmask = (1 << shift) - 1
    bsize = 1 << shift
    lin = (vx & bmask) + bsize * ((vy & bmask) + bsize * (vz & bmask))
    return dist[slot, lin], weight[slot, lin]


@njit(cache=True)
def trilinear(keys, vals, dist, weight, shift, voxel_size, px, py, pz, cache, out):
    """Strict trilinear interpolation on the voxel-center lattice.

    Writes (value, dvalue/dx, dvalue/dy, dvalue/dz, weight) into ``out`` and
    returns False if any of the 8 surrounding voxels is missing or unobserved.
    The value is evaluated as g^T B^T h(s) with the monomial basis
    h = [1, dx, dy, dz, dx*dy, dy*dz, dz*dx, dx*dy*dz].
    """
    ux = px / voxel_size - 0.5
    uy = py / voxel_size - 0.5
    uz = pz / voxel_size - 0.5
    fx = math.floor(ux)
    fy = math.floor(uy)
    fz = math.floor(uz)
    x0, y0, z0 = np.int64(fx), np.int64(fy), np.int64(fz)
    dx, dy, dz = ux - fx, uy - fy, uz - fz

    # corner order: 000 100 010 001 110 011 101 111
    bmask = (1 << shift) - 1
    if (x0 & bmask) != bmask and (y0 & bmask) != bmask and (z0 & bmask) != bmask:
        # all corners share one block
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
        sy = bs
        sz = bs * bs
        i0 = (x0 & bmask) + bs * ((y0 & bmask) + bs * (z0 & bmask))
        ws = weight[slot]
        w0 = ws[i0]
        w1 = ws[i0 + 1]
        w2 = ws[i0 + sy]
        w3 = ws[i0 + sz]
        w4 = ws[i0 + 1 + sy]
        w5 = ws[i0 + sy + sz]
        w6 = ws[i0 + 1 + sz]
        w7 = ws[i0 + 1 + sy + sz]
        if (w0 <= 0.0 or w1 <= 0.0 or w2 <= 0.0 or w3 <= 0.0 or w4 <= 0.0 or w5 <= 0.0
                or w6 <= 0.0 or w7 <= 0.0):
            return False
        ds = dist[slot]
        g0 = ds[i0]
        g1 = ds[i0 + 1]
        g2 = ds[i0 + sy]
        g3 = ds[i0 + sz]
        g4 = ds[i0 + 1 + sy]
        g5 = ds[i0 + sy + sz]
        g6 = ds[i0 + 1 + sz]
        g7 = ds[i0 + 1 + sy + sz]
        return _trilinear_finish(g0, g1, g2, g3, g4, g5, g6, g7, w0, w1, w2, w3, w4, w5, w6,
                                 w7, dx, dy, dz, voxel_size, out)

    g0, w0 = voxel_sample(keys, vals, dist, weight, shift, x0, y0, z0, cache)
    if w0 <= 0.0:
        return False
    g1, w1 = voxel_sample(keys, vals, dist, weight, shift, x0 + 1, y0, z0, cache)
    if w1 <= 0.0:
        return False
    g2, w2 = voxel_sample(keys, vals, dist, weight, shift, x0, y0 + 1, z0, cache)
    if w2 <= 0.0:
        return False
    g3, w3 = voxel_sample(keys, vals, dist, weight, shift, x0, y0, z0 + 1, cache)
    if w3 <= 0.0:
        return False
    g4, w4 = voxel_sample(keys, vals, dist, weight, shift, x0 + 1, y0 + 1, z0, cache)
    if w4 <= 0.0:
        return False
    g5, w5 = voxel_sample(keys, vals, dist, weight, shift, x0, y0 + 1, z0 + 1, cache)
    if w5 <= 0.0:
        return False
    g6, w6 = voxel_sample(keys, vals, dist, weight, shift, x0 + 1, y0, z0 + 1, cache)
    if w6 <= 0.0:
        return False
    g7, w7 = voxel_sample(keys, vals, dist, weight, shift, x0 + 1, y0 + 1, z0 + 1, cache)
    if w7 <= 0.0:
        return False

    return _trilinear_finish(g0, g1, g2, g3, g4, g5, g6, g7, w0, w1, w2, w3, w4, w5, w6, w7,
                             dx, dy, dz, voxel_size, out)


@njit(cache=True, inline="always")
def _trilinear_finish(g0, g1, g2, g3, g4, g5, g6, g7, w0, w1, w2, w3, w4, w5, w6, w7,
                      dx, dy, dz, voxel_size, out):
    # coefficients B g of the monomial basis
    c0 = g0
    c1 = g1 - g0
    c2 = g2 - g0
    c3 = g3 - g0
    c4 = g4 - g1 - g2 + g0
    c5 = g5 - g2 - g3 + g0
    c6 = g6 - g1 - g3 + g0
    c7 = g7 - g4 - g5 - g6 + g1 + g2 + g3 - g0
    out[0] = (c0 + c1 * dx + c2 * dy + c3 * dz + c4 * dx * dy + c5 * dy * dz
              + c6 * dz * dx + c7 * dx * dy * dz)
    out[1] = (c1 + c4 * dy + c6 * dz + c7 * dy * dz) / voxel_size
    out[2] = (c2 + c4 * dx + c5 * dz + c7 * dx * dz) / voxel_size
    out[3] = (c3 + c5 * dy + c6 * dx + c7 * dx * dy) / voxel_size

    a0 = w0
    a1 = w1 - w0
    a2 = w2 - w0
    a3 = w3 - w0
    a4 = w4 - w1 - w2 + w0
    a5 = w5 - w2 - w3 + w0
    a6 = w6 - w1 - w3 + w0
    a7 = w7 - w4 - w5 - w6 + w1 + w2 + w3 - w0
    out[4] = (a0 + a1 * dx + a2 * dy + a3 * dz + a4 * dx * dy + a5 * dy * dz
              + a6 * dz * dx + a7 * dx * dy * dz)
    return True


@njit(cache=True)
def trilinear_partial(keys, vals, dist, weight, shift, voxel_size, px, py, pz, cache,
                      min_coverage, out):
    """Trilinear lookup that tolerates unobserved corners.

    Corner contributions are renormalised over the observed ones; the lookup
    fails when their summed trilinear coefficient is below ``min_coverage``.
    Writes (value, weight) into ``out``.
    """
    ux = px / voxel_size - 0.5
    uy = py / voxel_size - 0.5
    uz = pz / voxel_size - 0.5
    fx = math.floor(ux)
    fy = math.floor(uy)
    fz = math.floor(uz)
    x0, y0, z0 = np.int64(fx), np.int64(fy), np.int64(fz)
    dx, dy, dz = ux - fx, uy - fy, uz - fz
    acc_d = 0.0
    acc_w = 0.0
    cover = 0.0
    bmask = (1 << shift) - 1
    one_block = (x0 & bmask) != bmask and (y0 & bmask) != bmask and (z0 & bmask) != bmask
    slot = -1
    i0 = 0
    if one_block:
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
        i0 = (x0 & bmask) + (bmask + 1) * ((y0 & bmask) + (bmask + 1) * (z0 & bmask))
    bs = bmask + 1
    for ox in range(2):
        cx = dx if ox == 1 else 1.0 - dx
        for oy in range(2):
            cy = dy if oy == 1 else 1.0 - dy
            for oz in range(2):
                cz = dz if oz == 1 else 1.0 - dz
                coef = cx * cy * cz
                if coef <= 0.0:
                    continue
                if one_block:
                    lin = i0 + ox + bs * (oy + bs * oz)
                    d, wt = dist[slot, lin], weight[slot, lin]
                else:
                    d, wt = voxel_sample(keys, vals, dist, weight, shift,
                                         x0 + ox, y0 + oy, z0 + oz, cache)
                if wt <= 0.0:
                    continue
                acc_d += coef * d
                acc_w += coef * wt
                cover += coef
    if cover < min_coverage or cover <= 0.0:
        return False
    out[0] = acc_d / cover
    out[1] = acc_w / cover
    return True


@njit(cache=True)
def _interpolate_many(keys, vals, dist, weight, shift, voxel_size, points,
                      values, grads, weights, valid):
    cache = np.full(4, -2, dtype=np.int64)
    out = np.empty(5)
    for m in range(points.shape[0]):
        ok = trilinear(keys, vals, dist, weight, shift, voxel_size,
                       points[m, 0], points[m, 1], points[m, 2], cache, out)
        valid[m] = ok
        if ok:
            values[m] = out[0]
            grads[m, 0] = out[1]
            grads[m, 1] = out[2]
            grads[m, 2] = out[3]
            weights[m] = out[4]


@njit(cache=True)
def _interpolate_partial_many(keys, vals, dist, weight, shift, voxel_size, points,
                              min_coverage, values, weights, valid):
    cache = np.full(4, -2, dtype=np.int64)
    out = np.empty(2)
    for m in range(points.shape[0]):
        ok = trilinear_partial(keys, vals, dist, weight, shift, voxel_size,
                               points[m, 0], points[m, 1], points[m, 2], cache,
                               min_coverage, out)
        valid[m] = ok
        if ok:
            values[m] = out[0]
            weights[m] = out[1]


# --------------------------------------------------------------------------


def point_to_voxel_index(p, voxel_size):
    """Integer index of the voxel containing ``p`` (componentwise floor)."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    return np.floor(np.asarray(p, dtype=float) / voxel_size).astype(np.int64)


def voxel_center(index, voxel_size):
    return (np.asarray(index, dtype=float) + 0.5) * voxel_size


class Block:
    """View onto one allocated block; arrays are indexed ``[x, y, z]``."""

    def __init__(self, grid, slot):
        self.block_index = tuple(int(c) for c in grid._coords[slot])
        B = grid.block_size
        self.distance = grid._dist[slot].reshape((B, B, B), order="F")
        self.weight = grid._weight[slot].reshape((B, B, B), order="F")

    def __repr__(self):
        return f"Block({self.block_index})"


class VoxelGrid:
    """Spatially hashed grid of ``block_size**3`` voxel blocks.

    For TSDF grids ``weight`` is the fusion weight; for ESDF grids it is 1.0
    for observed voxels and 0.0 otherwise.
    """

    def __init__(self, voxel_size, kind=TSDF, block_size=DEFAULT_BLOCK_SIZE,
                 default_distance=0.0, initial_blocks=64):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if kind not in _KIND_TAGS:
            raise ValueError(f"unknown voxel kind {kind!r}")
        if block_size < 1 or block_size & (block_size - 1):
            raise ValueError("block_size must be a power of two")
        self.voxel_size = float(voxel_size)
        self.kind = kind
        self.block_size = int(block_size)
        self.block_shift = int(block_size).bit_length() - 1
        self.default_distance = float(default_distance)
        self._frozen = False
        self._counter = np.zeros(1, dtype=np.int64)
        self._alloc(max(int(initial_blocks), 1))

    # -- storage -----------------------------------------------------------

    def _alloc(self, capacity):
        nvox = self.block_size**3
        n = int(self._counter[0])
        coords = np.zeros((capacity, 3), dtype=np.int64)
        dist = np.empty((capacity, nvox), dtype=np.float64)
        weight = np.empty((capacity, nvox), dtype=np.float64)
        if n:
            coords[:n] = self._coords[:n]
            dist[:n] = self._dist[:n]
            weight[:n] = self._weight[:n]
        table = 1 << max(4, (2 * capacity - 1).bit_length())
        self._coords, self._dist, self._weight = coords, dist, weight
        self._keys = np.full(table, _EMPTY, dtype=np.int64)
        self._vals = np.full(table, -1, dtype=np.int64)
        _rebuild_table(self._keys, self._vals, self._coords, n)

    def reserve(self, extra_blocks):
        need = int(self._counter[0]) + int(extra_blocks)
        if need > self._coords.shape[0]:
            self._alloc(max(need, 2 * self._coords.shape[0]))

    def grow(self):
        self._alloc(2 * self._coords.shape[0])

    def kernel_args(self):
        """Arrays handed to numba kernels: (keys, vals, dist, weight, shift)."""
        n = int(self._counter[0])
        return self._keys, self._vals, self._dist[:max(n, 1)], self._weight[:max(n, 1)], self.block_shift

    def writable_args(self):
        return (self._keys, self._vals, self._coords, self._dist, self._weight,
                self._counter)

    # -- lifecycle ---------------------------------------------------------

    @property
    def frozen(self):
        return self._frozen

    def freeze(self):
        self._frozen = True
        n = int(self._counter[0])
        # trim spare capacity once the grid stops growing
        if n and n < self._coords.shape[0]:
            self._alloc(n)

    def check_writable(self):
        if self._frozen:
            raise FrozenSubmap("grid is frozen")

    # -- block access ------------------------------------------------------

    @property
    def num_blocks(self):
        return int(self._counter[0])

    def __len__(self):
        return self.num_blocks

    def block_indices(self):
        return self._coords[: self.num_blocks].copy()

    def _slot(self, block_index):
        bx, by, bz = (int(c) for c in block_index)
        return int(find_slot(self._keys, self._vals, block_key(bx, by, bz)))

    def has_block(self, block_index):
        return self._slot(block_index) >= 0

    def __contains__(self, block_index):
        return self.has_block(block_index)

    def get_block(self, block_index):
        slot = self._slot(block_index)
        if slot < 0:
            raise KeyError(tuple(block_index))
        return Block(self, slot)

    def __iter__(self):
        for slot in range(self.num_blocks):
            yield Block(self, slot)

    def allocate_block(self, block_index):
        self.check_writable()
        self.reserve(1)
        bx, by, bz = (int(c) for c in block_index)
        slot = allocate_block(self._keys, self._vals, self._coords, self._dist,
                              self._weight, self._counter, bx, by, bz,
                              self.default_distance)
        return Block(self, int(slot))

    # -- voxel access ------------------------------------------------------

    def lookup(self, indices):
        """Vectorised voxel read.

        Returns:
            (distance, weight, found) arrays; ``found`` is False where the
            containing block is not allocated.
        """
        idx = np.ascontiguousarray(np.atleast_2d(indices), dtype=np.int64)
        m = idx.shape[0]
        d = np.zeros(m)
        w = np.zeros(m)
        found = np.zeros(m, dtype=bool)
        if self.num_blocks:
            keys, vals, dist, weight, shift = self.kernel_args()
            _lookup_many(keys, vals, dist, weight, shift, idx, d, w, found)
        return d, w, found

    def voxel(self, index):
        d, w, found = self.lookup(np.asarray(index)[None])
        if not found[0]:
            d[0], w[0] = self.default_distance, 0.0
        if self.kind == ESDF:
            return EsdfVoxel(float(d[0]), bool(w[0] > 0))
        return TsdfVoxel(float(d[0]), float(w[0]))

    def set_voxels(self, indices, distances, weights):
        """Write voxels, allocating their blocks as needed."""
        self.check_writable()
        idx = np.ascontiguousarray(np.atleast_2d(indices), dtype=np.int64)
        d = np.ascontiguousarray(np.broadcast_to(distances, (idx.shape[0],)), dtype=float)
        w = np.ascontiguousarray(np.broadcast_to(weights, (idx.shape[0],)), dtype=float)
        start = 0
        while start < idx.shape[0]:
            done = _assign_many(self._keys, self._vals, self._coords, self._dist,
                                self._weight, self._counter, self.block_shift,
                                self.default_distance, idx[start:], d[start:], w[start:])
            start += int(done)
            if start < idx.shape[0]:
                self.grow()

    def observed_voxels(self):
        """Indices, distances and weights of every voxel with weight > 0."""
        n = self.num_blocks
        B = self.block_size
        if n == 0:
            return np.zeros((0, 3), np.int64), np.zeros(0), np.zeros(0)
        w = self._weight[:n]
        slot, lin = np.nonzero(w > 0)
        local = np.stack([lin % B, (lin // B) % B, lin // (B * B)], axis=1)
        idx = self._coords[slot] * B + local
        return idx, self._dist[:n][slot, lin].copy(), w[slot, lin].copy()

    def num_observed(self):
        n = self.num_blocks
        return int(np.count_nonzero(self._weight[:n] > 0)) if n else 0

    def to_dense(self, pad=0):
        """Dense copy over the bounding box of allocated blocks.

        Returns:
            (origin_index, distance, weight, allocated) with arrays indexed
            ``[x, y, z]`` relative to ``origin_index``.
        """
        n = self.num_blocks
        if n == 0:
            raise EmptyMap("no allocated blocks")
        B = self.block_size
        coords = self._coords[:n]
        lo = coords.min(axis=0) * B - pad
        hi = (coords.max(axis=0) + 1) * B + pad
        shape = tuple(int(s) for s in hi - lo)
        dist = np.full(shape, self.default_distance)
        weight = np.zeros(shape)
        allocated = np.zeros(shape, dtype=bool)
        for s in range(n):
            o = coords[s] * B - lo
            sl = (slice(o[0], o[0] + B), slice(o[1], o[1] + B), slice(o[2], o[2] + B))
            dist[sl] = self._dist[s].reshape((B, B, B), order="F")
            weight[sl] = self._weight[s].reshape((B, B, B), order="F")
            allocated[sl] = True
        return lo, dist, weight, allocated

    def copy(self):
        out = VoxelGrid(self.voxel_size, self.kind, self.block_size,
                        self.default_distance, initial_blocks=max(self.num_blocks, 1))
        n = self.num_blocks
        out._counter[0] = 0
        out._alloc(max(n, 1))
        out._coords[:n] = self._coords[:n]
        out._dist[:n] = self._dist[:n]
        out._weight[:n] = self._weight[:n]
        out._counter[0] = n
        _rebuild_table(out._keys, out._vals, out._coords, n)
        return out

    def __repr__(self):
        state = "frozen" if self._frozen else "mutable"
        return (f"VoxelGrid(kind={self.kind}, voxel_size={self.voxel_size}, "
                f"blocks={self.num_blocks}, {state})")


def interpolate(grid, p):
    """Trilinear value, analytic gradient and weight of ``grid`` at ``p``.

    Raises:
        UnobservedRegion: if any of the 8 neighbouring voxels is missing or
            unobserved.
    """
    values, grads, weights, valid = interpolate_many(grid, np.asarray(p, dtype=float)[None])
    if not valid[0]:
        raise UnobservedRegion(f"point {tuple(np.asarray(p))} touches unobserved voxels")
    return InterpolationResult(float(values[0]), grads[0], float(weights[0]))


def interpolate_many(grid, points):
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
    m = pts.shape[0]
    values = np.zeros(m)
    grads = np.zeros((m, 3))
    weights = np.zeros(m)
    valid = np.zeros(m, dtype=bool)
    if grid.num_blocks:
        keys, vals, dist, weight, shift = grid.kernel_args()
        _interpolate_many(keys, vals, dist, weight, shift, grid.voxel_size, pts,
                          values, grads, weights, valid)
    return values, grads, weights, valid


def interpolate_partial_many(grid, points, min_coverage=0.5):
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
    m = pts.shape[0]
    values = np.zeros(m)
    weights = np.zeros(m)
    valid = np.zeros(m, dtype=bool)
    if grid.num_blocks:
        keys, vals, dist, weight, shift = grid.kernel_args()
        _interpolate_partial_many(keys, vals, dist, weight, shift, grid.voxel_size,
                                  pts, float(min_coverage), values, weights, valid)
    return values, weights, valid


# --------------------------------------------------------------------------
# binary serialization

_HEADER = struct.Struct("<dII")
_BLOCK_INDEX = struct.Struct("<3i")


def write_grid(grid, fh):
    """Little-endian: header (voxel_size f64, B u32, kind u32) then per block
    three int32 block coordinates and B^3 (f32 distance, f32 weight) pairs in
    x-fastest order."""
    fh.write(_HEADER.pack(grid.voxel_size, grid.block_size, _KIND_TAGS[grid.kind]))
    nvox = grid.block_size**3
    pair = np.empty(nvox, dtype=[("d", "<f4"), ("w", "<f4")])
    for s in range(grid.num_blocks):
        fh.write(_BLOCK_INDEX.pack(*(int(c) for c in grid._coords[s])))
        pair["d"] = grid._dist[s]
        pair["w"] = grid._weight[s]
        fh.write(pair.tobytes())


def read_grid(fh, default_distance=0.0):
    header = fh.read(_HEADER.size)
    if len(header) != _HEADER.size:
        raise ValueError("truncated grid header")
    voxel_size, B, tag = _HEADER.unpack(header)
    kinds = {v: k for k, v in _KIND_TAGS.items()}
    if tag not in kinds:
        raise ValueError(f"unknown voxel kind tag {tag}")
    nvox = B**3
    payload = fh.read()
    rec = _BLOCK_INDEX.size + 8 * nvox
    if len(payload) % rec:
        raise ValueError("truncated grid payload")
    nblocks = len(payload) // rec
    grid = VoxelGrid(voxel_size, kinds[tag], B, default_distance,
                     initial_blocks=max(nblocks, 1))
    dtype = np.dtype([("b", "<i4", 3), ("v", [("d", "<f4"), ("w", "<f4")], nvox)])
    blocks = np.frombuffer(payload, dtype=dtype, count=nblocks)
    if nblocks:
        grid._coords[:nblocks] = blocks["b"]
        grid._dist[:nblocks] = blocks["v"]["d"]
        grid._weight[:nblocks] = blocks["v"]["w"]
        grid._counter[0] = nblocks
        _rebuild_table(grid._keys, grid._vals, grid._coords, nblocks)
    return grid


def save_grid(grid, path):
    with open(path, "wb") as fh:
        write_grid(grid, fh)


def load_grid(path, default_distance=0.0):
    with open(path, "rb") as fh:
        return read_grid(fh, default_distance)
