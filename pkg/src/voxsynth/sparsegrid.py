"""Sparse voxel sets, vertex lattices, and sparse convolutions.

Coordinates are int64 triples on a lattice of the given stride; a set's coords
are always unique and lexicographically sorted, which makes every operation
here deterministic. Convolutions are expressed as precomputed gather plans
plus dense matmuls so they run fast in numpy and differentiate through the
tape (missing neighbors gather an implicit zero row).

Kernel weight layout is (size^3, c_in, c_out) with offsets enumerated
lexicographically: {-1,0,1}^3 for size 3, {0,1}^3 for size 2.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GatherPlan, Var
from .core import PointCloud, grid_origin, world_to_voxel

_COORD_BOUND = 1 << 20
_B = np.int64(_COORD_BOUND)

OFFSETS3 = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
OFFSETS2 = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Bijective int64 key for coords in (-2^20, 2^20); key order = lex order."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if c.size and (c.min() <= -_COORD_BOUND or c.max() >= _COORD_BOUND):
        raise ValueError("voxel coordinates exceed the +-2^20 bound")
    return ((c[:, 0] + _B) << 42) | ((c[:, 1] + _B) << 21) | (c[:, 2] + _B)


def rows_of(sorted_keys: np.ndarray, query_keys: np.ndarray) -> np.ndarray:
    """Row index of each query key in a sorted key table, -1 where absent."""
    pos = np.searchsorted(sorted_keys, query_keys)
    pos = np.minimum(pos, max(len(sorted_keys) - 1, 0))
    if len(sorted_keys) == 0:
        return np.full(query_keys.shape, -1, dtype=np.int64)
    hit = sorted_keys[pos] == query_keys
    return np.where(hit, pos, -1)


def _canonical(coords: np.ndarray):
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    keys = pack_coords(coords)
    keys, first = np.unique(keys, return_index=True)
    return coords[first], keys


@dataclass(frozen=True)
class SparseVoxelSet:
    """Occupied cells of a lattice; stride counts finest cells per cell edge."""

    coords: np.ndarray      # (N, 3) int64, unique, lex-sorted
    voxel_size: float
    origin: np.ndarray      # (3,) world position of lattice point (0,0,0)
    stride: int = 1

    def __post_init__(self):
        coords, keys = _canonical(self.coords)
        origin = np.ascontiguousarray(self.origin, dtype=np.float64)
        if origin.shape != (3,):
            raise ValueError("origin must be a 3-vector")
        if self.voxel_size <= 0 or self.stride < 1:
            raise ValueError("voxel_size must be positive and stride >= 1")
        coords.flags.writeable = False
        keys.flags.writeable = False
        origin.flags.writeable = False
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "_keys", keys)

    @property
    def keys(self) -> np.ndarray:
        return self._keys

    def __len__(self) -> int:
        return self.coords.shape[0]

    def cell_size(self) -> float:
        return self.voxel_size * self.stride

    def contains(self, coords: np.ndarray) -> np.ndarray:
        return rows_of(self.keys, pack_coords(coords)) >= 0

    def _check_compatible(self, other: "SparseVoxelSet"):
        if (self.stride != other.stride or self.voxel_size != other.voxel_size
                or not np.array_equal(self.origin, other.origin)):
            raise ValueError("voxel sets live on different lattices")

    def _replace_coords(self, coords) -> "SparseVoxelSet":
        return SparseVoxelSet(coords, self.voxel_size, self.origin, self.stride)

    def union(self, other: "SparseVoxelSet") -> "SparseVoxelSet":
        self._check_compatible(other)
        return self._replace_coords(np.concatenate([self.coords, other.coords]))

    def intersection(self, other: "SparseVoxelSet") -> "SparseVoxelSet":
        self._check_compatible(other)
        return self._replace_coords(self.coords[other.contains(self.coords)])

    def difference(self, other: "SparseVoxelSet") -> "SparseVoxelSet":
        self._check_compatible(other)
        return self._replace_coords(self.coords[~other.contains(self.coords)])

    def issubset(self, other: "SparseVoxelSet") -> bool:
        self._check_compatible(other)
        return bool(np.all(other.contains(self.coords)))

    def same_cells(self, other: "SparseVoxelSet") -> bool:
        self._check_compatible(other)
        return len(self) == len(other) and bool(np.all(self.keys == other.keys))

    def coarsened(self) -> "SparseVoxelSet":
        """Parent lattice: a coarse cell is occupied if any child is."""
        return SparseVoxelSet(self.coords >> 1, self.voxel_size, self.origin,
                              self.stride * 2)


def iou(a: SparseVoxelSet, b: SparseVoxelSet) -> float:
    """Intersection over union of two voxel sets on the same lattice."""
    inter = len(a.intersection(b))
    union = len(a) + len(b) - inter
    return inter / union if union else 1.0


@dataclass(frozen=True)
class SparseFeatureGrid(SparseVoxelSet):
    """Voxel set with a row-aligned float64 feature per cell.

    kind is "voxel" (features live at cell centers) or "vertex" (features live
    at lattice points, i.e. cell corners of the voxel grid one level below).
    """

    features: np.ndarray = None  # (N, C)
    kind: str = "voxel"

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
            raise ValueError("features must be (N, C) aligned with coords")
        if self.kind not in ("voxel", "vertex"):
            raise ValueError("kind must be 'voxel' or 'vertex'")
        keys = pack_coords(coords)
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        if np.any(keys[1:] == keys[:-1]):
            raise ValueError("duplicate coordinates in feature grid")
        coords = coords[order]
        feats = feats[order]
        for a in (coords, feats):
            a.flags.writeable = False
        origin = np.ascontiguousarray(self.origin, dtype=np.float64)
        origin.flags.writeable = False
        keys.flags.writeable = False
        if self.voxel_size <= 0 or self.stride < 1:
            raise ValueError("voxel_size must be positive and stride >= 1")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "_keys", keys)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def occupancy(self) -> SparseVoxelSet:
        return SparseVoxelSet(self.coords, self.voxel_size, self.origin, self.stride)


# -- convolution plans ---------------------------------------------------------


@dataclass(frozen=True)
class ConvPlan:
    """Gather-then-matmul recipe shared by stride-1 and downsampling convs."""

    out_coords: np.ndarray
    gplan: GatherPlan       # (M, k^3) rows into the input grid
    kernel_volume: int
    out_stride_factor: int  # 1 for stride-1 modes, 2 for downsampling

    def apply(self, x: Var, w: Var, b: Var) -> Var:
        kv, cin, cout = w.shape
        if kv != self.kernel_volume:
            raise ValueError("kernel volume does not match plan")
        patches = ad.gather(x, self.gplan).reshape(len(self.out_coords), kv * cin)
        return patches @ w.reshape(kv * cin, cout) + b

    def apply_np(self, x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        kv, cin, cout = w.shape
        m = len(self.out_coords)
        return self.gplan.take(x).reshape(m, kv * cin) @ w.reshape(kv * cin, cout) + b


@dataclass(frozen=True)
class UpsamplePlan:
    """Generative transposed conv: every input cell emits its 8 children."""

    out_coords: np.ndarray  # (8N, 3) on the finer lattice, lex-sorted
    perm: GatherPlan        # sorts the delta-major stack of children
    n_in: int

    def apply(self, x: Var, w: Var, b: Var) -> Var:
        parts = [x @ w[d] for d in range(8)]
        return ad.gather(ad.concat(parts, axis=0), self.perm) + b

    def apply_np(self, x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        stacked = np.concatenate([x @ w[d] for d in range(8)], axis=0)
        return stacked[self.perm.idx] + b


def plan_stride1(coords: np.ndarray, dilate: bool = False) -> ConvPlan:
    """Kernel-3 stride-1 plan; dilate grows output coords by Chebyshev radius 1."""
    coords, keys = _canonical(coords)
    if dilate:
        grown = (coords[:, None, :] + OFFSETS3[None, :, :]).reshape(-1, 3)
        out_coords, _ = _canonical(grown)
    else:
        out_coords = coords
    nbr = (out_coords[:, None, :] + OFFSETS3[None, :, :]).reshape(-1, 3)
    idx = rows_of(keys, pack_coords(nbr)).reshape(len(out_coords), 27)
    return ConvPlan(out_coords, GatherPlan(idx, len(coords)), 27, 1)


def plan_downsample(coords: np.ndarray) -> ConvPlan:
    """Kernel-2 stride-2 plan; out coord q pools children 2q + {0,1}^3."""
    coords, keys = _canonical(coords)
    out_coords, _ = _canonical(coords >> 1)
    child = (2 * out_coords[:, None, :] + OFFSETS2[None, :, :]).reshape(-1, 3)
    idx = rows_of(keys, pack_coords(child)).reshape(len(out_coords), 8)
    return ConvPlan(out_coords, GatherPlan(idx, len(coords)), 8, 2)


def plan_upsample(coords: np.ndarray) -> UpsamplePlan:
    """Children 2c + {0,1}^3 in delta-major stacking, plus the sorting permutation."""
    coords, _ = _canonical(coords)
    n = len(coords)
    children = np.concatenate([2 * coords + d for d in OFFSETS2], axis=0)
    order = np.argsort(pack_coords(children), kind="stable")
    return UpsamplePlan(children[order], GatherPlan(order, 8 * n), n)


# -- public grid ops -----------------------------------------------------------


def sparse_conv(grid: SparseFeatureGrid, weights: np.ndarray, bias: np.ndarray,
                stride: int = 1, dilate: bool = False) -> SparseFeatureGrid:
    """Sparse convolution over a feature grid.

    stride 1 takes a kernel-3 weight block (27, c_in, c_out); dilate=False is
    submanifold (output coords = input coords), dilate=True grows coords by
    one cell in Chebyshev distance. stride 2 takes a kernel-2 block
    (8, c_in, c_out), halves the lattice (coords floor-divided), and doubles
    the grid stride; dilate is not defined for it.
    """
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 3 or weights.shape[1] != grid.channels:
        raise ValueError("weights must be (k^3, c_in, c_out) matching the grid")
    if stride == 1:
        if weights.shape[0] != 27:
            raise ValueError("stride-1 convolution requires a kernel of size 3")
        plan = plan_stride1(grid.coords, dilate=dilate)
        out_stride = grid.stride
    elif stride == 2:
        if dilate:
            raise ValueError("dilate is not defined for the downsampling convolution")
        if weights.shape[0] != 8:
            raise ValueError("stride-2 convolution requires a kernel of size 2")
        plan = plan_downsample(grid.coords)
        out_stride = grid.stride * 2
    else:
        raise ValueError("stride must be 1 or 2")
    feats = plan.apply_np(grid.features, weights, bias)
    return SparseFeatureGrid(plan.out_coords, grid.voxel_size, grid.origin,
                             out_stride, feats, grid.kind)


def generative_transposed_conv(grid: SparseFeatureGrid, weights: np.ndarray,
                               bias: np.ndarray) -> SparseFeatureGrid:
    """Kernel-2 transposed conv: each cell generates its 8 children, stride halves."""
    if grid.stride < 2:
        raise ValueError("cannot upsample a stride-1 grid")
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.shape[:2] != (8, grid.channels):
        raise ValueError("weights must be (8, c_in, c_out) matching the grid")
    plan = plan_upsample(grid.coords)
    feats = plan.apply_np(grid.features, weights, bias)
    return SparseFeatureGrid(plan.out_coords, grid.voxel_size, grid.origin,
                             grid.stride // 2, feats, grid.kind)


def prune(grid: SparseFeatureGrid, logits: np.ndarray, threshold: float = 0.5,
          force_keep: np.ndarray | None = None):
    """Drop cells whose predicted occupancy sigmoid(logit) <= threshold.

    force_keep is a boolean row mask that wins over the prediction. Returns
    (pruned grid, kept row indices into the input grid).
    """
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if logits.shape[0] != len(grid):
        raise ValueError("need one logit per cell")
    keep = 1.0 / (1.0 + np.exp(-logits)) > threshold
    if force_keep is not None:
        keep = keep | np.asarray(force_keep, dtype=bool)
    kept = np.nonzero(keep)[0]
    out = SparseFeatureGrid(grid.coords[kept], grid.voxel_size, grid.origin,
                            grid.stride, grid.features[kept], grid.kind)
    return out, kept


def voxelize(cloud: PointCloud, voxel_size: float,
             origin: np.ndarray | None = None) -> SparseFeatureGrid:
    """Point cloud to voxel grid carrying the mean color of the points per cell."""
    if len(cloud) == 0:
        raise ValueError("cannot voxelize an empty cloud")
    if origin is None:
        origin = grid_origin(cloud.positions, voxel_size)
    coords, colors, _ = voxelize_stats(cloud, voxel_size, origin)
    return SparseFeatureGrid(coords, voxel_size, origin, 1, colors, "voxel")


def voxelize_stats(cloud: PointCloud, voxel_size: float, origin: np.ndarray):
    """(coords, mean colors, point counts) per occupied cell, lex-sorted."""
    cell = world_to_voxel(cloud.positions, origin, voxel_size)
    keys = pack_coords(cell)
    uniq, first, inverse, counts = np.unique(
        keys, return_index=True, return_inverse=True, return_counts=True)
    sums = np.zeros((len(uniq), 3))
    for c in range(3):
        sums[:, c] = np.bincount(inverse, weights=cloud.colors[:, c], minlength=len(uniq))
    return cell[first], sums / counts[:, None], counts


def vertex_set(occupied: SparseVoxelSet) -> SparseVoxelSet:
    """Lattice points touching any occupied cell (the 8 corners, deduplicated)."""
    corners = (occupied.coords[:, None, :] + OFFSETS2[None, :, :]).reshape(-1, 3)
    return SparseVoxelSet(corners, occupied.voxel_size, occupied.origin, occupied.stride)


def corner_weights(points: np.ndarray, cells: np.ndarray, origin: np.ndarray,
                   voxel_size: float):
    """Trilinear corner coords and weights for points inside given cells.

    Returns (corners (N, 8, 3) lattice points, weights (N, 8) summing to 1).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    frac = (points - origin) / voxel_size - cells
    if frac.size and (frac.min() < -1e-9 or frac.max() > 1 + 1e-9):
        raise ValueError("point lies outside its voxel")
    frac = np.clip(frac, 0.0, 1.0)
    corners = cells[:, None, :] + OFFSETS2[None, :, :]
    axis_w = np.where(OFFSETS2[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    return corners, axis_w.prod(axis=2)


def gather_corner_features(grid: SparseFeatureGrid, points: np.ndarray,
                           cells: np.ndarray | None = None):
    """Trilinear interpolation of vertex features at world points.

    Vertices absent from the grid contribute a zero feature; the per-point
    flag in the second return marks points that touched a missing vertex.
    Points whose cell has no corner in the grid at all are rejected.
    """
    if grid.kind != "vertex":
        raise ValueError("corner gathering needs a vertex grid")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if cells is None:
        cells = world_to_voxel(points, grid.origin, grid.voxel_size)
    corners, w = corner_weights(points, cells, grid.origin, grid.voxel_size)
    rows = rows_of(grid.keys, pack_coords(corners)).reshape(len(points), 8)
    if np.any(np.all(rows < 0, axis=1)):
        raise ValueError("point lies outside the supported lattice")
    feats = np.concatenate([grid.features, np.zeros((1, grid.channels))])
    vals = feats[np.where(rows >= 0, rows, len(grid))]
    return (w[:, :, None] * vals).sum(axis=1), np.any(rows < 0, axis=1)
