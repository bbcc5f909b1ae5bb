"""Hard and dynamic voxelization of accumulated point clouds.

Both produce a 4-channel sparse tensor: per-voxel mean of the spatial
coordinates and max of the sweep offset. Hard voxelization caps the number
of points per voxel with a seeded random rejection; dynamic keeps every
point. The reduction itself runs over a canonical point ordering, so the
output never depends on the input point order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .scenesim import AccumulatedCloud


@dataclass(frozen=True)
class VoxelGridSpec:
    origin: tuple[float, float, float]
    voxel_size: tuple[float, float, float]
    grid_dims: tuple[int, int, int]

    def __post_init__(self):
        if any(v <= 0 for v in self.voxel_size):
            raise ValueError("voxel_size components must be > 0")
        if any(d <= 0 for d in self.grid_dims):
            raise ValueError("grid_dims components must be > 0")


@dataclass
class SparseVoxelTensor:
    """Active voxel coordinates plus per-voxel feature vectors.

    ``features`` is a plain ndarray on module boundaries; the encoder swaps
    in autodiff Vars internally. ``dims`` are the grid dims at this stride.
    """

    coords: np.ndarray  # (N, 3) int64
    features: object    # (N, C) ndarray or autodiff.Var
    stride: int
    dims: tuple[int, int, int]
    metadata: dict = field(default_factory=dict)

    @property
    def feature_array(self) -> np.ndarray:
        f = self.features
        return f.value if hasattr(f, "value") else f

    @property
    def num_active(self) -> int:
        return len(self.coords)

    @property
    def channel_count(self) -> int:
        return self.feature_array.shape[1]

    def validate(self) -> None:
        coords = self.coords
        feats = self.feature_array
        if len(coords) != len(feats):
            raise ValueError("coords/features length mismatch")
        if len(coords):
            lin = _linear_index(coords, self.dims)
            if len(np.unique(lin)) != len(lin):
                raise ValueError("duplicate active sites")
            if coords.min() < 0 or (coords >= np.asarray(self.dims)).any():
                raise ValueError("coords outside grid dims")


def _linear_index(coords: np.ndarray, dims) -> np.ndarray:
    return (coords[:, 0] * dims[1] + coords[:, 1]) * dims[2] + coords[:, 2]


def _assign(cloud_pts: np.ndarray, grid: VoxelGridSpec):
    """Voxel index per point plus the in-bounds mask (half-open cells)."""
    origin = np.asarray(grid.origin)
    vs = np.asarray(grid.voxel_size)
    idx = np.floor((cloud_pts[:, :3] - origin) / vs).astype(np.int64)
    dims = np.asarray(grid.grid_dims)
    inside = ((idx >= 0) & (idx < dims)).all(axis=1)
    return idx, inside


def _canonical_order(idx_lin: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sort points by (voxel, x, y, z, dt) so reductions are order-free."""
    return np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], idx_lin))


def _reduce(pts: np.ndarray, idx: np.ndarray, grid: VoxelGridSpec,
            dropped: int) -> SparseVoxelTensor:
    """Group-by-voxel reduce: mean over x/y/z, max over delta_t."""
    dims = grid.grid_dims
    meta = {"dropped_points": dropped, "grid_origin": tuple(grid.origin),
            "grid_voxel": tuple(grid.voxel_size)}
    if len(pts) == 0:
        return SparseVoxelTensor(coords=np.empty((0, 3), dtype=np.int64),
                                 features=np.empty((0, 4)), stride=1, dims=dims,
                                 metadata=meta)
    lin = _linear_index(idx, dims)
    order = _canonical_order(lin, pts)
    lin = lin[order]
    pts = pts[order]
    idx = idx[order]
    starts = np.flatnonzero(np.r_[True, lin[1:] != lin[:-1]])
    bounds = np.r_[starts, len(lin)]
    counts = np.diff(bounds)
    sums = np.add.reduceat(pts[:, :3], starts, axis=0)
    means = sums / counts[:, None]
    max_dt = np.maximum.reduceat(pts[:, 3], starts)
    feats = np.hstack([means, max_dt[:, None]])
    return SparseVoxelTensor(coords=idx[starts], features=feats, stride=1,
                             dims=dims, metadata=meta)


def dynamic_voxelize(cloud: AccumulatedCloud, grid: VoxelGridSpec) -> SparseVoxelTensor:
    """Every in-bounds point contributes; feature = (mean xyz, max dt)."""
    pts = cloud.points
    idx, inside = _assign(pts, grid)
    dropped = int(len(pts) - inside.sum())
    return _reduce(pts[inside], idx[inside], grid, dropped)


def hard_voxelize(cloud: AccumulatedCloud, grid: VoxelGridSpec,
                  max_points_per_voxel: Optional[int], seed: int = 0) -> SparseVoxelTensor:
    """Cap points per voxel with seeded uniform rejection, then reduce.

    max_points_per_voxel=None is the no-cap sentinel; the result is then
    bitwise identical to dynamic_voxelize.
    """
    if max_points_per_voxel is not None and max_points_per_voxel < 1:
        raise ValueError("max_points_per_voxel must be >= 1")
    pts = cloud.points
    idx, inside = _assign(pts, grid)
    dropped = int(len(pts) - inside.sum())
    pts = pts[inside]
    idx = idx[inside]
    if max_points_per_voxel is not None and len(pts):
        lin = _linear_index(idx, grid.grid_dims)
        rng = np.random.default_rng(seed)
        priority = rng.random(len(pts))
        order = np.lexsort((priority, lin))
        sorted_lin = lin[order]
        starts = np.flatnonzero(np.r_[True, sorted_lin[1:] != sorted_lin[:-1]])
        group_of = np.cumsum(np.r_[0, sorted_lin[1:] != sorted_lin[:-1]])
        rank = np.arange(len(pts)) - starts[group_of]
        kept = order[rank < max_points_per_voxel]
        pts = pts[kept]
        idx = idx[kept]
    out = _reduce(pts, idx, grid, dropped)
    out.metadata["kept_points"] = len(pts)
    return out
