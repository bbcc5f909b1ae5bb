"""Synthetic multi-sweep LiDAR scenes: ray casting, ego-pose alignment,
sweep accumulation, and BEV ground-truth labels.

A scene is a flat ground patch plus a handful of axis-aligned boxes. The
sensor moves along a per-sweep trajectory; each sweep is cast with first-hit
semantics so occlusion holds by construction. All randomness is derived from
the scene seed, so every operation is a pure function of (spec, seed).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

CLOUD_HEADER = "voxelprune-cloud v1"


class MalformedSampleError(ValueError):
    """Raised when a sweep set has no current (delta_t = 0) sweep."""


# ---------------------------------------------------------------------------
# rigid transforms


@dataclass(frozen=True)
class RigidTransform:
    """4x4 homogeneous transform split into rotation and translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if not math.isclose(float(np.linalg.det(r)), 1.0, abs_tol=1e-9):
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_yaw(yaw: float, translation: Sequence[float]) -> "RigidTransform":
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return RigidTransform(rot, np.asarray(translation, dtype=np.float64))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self o other)(x) = self(other(x))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


# ---------------------------------------------------------------------------
# scene description


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    class_id: int = 1  # 0 = background, 1 = object

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.size) / 2.0

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.size) / 2.0


@dataclass(frozen=True)
class SceneSpec:
    """Desk-scale scene: ground patch, boxes, ego trajectory, beam pattern."""

    extent: tuple[float, float, float, float, float, float]  # xmin..zmax
    boxes: tuple[Box, ...]
    trajectory: tuple[RigidTransform, ...]  # sensor-to-world, index = delta_t
    beams: int = 32
    azimuths: int = 256
    elevation_range: tuple[float, float] = (-0.35, 0.03)  # radians
    range_sigma: float = 0.02
    max_range: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if len(self.trajectory) < 1:
            raise ValueError("trajectory must contain at least one pose")
        xmin, xmax, ymin, ymax, zmin, zmax = self.extent
        for b in self.boxes:
            lo, hi = b.lo, b.hi
            if (hi[0] <= xmin or lo[0] >= xmax or hi[1] <= ymin or lo[1] >= ymax
                    or hi[2] <= zmin or lo[2] >= zmax):
                raise ValueError(f"box {b} does not intersect the scene extent")

    @property
    def bounds(self):
        return self.extent


@dataclass
class Sweep:
    """One full scan: points in the sensor frame at capture time."""

    points: np.ndarray  # (N, 3)
    delta_t: int
    pose: RigidTransform

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.delta_t < 0:
            raise ValueError("delta_t must be non-negative")


@dataclass
class AccumulatedCloud:
    """4D points (x, y, z, delta_t) in the current frame."""

    points: np.ndarray  # (N, 4)
    source_sweep_count: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if len(self.points) and self.points[:, 3].max() >= self.source_sweep_count:
            raise ValueError("delta_t exceeds source_sweep_count")


@dataclass(frozen=True)
class SweepSelection:
    """Which history sweeps enter the accumulation.

    even: keep the window most recent sweeps. uneven: beyond pivot_dt, keep
    each sweep with probability far_keep_prob (seed-deterministic); the
    current sweep is always kept.
    """

    mode: str  # "even" | "uneven"
    window: int
    pivot_dt: int = 2
    far_keep_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("even", "uneven"):
            raise ValueError(f"unknown selection mode {self.mode!r}")
        if self.window < 1:
            raise ValueError("window must be >= 1")

    def kept_mask(self, delta_ts: np.ndarray) -> np.ndarray:
        mask = delta_ts < self.window
        if self.mode == "uneven":
            rng = np.random.default_rng(self.seed)
            order = np.argsort(delta_ts, kind="stable")
            for i in order:
                dt = delta_ts[i]
                if dt > self.pivot_dt and mask[i]:
                    mask[i] = rng.random() < self.far_keep_prob
        return mask


# ---------------------------------------------------------------------------
# ray casting


def _ray_dirs(spec: SceneSpec) -> np.ndarray:
    el = np.linspace(spec.elevation_range[0], spec.elevation_range[1], spec.beams)
    az = np.arange(spec.azimuths) * (2.0 * np.pi / spec.azimuths)
    e, a = np.meshgrid(el, az, indexing="ij")
    d = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
    return d.reshape(-1, 3)


def cast_sweep(spec: SceneSpec, sweep_index: int) -> Sweep:
    """Cast one sweep with first-hit (occluding) semantics.

    Deterministic for a fixed (spec.seed, sweep_index).
    """
    if sweep_index >= len(spec.trajectory):
        raise ValueError("sweep_index beyond trajectory length")
    pose = spec.trajectory[sweep_index]
    origin = pose.translation
    dirs = _ray_dirs(spec) @ pose.rotation.T
    n = len(dirs)
    best_t = np.full(n, np.inf)

    xmin, xmax, ymin, ymax, zmin, zmax = spec.extent
    # ground plane z = 0, clipped to the extent rectangle
    dz = dirs[:, 2]
    down = dz < -1e-12
    t_g = np.where(down, -origin[2] / np.where(down, dz, 1.0), np.inf)
    with np.errstate(invalid="ignore"):
        gx = origin[0] + t_g * dirs[:, 0]
        gy = origin[1] + t_g * dirs[:, 1]
    ok = down & (t_g > 1e-9) & (gx >= xmin) & (gx <= xmax) & (gy >= ymin) & (gy <= ymax)
    best_t = np.where(ok & (t_g < best_t), t_g, best_t)

    for box in spec.boxes:
        lo, hi = box.lo, box.hi
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (lo[None, :] - origin[None, :]) * inv
            t2 = (hi[None, :] - origin[None, :]) * inv
        t_near = np.minimum(t1, t2).max(axis=1)
        t_far = np.maximum(t1, t2).min(axis=1)
        hit = (t_near <= t_far) & (t_near > 1e-9)
        best_t = np.where(hit & (t_near < best_t), t_near, best_t)

    valid = np.isfinite(best_t) & (best_t <= spec.max_range)
    t_hit = best_t[valid]
    d_hit = dirs[valid]
    if spec.range_sigma > 0 and len(t_hit):
        rng = np.random.default_rng([spec.seed, sweep_index])
        noise = rng.normal(0.0, spec.range_sigma, size=len(t_hit))
        np.clip(noise, -3.0 * spec.range_sigma, 3.0 * spec.range_sigma, out=noise)
        t_hit = t_hit + noise
    pts_world = origin[None, :] + t_hit[:, None] * d_hit
    pts_sensor = pose.inverse().apply(pts_world)
    return Sweep(points=pts_sensor, delta_t=sweep_index, pose=pose)


# ---------------------------------------------------------------------------
# alignment and accumulation


def align_sweep(sweep: Sweep, current_pose: RigidTransform) -> np.ndarray:
    """Map sweep points into the current frame; append delta_t unchanged.

    Uses P = inverse(current_pose) o sweep.pose.
    """
    p = current_pose.inverse().compose(sweep.pose)
    aligned = p.apply(sweep.points)
    dt = np.full((len(aligned), 1), float(sweep.delta_t))
    return np.hstack([aligned, dt])


def accumulate(sweeps: Sequence[Sweep], selection: SweepSelection,
               bounds: Optional[tuple] = None) -> AccumulatedCloud:
    """Align kept sweeps into the current frame and concatenate them.

    If bounds (xmin..zmax) is given, points outside are clipped away.
    """
    current = [s for s in sweeps if s.delta_t == 0]
    if len(current) != 1:
        raise MalformedSampleError(
            f"expected exactly one delta_t=0 sweep, got {len(current)}")
    current_pose = current[0].pose
    dts = np.array([s.delta_t for s in sweeps])
    mask = selection.kept_mask(dts)
    parts = [align_sweep(s, current_pose) for s, keep in zip(sweeps, mask) if keep]
    pts = np.concatenate(parts, axis=0) if parts else np.empty((0, 4))
    if bounds is not None and len(pts):
        xmin, xmax, ymin, ymax, zmin, zmax = bounds
        inside = ((pts[:, 0] >= xmin) & (pts[:, 0] <= xmax)
                  & (pts[:, 1] >= ymin) & (pts[:, 1] <= ymax)
                  & (pts[:, 2] >= zmin) & (pts[:, 2] <= zmax))
        pts = pts[inside]
    count = int(dts[mask].max()) + 1 if mask.any() else 1
    return AccumulatedCloud(points=pts, source_sweep_count=count)


# ---------------------------------------------------------------------------
# BEV labels


@dataclass(frozen=True)
class BevGridSpec:
    origin: tuple[float, float]
    cell_size: float
    dims: tuple[int, int]  # (nx, ny)


def bev_labels(spec: SceneSpec, grid: BevGridSpec) -> np.ndarray:
    """Dense (nx, ny) label map: 1 where any box footprint overlaps the cell."""
    nx, ny = grid.dims
    labels = np.zeros((nx, ny), dtype=np.int64)
    ox, oy = grid.origin
    cs = grid.cell_size
    for box in spec.boxes:
        lo, hi = box.lo, box.hi
        i0 = max(0, int(math.floor((lo[0] - ox) / cs)))
        i1 = min(nx - 1, int(math.ceil((hi[0] - ox) / cs)) - 1)
        j0 = max(0, int(math.floor((lo[1] - oy) / cs)))
        j1 = min(ny - 1, int(math.ceil((hi[1] - oy) / cs)) - 1)
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                # strict area overlap, not just boundary touch
                cx0, cx1 = ox + i * cs, ox + (i + 1) * cs
                cy0, cy1 = oy + j * cs, oy + (j + 1) * cs
                if min(cx1, hi[0]) > max(cx0, lo[0]) and min(cy1, hi[1]) > max(cy0, lo[1]):
                    labels[i, j] = 1
    return labels


# ---------------------------------------------------------------------------
# random scene generation


@dataclass(frozen=True)
class SceneParams:
    """Knobs for the random desk-scale scene generator."""

    extent: tuple[float, float, float, float, float, float] = (-16.0, 16.0, -16.0, 16.0, 0.0, 4.0)
    n_boxes: int = 7
    box_xy: tuple[float, float] = (2.0, 5.0)
    box_h: tuple[float, float] = (1.0, 2.5)
    beams: int = 24
    azimuths: int = 180
    sensor_height: float = 1.6
    speed_per_sweep: float = 0.35
    yaw_per_sweep: float = 0.004
    range_sigma: float = 0.02


def random_scene(seed: int, n_sweeps: int, params: SceneParams = SceneParams()) -> SceneSpec:
    rng = np.random.default_rng(seed)
    xmin, xmax, ymin, ymax, zmin, zmax = params.extent
    boxes = []
    for _ in range(params.n_boxes):
        sx, sy = rng.uniform(*params.box_xy, size=2)
        sz = rng.uniform(*params.box_h)
        cx = rng.uniform(xmin + sx / 2, xmax - sx / 2)
        cy = rng.uniform(ymin + sy / 2, ymax - sy / 2)
        boxes.append(Box(center=(cx, cy, sz / 2), size=(sx, sy, sz)))
    # current pose at index 0; history poses trail backwards along the
    # (random) motion direction. The sensor itself stays axis-aligned so the
    # ego-centric BEV grid lines up with the world-frame box footprints.
    heading = rng.uniform(0.0, 2.0 * np.pi)
    x0 = rng.uniform(-4.0, 4.0)
    y0 = rng.uniform(-4.0, 4.0)
    traj = []
    for i in range(n_sweeps):
        yaw = -i * params.yaw_per_sweep
        dx = x0 - i * params.speed_per_sweep * math.cos(heading)
        dy = y0 - i * params.speed_per_sweep * math.sin(heading)
        traj.append(RigidTransform.from_yaw(yaw, (dx, dy, params.sensor_height)))
    return SceneSpec(extent=params.extent, boxes=tuple(boxes), trajectory=tuple(traj),
                     beams=params.beams, azimuths=params.azimuths,
                     range_sigma=params.range_sigma, seed=seed)


# ---------------------------------------------------------------------------
# serialization


def save_cloud(path, cloud: AccumulatedCloud) -> None:
    with open(path, "w") as f:
        f.write(f"{CLOUD_HEADER}\n")
        f.write(f"# source_sweep_count {cloud.source_sweep_count}\n")
        for x, y, z, dt in cloud.points:
            f.write(f"{float(x)!r} {float(y)!r} {float(z)!r} {int(dt)}\n")


def load_cloud(path) -> AccumulatedCloud:
    with open(path) as f:
        header = f.readline().strip()
        if header != CLOUD_HEADER:
            raise ValueError(f"unrecognized cloud header {header!r}")
        count_line = f.readline().split()
        source_count = int(count_line[-1])
        rows = []
        for line in f:
            parts = line.split()
            if not parts:
                continue
            rows.append([float(parts[0]), float(parts[1]), float(parts[2]),
                         float(parts[3])])
    pts = np.asarray(rows, dtype=np.float64).reshape(-1, 4)
    return AccumulatedCloud(points=pts, source_sweep_count=source_count)
