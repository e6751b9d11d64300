"""Dense BEV anchor generation and pruning.

Anchors are prior 3D boxes of class-specific sizes placed at every cell
center of a regular (x, z) grid over the crop area, at yaws 0 and pi/2,
resting on a constant ground plane. An AnchorSet keeps the anchors as flat
numpy arrays (order: z-major, then x, then size index, then yaw), which
keeps generation and overlap queries fast; individual Anchor objects are
materialized on demand.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError
from .geometry import (
    Box3D,
    OrientedBox2D,
    box_corners,
    polygon_contains,
    polygon_intersection_area,
)
from .kitti_io import Frame, PointCloud

RIGHT_ANGLE = math.pi / 2

ANCHOR_CSV_HEADER = ["x", "z", "y", "l", "h", "w", "yaw", "class", "cluster"]


@dataclass(frozen=True)
class AnchorConfig:
    """Grid stride, crop area and vertical placement for anchor generation."""

    stride: float = 0.5
    x_range: tuple[float, float] = (-40.0, 40.0)
    z_range: tuple[float, float] = (0.0, 80.0)
    ground_plane_y: float = 1.65  # camera-frame y of the ground (y points down)
    orientations: tuple[float, ...] = (0.0, RIGHT_ANGLE)
    filter_empty: bool = False

    def __post_init__(self):
        for name, (lo, hi) in (("x_range", self.x_range), ("z_range", self.z_range)):
            if not hi > lo:
                raise ValueError(f"{name} {lo, hi} must satisfy max > min")
        extent = min(self.x_range[1] - self.x_range[0], self.z_range[1] - self.z_range[0])
        if not 0 < self.stride <= extent:
            raise ValueError(f"stride {self.stride} outside (0, {extent}]")
        if not self.orientations:
            raise ValueError("orientations must be non-empty")
        for yaw in self.orientations:
            if yaw not in (0.0, RIGHT_ANGLE):
                raise ValueError(f"yaw {yaw} not in {{0, pi/2}}")
        if len(set(self.orientations)) != len(self.orientations):
            raise ValueError("orientations contain duplicates")

    @classmethod
    def from_bev(cls, bev_cfg, **overrides) -> "AnchorConfig":
        """Adopt the crop area of a BevConfig."""
        return cls(x_range=bev_cfg.x_range, z_range=bev_cfg.z_range, **overrides)

    @property
    def grid_counts(self) -> tuple[int, int]:
        """(nx, nz) cell-center locations; floor(extent / stride) each."""
        nx = int(math.floor((self.x_range[1] - self.x_range[0]) / self.stride + 1e-9))
        nz = int(math.floor((self.z_range[1] - self.z_range[0]) / self.stride + 1e-9))
        return nx, nz


@dataclass(frozen=True)
class Anchor:
    """One prior box: grid center, size and one of the two fixed yaws."""

    center: tuple[float, float]  # (x, z) in the rectified-camera BEV plane
    ground_y: float  # camera-frame y of the box bottom
    size: tuple[float, float, float]  # (L, H, W) meters
    yaw: float
    class_name: str
    cluster_index: int

    def __post_init__(self):
        if self.yaw not in (0.0, RIGHT_ANGLE):
            raise ValueError(f"yaw {self.yaw} not in {{0, pi/2}}")
        if not all(v > 0 for v in self.size):
            raise ValueError(f"non-positive size {self.size}")

    @property
    def footprint(self) -> OrientedBox2D:
        l, _, w = self.size
        return OrientedBox2D(self.center, (l / 2.0, w / 2.0), self.yaw)

    @property
    def box3d(self) -> Box3D:
        return Box3D(self.footprint, y_bottom=-self.ground_y, height=self.size[1])


@dataclass(frozen=True)
class GridLayout:
    """Regular-grid metadata of an unfiltered AnchorSet (for fast lookups)."""

    x_min: float
    z_min: float
    stride: float
    nx: int
    nz: int
    per_location: int  # sizes x yaws


@dataclass(frozen=True)
class AnchorSet:
    """Anchors of one class as parallel arrays, in generation order."""

    centers: np.ndarray  # (K, 2) x, z
    sizes: np.ndarray  # (K, 3) l, h, w
    yaws: np.ndarray  # (K,)
    cluster_indices: np.ndarray  # (K,) index of the size that produced each anchor
    class_name: str
    ground_y: float
    frame_id: Optional[str] = None
    grid: Optional[GridLayout] = None  # present only for unfiltered dense sets

    def __post_init__(self):
        k = self.centers.shape[0]
        if self.centers.shape != (k, 2) or self.sizes.shape != (k, 3):
            raise ValueError("centers/sizes shape mismatch")
        if self.yaws.shape != (k,) or self.cluster_indices.shape != (k,):
            raise ValueError("yaws/cluster_indices shape mismatch")
        if k and not np.all(np.isin(self.yaws, (0.0, RIGHT_ANGLE))):
            raise ValueError("yaws must be exactly 0 or pi/2")
        if k and not np.all(self.sizes > 0):
            raise ValueError("sizes must be positive")
        for arr in (self.centers, self.sizes, self.yaws, self.cluster_indices):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def counts_by_cluster(self) -> dict[int, int]:
        if len(self) == 0:
            return {}
        counts = np.bincount(self.cluster_indices)
        return {int(j): int(c) for j, c in enumerate(counts) if c}

    @property
    def half_diagonals(self) -> np.ndarray:
        """Footprint circumradius per anchor (yaw-independent)."""
        return 0.5 * np.hypot(self.sizes[:, 0], self.sizes[:, 2])

    @property
    def anchors(self) -> tuple[Anchor, ...]:
        """Materialized Anchor objects (build on demand; sets can be large)."""
        return tuple(
            Anchor(
                center=(float(self.centers[i, 0]), float(self.centers[i, 1])),
                ground_y=self.ground_y,
                size=tuple(float(v) for v in self.sizes[i]),
                yaw=float(self.yaws[i]),
                class_name=self.class_name,
                cluster_index=int(self.cluster_indices[i]),
            )
            for i in range(len(self))
        )

    def footprint(self, i: int) -> OrientedBox2D:
        return OrientedBox2D(
            (float(self.centers[i, 0]), float(self.centers[i, 1])),
            (float(self.sizes[i, 0]) / 2.0, float(self.sizes[i, 2]) / 2.0),
            float(self.yaws[i]),
        )

    def subset(self, mask: np.ndarray, keep_grid: bool = False) -> "AnchorSet":
        return AnchorSet(
            centers=self.centers[mask].copy(),
            sizes=self.sizes[mask].copy(),
            yaws=self.yaws[mask].copy(),
            cluster_indices=self.cluster_indices[mask].copy(),
            class_name=self.class_name,
            ground_y=self.ground_y,
            frame_id=self.frame_id,
            grid=self.grid if keep_grid else None,
        )


def generate_anchors(
    sizes: Sequence[tuple[float, float, float]],
    cfg: AnchorConfig,
    class_name: str,
    frame_id: Optional[str] = None,
) -> AnchorSet:
    """Place every size at every grid cell center, at each configured yaw.

    Centers are (x_min + (i + 1/2) * stride, z_min + (j + 1/2) * stride),
    all strictly inside the area. Ordering is z-major, then x, then size
    index, then yaw, so anchor k decomposes as
    ((j * nx + i) * S + s) * Y + y.
    """
    size_arr = np.asarray(sizes, dtype=np.float64).reshape(-1, 3)
    if size_arr.shape[0] == 0:
        raise ValueError("no anchor sizes given")
    if not np.all(size_arr > 0):
        raise ValueError("anchor sizes must be positive")
    yaw_arr = np.asarray(cfg.orientations, dtype=np.float64)
    nx, nz = cfg.grid_counts
    ns, ny = size_arr.shape[0], yaw_arr.shape[0]

    xs = cfg.x_range[0] + (np.arange(nx) + 0.5) * cfg.stride
    zs = cfg.z_range[0] + (np.arange(nz) + 0.5) * cfg.stride
    shape = (nz, nx, ns, ny)
    centers = np.empty(shape + (2,), dtype=np.float64)
    centers[..., 0] = xs[None, :, None, None]
    centers[..., 1] = zs[:, None, None, None]
    all_sizes = np.broadcast_to(size_arr[None, None, :, None, :], shape + (3,))
    all_yaws = np.broadcast_to(yaw_arr[None, None, None, :], shape)
    clusters = np.broadcast_to(np.arange(ns)[None, None, :, None], shape)

    k = nz * nx * ns * ny
    return AnchorSet(
        centers=centers.reshape(k, 2),
        sizes=np.ascontiguousarray(all_sizes.reshape(k, 3)),
        yaws=np.ascontiguousarray(all_yaws.reshape(k)),
        cluster_indices=np.ascontiguousarray(clusters.reshape(k)).astype(np.int64),
        class_name=class_name,
        ground_y=cfg.ground_plane_y,
        frame_id=frame_id,
        grid=GridLayout(
            x_min=cfg.x_range[0],
            z_min=cfg.z_range[0],
            stride=cfg.stride,
            nx=nx,
            nz=nz,
            per_location=ns * ny,
        ),
    )


def _anchor_aabbs(aset: AnchorSet) -> tuple[np.ndarray, ...]:
    """Axis-aligned footprint bounds per anchor (yaw swaps l/w extents)."""
    at_zero = aset.yaws == 0.0
    half_x = np.where(at_zero, aset.sizes[:, 0], aset.sizes[:, 2]) * 0.5
    half_z = np.where(at_zero, aset.sizes[:, 2], aset.sizes[:, 0]) * 0.5
    cx, cz = aset.centers[:, 0], aset.centers[:, 1]
    return cx - half_x, cx + half_x, cz - half_z, cz + half_z


def filter_empty_anchors(
    aset: AnchorSet, pc: PointCloud, resolution: float = 0.1
) -> AnchorSet:
    """Keep anchors whose axis-aligned footprint contains at least one point.

    Containment is the closed test px in [cx - extent/2, cx + extent/2]
    (and likewise in z), with the bounds evaluated as written. An
    occupancy-grid integral image resolves almost every anchor (cells fully
    inside the box prove occupancy; zero points in the covering cells prove
    emptiness); the few boundary-ambiguous anchors fall back to an exact
    per-point test, so the result equals a brute-force scan. Order is
    preserved.
    """
    if pc.frame is not Frame.RECT_CAMERA:
        raise ValueError(f"expected a rectified-camera cloud, got {pc.frame}")
    k = len(aset)
    if k == 0 or len(pc) == 0:
        return aset.subset(np.zeros(k, dtype=bool))
    px = pc.points[:, 0].astype(np.float64)
    pz = pc.points[:, 2].astype(np.float64)
    lo_x, hi_x, lo_z, hi_z = _anchor_aabbs(aset)

    # Occupancy grid covering every point (anchors poking outside it cannot
    # contain a point, so clipping their cell ranges to the grid is safe).
    x0 = float(px.min()) - resolution
    z0 = float(pz.min()) - resolution
    ncol = int(np.floor((float(px.max()) - x0) / resolution)) + 2
    nrow = int(np.floor((float(pz.max()) - z0) / resolution)) + 2
    col = np.clip(((px - x0) / resolution).astype(np.int64), 0, ncol - 1)
    row = np.clip(((pz - z0) / resolution).astype(np.int64), 0, nrow - 1)
    occ = np.zeros((nrow, ncol), dtype=np.int64)
    np.add.at(occ, (row, col), 1)
    integral = np.zeros((nrow + 1, ncol + 1), dtype=np.int64)
    integral[1:, 1:] = occ.cumsum(axis=0).cumsum(axis=1)

    def box_counts(r0, r1, c0, c1):
        return (
            integral[r1 + 1, c1 + 1]
            - integral[r0, c1 + 1]
            - integral[r1 + 1, c0]
            + integral[r0, c0]
        )

    x_max_g = x0 + ncol * resolution
    z_max_g = z0 + nrow * resolution
    overlaps_grid = (hi_x >= x0) & (lo_x <= x_max_g) & (hi_z >= z0) & (lo_z <= z_max_g)

    # Cells intersecting the box (necessary region for any contained point).
    c_out0 = np.clip(np.floor((lo_x - x0) / resolution).astype(np.int64), 0, ncol - 1)
    c_out1 = np.clip(np.floor((hi_x - x0) / resolution).astype(np.int64), 0, ncol - 1)
    r_out0 = np.clip(np.floor((lo_z - z0) / resolution).astype(np.int64), 0, nrow - 1)
    r_out1 = np.clip(np.floor((hi_z - z0) / resolution).astype(np.int64), 0, nrow - 1)
    outer = np.where(overlaps_grid, box_counts(r_out0, r_out1, c_out0, c_out1), 0)

    # Cells fully inside the box (each of their points is certainly inside).
    c_in0 = np.ceil((lo_x - x0) / resolution).astype(np.int64)
    c_in0 += (x0 + c_in0 * resolution < lo_x).astype(np.int64)
    c_in1 = np.floor((hi_x - x0) / resolution).astype(np.int64) - 1
    c_in1 -= (x0 + (c_in1 + 1) * resolution > hi_x).astype(np.int64)
    r_in0 = np.ceil((lo_z - z0) / resolution).astype(np.int64)
    r_in0 += (z0 + r_in0 * resolution < lo_z).astype(np.int64)
    r_in1 = np.floor((hi_z - z0) / resolution).astype(np.int64) - 1
    r_in1 -= (z0 + (r_in1 + 1) * resolution > hi_z).astype(np.int64)
    has_inner = (
        (c_in0 <= c_in1)
        & (r_in0 <= r_in1)
        & (c_in1 >= 0)
        & (r_in1 >= 0)
        & (c_in0 <= ncol - 1)
        & (r_in0 <= nrow - 1)
    )
    c_in0c = np.clip(c_in0, 0, ncol - 1)
    c_in1c = np.clip(c_in1, 0, ncol - 1)
    r_in0c = np.clip(r_in0, 0, nrow - 1)
    r_in1c = np.clip(r_in1, 0, nrow - 1)
    inner = np.where(has_inner, box_counts(r_in0c, r_in1c, c_in0c, c_in1c), 0)

    keep = inner > 0
    ambiguous = np.flatnonzero(~keep & (outer > 0))
    for i in ambiguous:
        hit = np.any(
            (px >= lo_x[i]) & (px <= hi_x[i]) & (pz >= lo_z[i]) & (pz <= hi_z[i])
        )
        if hit:
            keep[i] = True
    return aset.subset(keep)


def best_overlap_fraction(gt: OrientedBox2D, aset: AnchorSet) -> float:
    """Largest single-anchor overlap with a ground-truth footprint (A_max/A_GT).

    Equivalent to scanning every anchor: candidates are pruned by footprint
    circumradii (anchors whose center lies farther than the radius sum from
    the ground truth's center cannot intersect it), and the scan stops early
    once an anchor fully covers the ground truth.
    """
    if len(aset) == 0:
        raise ValueError("anchor set is empty")
    gx, gz = gt.center
    r_gt = math.hypot(*gt.half_dims)
    radii = aset.half_diagonals

    if aset.grid is not None:
        g = aset.grid
        reach = r_gt + float(radii.max())
        ilo = max(0, int(math.ceil((gx - reach - g.x_min) / g.stride - 0.5)))
        ihi = min(g.nx - 1, int(math.floor((gx + reach - g.x_min) / g.stride - 0.5)))
        jlo = max(0, int(math.ceil((gz - reach - g.z_min) / g.stride - 0.5)))
        jhi = min(g.nz - 1, int(math.floor((gz + reach - g.z_min) / g.stride - 0.5)))
        if ilo > ihi or jlo > jhi:
            return 0.0
        blocks = [
            np.arange((j * g.nx + ilo) * g.per_location, (j * g.nx + ihi + 1) * g.per_location)
            for j in range(jlo, jhi + 1)
        ]
        idx = np.concatenate(blocks)
    else:
        idx = np.arange(len(aset))

    cx = aset.centers[idx, 0]
    cz = aset.centers[idx, 1]
    near = (cx - gx) ** 2 + (cz - gz) ** 2 <= (r_gt + radii[idx]) ** 2
    idx = idx[near]

    gt_poly = box_corners(gt)
    a_gt = gt.area
    best = 0.0
    for i in idx:
        anchor_poly = box_corners(aset.footprint(int(i)))
        if polygon_contains(anchor_poly, gt_poly):
            return 1.0
        inter = polygon_intersection_area(gt_poly, anchor_poly)
        if inter > best:
            best = inter
            if best >= a_gt:
                break
    return min(best, a_gt) / a_gt


def write_anchor_csv(aset: AnchorSet, path: str | Path) -> None:
    """One row per anchor: x,z,y,l,h,w,yaw,class,cluster (generation order)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANCHOR_CSV_HEADER)
        for i in range(len(aset)):
            writer.writerow(
                [
                    repr(float(aset.centers[i, 0])),
                    repr(float(aset.centers[i, 1])),
                    repr(float(aset.ground_y)),
                    repr(float(aset.sizes[i, 0])),
                    repr(float(aset.sizes[i, 1])),
                    repr(float(aset.sizes[i, 2])),
                    repr(float(aset.yaws[i])),
                    aset.class_name,
                    str(int(aset.cluster_indices[i])),
                ]
            )


def read_anchor_csv(path: str | Path, frame_id: Optional[str] = None) -> AnchorSet:
    """Inverse of :func:`write_anchor_csv` (grid metadata is not recovered)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError("anchor CSV is empty", line=1)
        if header != ANCHOR_CSV_HEADER:
            raise FormatError(f"bad anchor CSV header {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(ANCHOR_CSV_HEADER):
                raise FormatError(f"expected {len(ANCHOR_CSV_HEADER)} fields", line=lineno)
            try:
                rows.append(
                    (
                        float(row[0]), float(row[1]), float(row[2]), float(row[3]),
                        float(row[4]), float(row[5]), float(row[6]), row[7], int(row[8]),
                    )
                )
            except ValueError as exc:
                raise FormatError(f"bad value ({exc})", line=lineno) from None
    if not rows:
        raise FormatError("anchor CSV has no rows")
    classes = {r[7] for r in rows}
    grounds = {r[2] for r in rows}
    if len(classes) != 1 or len(grounds) != 1:
        raise FormatError("anchor CSV mixes classes or ground heights")
    arr = np.array([r[:7] for r in rows], dtype=np.float64)
    return AnchorSet(
        centers=arr[:, 0:2].copy(),
        sizes=arr[:, 3:6].copy(),
        yaws=arr[:, 6].copy(),
        cluster_indices=np.array([r[8] for r in rows], dtype=np.int64),
        class_name=classes.pop(),
        ground_y=grounds.pop(),
        frame_id=frame_id,
    )
