"""Birds-eye-view rasterization of rectified-camera point clouds.

The scene is cropped to a fixed area in the (x, z) ground plane and binned
onto a regular grid. Each cell carries the maximum point height per
vertical slice (relative to the slice bottom, 0 when empty) plus a
log-saturated point-density channel, giving an (H, W, C+1) tensor.

The rectified camera frame has y pointing down, so "height" throughout
this module is -y (larger = higher above the ground).
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import FormatError
from .kitti_io import Frame, PointCloud

BEV_MAGIC_HEADER_BYTES = 16  # 4 little-endian int32: H, W, C+1, res*1000


@dataclass(frozen=True)
class BevConfig:
    """Crop area and grid geometry for BEV rasterization."""

    x_range: tuple[float, float] = (-40.0, 40.0)
    z_range: tuple[float, float] = (0.0, 80.0)
    resolution: float = 0.1
    num_slices: int = 5
    height_range: tuple[float, float] = (0.0, 2.5)
    density_norm: float = 16.0

    def __post_init__(self):
        for name, (lo, hi) in (
            ("x_range", self.x_range),
            ("z_range", self.z_range),
            ("height_range", self.height_range),
        ):
            if not hi > lo:
                raise ValueError(f"{name} {lo, hi} must satisfy max > min")
        if not self.resolution > 0:
            raise ValueError(f"resolution {self.resolution} must be positive")
        if self.num_slices < 1:
            raise ValueError(f"num_slices {self.num_slices} must be >= 1")
        if not self.density_norm > 1:
            raise ValueError(f"density_norm {self.density_norm} must exceed 1")
        rows, cols = self.grid_shape
        if rows < 1 or cols < 1:
            raise ValueError(f"degenerate grid {rows}x{cols}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        """(rows, cols) = (z cells, x cells); row 0 is nearest z."""
        rows = int(round((self.z_range[1] - self.z_range[0]) / self.resolution))
        cols = int(round((self.x_range[1] - self.x_range[0]) / self.resolution))
        return rows, cols

    @property
    def slice_height(self) -> float:
        return (self.height_range[1] - self.height_range[0]) / self.num_slices


@dataclass(frozen=True)
class BevMap:
    """Rasterized scene: per-slice max heights, density, raw cell counts."""

    height_slices: np.ndarray  # (H, W, C) float64, relative to slice bottom
    density: np.ndarray  # (H, W) float64 in [0, 1]
    counts: np.ndarray  # (H, W) int64 raw per-cell point counts
    config: BevConfig

    def __post_init__(self):
        rows, cols = self.config.grid_shape
        want = (rows, cols, self.config.num_slices)
        if self.height_slices.shape != want:
            raise ValueError(f"height_slices shape {self.height_slices.shape}, want {want}")
        if self.density.shape != (rows, cols):
            raise ValueError(f"density shape {self.density.shape}, want {(rows, cols)}")
        if self.counts.shape != (rows, cols):
            raise ValueError(f"counts shape {self.counts.shape}, want {(rows, cols)}")
        for arr in (self.height_slices, self.density, self.counts):
            arr.setflags(write=False)


def crop_points(pc: PointCloud, cfg: BevConfig) -> PointCloud:
    """Keep the points with x in [x_min, x_max) and z in [z_min, z_max).

    Point order is preserved; an empty result is valid.
    """
    if pc.frame is not Frame.RECT_CAMERA:
        raise ValueError(f"expected a rectified-camera cloud, got {pc.frame}")
    x = pc.points[:, 0]
    z = pc.points[:, 2]
    keep = (
        (x >= cfg.x_range[0])
        & (x < cfg.x_range[1])
        & (z >= cfg.z_range[0])
        & (z < cfg.z_range[1])
    )
    return PointCloud(points=pc.points[keep].copy(), frame=pc.frame)


def density_encode(count, n0: float = 16.0):
    """Log-saturated density: min(1, log(count + 1) / log(n0)).

    Works elementwise on arrays; natural log (any base cancels in the
    ratio). Saturates at 1 for count >= n0 - 1.
    """
    return np.minimum(1.0, np.log(np.asarray(count, dtype=np.float64) + 1.0) / math.log(n0))


def rasterize_bev(pc: PointCloud, cfg: BevConfig) -> BevMap:
    """Bin a rectified-camera cloud onto the BEV grid.

    Each point lands in cell (floor((z - z_min)/res), floor((x - x_min)/res)).
    Points count toward the cell density regardless of height; only points
    with height (-y) inside ``height_range`` contribute to a height slice,
    where the stored value is the per-cell/slice maximum height re-expressed
    relative to the slice bottom (empty cells stay 0). Points outside the
    crop area are ignored, so pre-cropping is optional.
    """
    if pc.frame is not Frame.RECT_CAMERA:
        raise ValueError(f"expected a rectified-camera cloud, got {pc.frame}")
    rows, cols = cfg.grid_shape
    c = cfg.num_slices
    heights = np.zeros((rows, cols, c), dtype=np.float64)
    counts = np.zeros((rows, cols), dtype=np.int64)

    x = pc.points[:, 0].astype(np.float64)
    z = pc.points[:, 2].astype(np.float64)
    h = -pc.points[:, 1].astype(np.float64)  # camera y points down

    in_area = (
        (x >= cfg.x_range[0])
        & (x < cfg.x_range[1])
        & (z >= cfg.z_range[0])
        & (z < cfg.z_range[1])
    )
    x, z, h = x[in_area], z[in_area], h[in_area]
    if x.size:
        col = np.clip(((x - cfg.x_range[0]) / cfg.resolution).astype(np.int64), 0, cols - 1)
        row = np.clip(((z - cfg.z_range[0]) / cfg.resolution).astype(np.int64), 0, rows - 1)
        np.add.at(counts, (row, col), 1)

        h_lo, h_hi = cfg.height_range
        in_band = (h >= h_lo) & (h < h_hi)
        if np.any(in_band):
            sl = np.clip(
                ((h[in_band] - h_lo) / cfg.slice_height).astype(np.int64), 0, c - 1
            )
            rel = h[in_band] - (h_lo + sl * cfg.slice_height)
            np.maximum.at(heights, (row[in_band], col[in_band], sl), rel)

    return BevMap(
        height_slices=heights,
        density=density_encode(counts, cfg.density_norm),
        counts=counts,
        config=cfg,
    )


def render_bev(bev: BevMap) -> bytes:
    """PNG bytes of the density channel, mapped linearly to 8-bit gray.

    One pixel per cell (row 0 = nearest z at the top); deterministic for a
    fixed input.
    """
    gray = np.round(bev.density * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(gray, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def bev_to_bytes(bev: BevMap) -> bytes:
    """Flat binary export: 16-byte header then float32 (row, col, channel).

    Header: H, W, C+1 and resolution*1000, each a little-endian int32.
    Channels are the C height slices followed by the density channel.
    """
    rows, cols = bev.config.grid_shape
    c = bev.config.num_slices
    header = struct.pack(
        "<4i", rows, cols, c + 1, int(round(bev.config.resolution * 1000))
    )
    tensor = np.concatenate(
        [bev.height_slices, bev.density[:, :, None]], axis=2
    ).astype("<f4")
    return header + tensor.tobytes(order="C")


def bev_from_bytes(data: bytes, cfg: BevConfig) -> BevMap:
    """Inverse of :func:`bev_to_bytes` for a known grid config.

    Raw per-cell counts are not stored in the binary format, so the
    reconstructed map carries -1 counts as a "not available" marker.
    """
    if len(data) < BEV_MAGIC_HEADER_BYTES:
        raise FormatError(f"blob of {len(data)} bytes is shorter than the header")
    rows, cols, channels, res_mm = struct.unpack("<4i", data[:BEV_MAGIC_HEADER_BYTES])
    exp_rows, exp_cols = cfg.grid_shape
    if (rows, cols, channels) != (exp_rows, exp_cols, cfg.num_slices + 1):
        raise FormatError(
            f"header {(rows, cols, channels)} does not match config "
            f"{(exp_rows, exp_cols, cfg.num_slices + 1)}"
        )
    if res_mm != int(round(cfg.resolution * 1000)):
        raise FormatError(f"header resolution {res_mm} mm does not match config")
    want = rows * cols * channels * 4
    body = data[BEV_MAGIC_HEADER_BYTES:]
    if len(body) != want:
        raise FormatError(f"body of {len(body)} bytes, want {want}")
    tensor = np.frombuffer(body, dtype="<f4").reshape(rows, cols, channels).astype(np.float64)
    return BevMap(
        height_slices=tensor[:, :, :-1].copy(),
        density=tensor[:, :, -1].copy(),
        counts=np.full((rows, cols), -1, dtype=np.int64),
        config=cfg,
    )
