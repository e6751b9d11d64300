"""KITTI object-dataset I/O: labels, calibration, velodyne clouds, frame lists.

All parsers are pure functions of their input text/bytes and return
immutable structures (numpy arrays are marked read-only), so parsed frames
can be shared freely between workers.

Coordinate conventions follow the KITTI devkit: object labels live in the
rectified camera frame (x right, y down, z forward); raw point clouds are
in the velodyne frame until :func:`transform_to_rect_camera` is applied.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    CalibrationError,
    DatasetError,
    LabelFormatError,
    PointCloudFormatError,
)

EVALUATED_CLASSES = ("Car", "Pedestrian", "Cyclist")
DONT_CARE = "DontCare"

_POINT_RECORD_BYTES = 16  # 4 little-endian float32 per point


class Frame(enum.Enum):
    """Coordinate frame a point cloud is expressed in."""

    VELODYNE = "velodyne"
    RECT_CAMERA = "rect_camera"


class Split(enum.Enum):
    TRAIN = "train"
    VAL = "val"
    ALL = "all"


@dataclass(frozen=True)
class ObjectLabel:
    """One ground-truth (or detected) object from a KITTI label file.

    ``dims`` keeps the file order (height, width, length); ``location`` is
    the bottom-face center in the rectified camera frame. ``score`` is only
    present for detections/proposals (16-field lines).

    Numeric invariants (positive dims, truncation in [0, 1], occlusion in
    {0..3}, |rotation_y| <= pi) are enforced for the three evaluated classes
    only: KITTI uses -1/-10 sentinels for DontCare entries, which are
    retained as-is so evaluation can ignore them explicitly.
    """

    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple[float, float, float, float]  # left, top, right, bottom (px)
    dims: tuple[float, float, float]  # height, width, length (m)
    location: tuple[float, float, float]  # x, y, z (m), rectified camera
    rotation_y: float
    score: Optional[float] = None

    def __post_init__(self):
        left, top, right, bottom = self.bbox2d
        if not (right > left and bottom > top):
            raise ValueError(
                f"degenerate 2D box {self.bbox2d} for class {self.class_name}"
            )
        if self.class_name not in EVALUATED_CLASSES:
            return
        h, w, l = self.dims
        if not (h > 0 and w > 0 and l > 0):
            raise ValueError(f"non-positive dimensions {self.dims}")
        if not 0.0 <= self.truncation <= 1.0:
            raise ValueError(f"truncation {self.truncation} outside [0, 1]")
        if self.occlusion not in (0, 1, 2, 3):
            raise ValueError(f"occlusion level {self.occlusion} not in 0..3")
        if abs(self.rotation_y) > math.pi + 1e-9:
            raise ValueError(f"rotation_y {self.rotation_y} outside [-pi, pi]")

    @property
    def bbox_height_px(self) -> float:
        return self.bbox2d[3] - self.bbox2d[1]


@dataclass(frozen=True)
class CalibrationSet:
    """Projection/rectification matrices of one KITTI frame."""

    P2: np.ndarray  # 3x4
    R0_rect: np.ndarray  # 3x3
    Tr_velo_to_cam: np.ndarray  # 3x4

    def __post_init__(self):
        for name, mat, shape in (
            ("P2", self.P2, (3, 4)),
            ("R0_rect", self.R0_rect, (3, 3)),
            ("Tr_velo_to_cam", self.Tr_velo_to_cam, (3, 4)),
        ):
            arr = np.asarray(mat, dtype=np.float64)
            if arr.shape != shape:
                raise CalibrationError(f"{name} has shape {arr.shape}, want {shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        residual = np.abs(self.R0_rect.T @ self.R0_rect - np.eye(3)).max()
        if residual > 1e-4:
            raise CalibrationError(
                f"R0_rect is not orthonormal (max |R^T R - I| = {residual:.3g})"
            )


@dataclass(frozen=True)
class PointCloud:
    """LIDAR points as an (N, 4) array of x, y, z, reflectance."""

    points: np.ndarray
    frame: Frame

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"point array must be (N, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts[:, :3])):
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


def parse_label_file(text: str) -> list[ObjectLabel]:
    """Parse a KITTI label file (15 fields per line, 16 with score).

    DontCare and other non-evaluated classes are retained. Raises
    :class:`LabelFormatError` with the 1-based line number on any
    malformed line.
    """
    labels = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) not in (15, 16):
            raise LabelFormatError(
                f"expected 15 or 16 fields, got {len(fields)}", line=lineno
            )
        try:
            values = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise LabelFormatError(f"non-numeric field ({exc})", line=lineno) from None
        try:
            labels.append(
                ObjectLabel(
                    class_name=fields[0],
                    truncation=values[0],
                    occlusion=int(values[1]),
                    alpha=values[2],
                    bbox2d=(values[3], values[4], values[5], values[6]),
                    dims=(values[7], values[8], values[9]),
                    location=(values[10], values[11], values[12]),
                    rotation_y=values[13],
                    score=values[14] if len(values) == 15 else None,
                )
            )
        except ValueError as exc:
            raise LabelFormatError(str(exc), line=lineno) from None
    return labels


def _fmt(x: float) -> str:
    # repr() of a float is the shortest decimal string that round-trips
    # exactly, which is what the serialize/parse identity contract needs.
    return repr(float(x))


def format_label_line(label: ObjectLabel) -> str:
    fields = [
        label.class_name,
        _fmt(label.truncation),
        str(int(label.occlusion)),
        _fmt(label.alpha),
        *(_fmt(v) for v in label.bbox2d),
        *(_fmt(v) for v in label.dims),
        *(_fmt(v) for v in label.location),
        _fmt(label.rotation_y),
    ]
    if label.score is not None:
        fields.append(_fmt(label.score))
    return " ".join(fields)


def format_label_file(labels: Sequence[ObjectLabel]) -> str:
    """Inverse of :func:`parse_label_file` (exact round-trip)."""
    return "".join(format_label_line(lab) + "\n" for lab in labels)


_CALIB_KEYS = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}


def parse_calib_file(text: str) -> CalibrationSet:
    """Parse a KITTI calibration file (``KEY: v1 v2 ...`` rows).

    Only P2, R0_rect and Tr_velo_to_cam are required; other rows are
    ignored. Values fill each matrix row-major.
    """
    rows: dict[str, list[float]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or ":" not in line:
            continue
        key, _, rest = line.partition(":")
        try:
            rows[key.strip()] = [float(v) for v in rest.split()]
        except ValueError as exc:
            raise CalibrationError(f"non-numeric value ({exc})", line=lineno) from None

    matrices = {}
    for key, shape in _CALIB_KEYS.items():
        if key not in rows:
            raise CalibrationError(f"missing key {key}")
        values = rows[key]
        want = shape[0] * shape[1]
        if len(values) != want:
            raise CalibrationError(
                f"key {key} has {len(values)} values, want {want}"
            )
        matrices[key] = np.array(values, dtype=np.float64).reshape(shape)
    return CalibrationSet(**matrices)


def read_point_cloud(data: bytes) -> PointCloud:
    """Decode a velodyne ``.bin`` blob (packed little-endian float32 x,y,z,r)."""
    if len(data) % _POINT_RECORD_BYTES != 0:
        raise PointCloudFormatError(
            f"byte length {len(data)} is not a multiple of {_POINT_RECORD_BYTES}"
        )
    pts = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return PointCloud(points=pts.copy(), frame=Frame.VELODYNE)


def transform_to_rect_camera(pc: PointCloud, calib: CalibrationSet) -> PointCloud:
    """Map a velodyne-frame cloud into the rectified camera frame.

    Applies ``p' = R0_rect @ (Tr_velo_to_cam @ [p; 1])`` in float64;
    reflectance is carried through unchanged.
    """
    if pc.frame is not Frame.VELODYNE:
        raise ValueError(f"expected a velodyne-frame cloud, got {pc.frame}")
    xyz = pc.xyz.astype(np.float64)
    tr = calib.Tr_velo_to_cam
    cam = xyz @ tr[:, :3].T + tr[:, 3]
    rect = cam @ calib.R0_rect.T
    out = np.empty((len(pc), 4), dtype=np.float64)
    out[:, :3] = rect
    out[:, 3] = pc.points[:, 3]
    return PointCloud(points=out, frame=Frame.RECT_CAMERA)


def load_split_ids(path: str | Path) -> list[str]:
    """Read a split file: one frame id per line, blanks ignored."""
    ids = [line.strip() for line in Path(path).read_text().splitlines()]
    return [i for i in ids if i]


@dataclass(frozen=True)
class FrameDataset:
    """A KITTI-layout directory plus the ordered frame ids to process."""

    root: Path
    frame_ids: tuple[str, ...]
    split: Split = Split.ALL

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        ids = tuple(self.frame_ids)
        if len(set(ids)) != len(ids):
            raise ValueError("frame ids are not unique")
        if list(ids) != sorted(ids):
            raise ValueError("frame ids are not sorted")
        object.__setattr__(self, "frame_ids", ids)

    @classmethod
    def from_split_file(
        cls, root: str | Path, split_path: str | Path, split: Split = Split.ALL
    ) -> "FrameDataset":
        return cls(Path(root), tuple(sorted(load_split_ids(split_path))), split)

    @classmethod
    def from_directory(cls, root: str | Path) -> "FrameDataset":
        """Use every frame that has a label file under ``<root>/label_2``."""
        label_dir = Path(root) / "label_2"
        ids = sorted(p.stem for p in label_dir.glob("*.txt"))
        if not ids:
            raise DatasetError(f"no label files found under {label_dir}")
        return cls(Path(root), tuple(ids), Split.ALL)

    def label_path(self, frame_id: str) -> Path:
        return self.root / "label_2" / f"{frame_id}.txt"

    def calib_path(self, frame_id: str) -> Path:
        return self.root / "calib" / f"{frame_id}.txt"

    def velodyne_path(self, frame_id: str) -> Path:
        return self.root / "velodyne" / f"{frame_id}.bin"

    def read_labels(self, frame_id: str) -> list[ObjectLabel]:
        try:
            return parse_label_file(self.label_path(frame_id).read_text())
        except (OSError, LabelFormatError) as exc:
            raise DatasetError(f"frame {frame_id}: {exc}") from exc

    def read_calib(self, frame_id: str) -> CalibrationSet:
        try:
            return parse_calib_file(self.calib_path(frame_id).read_text())
        except (OSError, CalibrationError) as exc:
            raise DatasetError(f"frame {frame_id}: {exc}") from exc

    def read_points(self, frame_id: str) -> PointCloud:
        try:
            return read_point_cloud(self.velodyne_path(frame_id).read_bytes())
        except (OSError, PointCloudFormatError) as exc:
            raise DatasetError(f"frame {frame_id}: {exc}") from exc

    def read_points_rect(self, frame_id: str) -> PointCloud:
        """Velodyne cloud already transformed into the rectified camera frame."""
        return transform_to_rect_camera(
            self.read_points(frame_id), self.read_calib(frame_id)
        )
