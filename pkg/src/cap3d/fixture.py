"""Synthetic KITTI-format mini-datasets for desk-scale testing.

The generated scene population is deliberately bimodal: pedestrians come in
a "small" and a "large" stock size (tight Gaussian noise around each), so a
single pooled anchor size covers the small mode but badly undercovers the
large one, while two or more cluster-derived sizes cover both. Object
centers snap to the default anchor-grid cell centers and yaws to {0, pi/2},
which makes coverage numbers crisp and reproducible.

Everything is a pure function of (spec, seed): rerunning writes
byte-identical label/calib/velodyne files and proposal/detection CSVs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluation import (
    DetectionSet,
    EvalBox,
    ProposalSet,
    box3d_from_label,
    export_detections,
    export_proposals,
)
from .geometry import Box3D, OrientedBox2D
from .kitti_io import Frame, ObjectLabel, PointCloud, format_label_file

GROUND_Y = 1.65  # camera-frame y of the ground plane (y points down)

# (L, H, W) means of the two pedestrian stock sizes, meters.
SMALL_MODE = (0.60, 1.65, 0.50)
LARGE_MODE = (1.50, 1.85, 1.10)
MODE_SIGMA = 0.008

_FOCAL = 721.5377
_CENTER_U = 609.5593
_CENTER_V = 172.854
_IMAGE_W = 1242.0
_IMAGE_H = 375.0

# Velodyne -> camera: x_cam = -y_velo, y_cam = -z_velo, z_cam = x_velo.
_VELO_TO_CAM_R = np.array(
    [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]], dtype=np.float64
)
_VELO_TO_CAM_T = np.array([-0.06, -0.08, -0.27], dtype=np.float64)

CALIB_TEXT = (
    "P2: "
    f"{_FOCAL} 0.0 {_CENTER_U} 44.85728 "
    f"0.0 {_FOCAL} {_CENTER_V} 0.2163791 "
    "0.0 0.0 1.0 0.002745884\n"
    "R0_rect: 1.0 0.0 0.0 0.0 1.0 0.0 0.0 0.0 1.0\n"
    "Tr_velo_to_cam: "
    "0.0 -1.0 0.0 -0.06 "
    "0.0 0.0 -1.0 -0.08 "
    "1.0 0.0 0.0 -0.27\n"
)


@dataclass(frozen=True)
class FixtureSpec:
    """Shape of a synthetic dataset."""

    num_frames: int = 20
    objects_per_frame: int = 3
    class_name: str = "Pedestrian"
    points_per_object: int = 200
    clutter_points: int = 1200
    stride: float = 0.5  # object centers snap to this anchor grid
    seed: int = 0

    def __post_init__(self):
        if self.num_frames < 1 or self.objects_per_frame < 1:
            raise ValueError("need at least one frame and one object per frame")


def _sample_object(rng: np.random.Generator, spec: FixtureSpec, used: set) -> ObjectLabel:
    mode = LARGE_MODE if rng.integers(0, 2) else SMALL_MODE
    l, h, w = (float(max(0.2, m + rng.normal(0.0, MODE_SIGMA))) for m in mode)
    while True:
        # Cell-center coordinates of the default 0.5 m anchor grid, kept a
        # few meters inside the crop: x in (-20, 20), z in (15, 45).
        i = int(rng.integers(40, 120))
        j = int(rng.integers(30, 90))
        if (i, j) not in used and all(
            abs(i - i2) + abs(j - j2) > 6 for i2, j2 in used
        ):
            used.add((i, j))
            break
    x = -40.0 + (i + 0.5) * spec.stride
    z = 0.0 + (j + 0.5) * spec.stride
    yaw = float(rng.choice((0.0, math.pi / 2)))

    # Approximate pinhole projection for a plausible 2D box; difficulty
    # filtering only reads its pixel height.
    u = _FOCAL * x / z + _CENTER_U
    v = _FOCAL * (GROUND_Y - h / 2.0) / z + _CENTER_V
    h_px = _FOCAL * h / z
    w_px = _FOCAL * max(l, w) / z
    left = min(max(u - w_px / 2.0, 0.0), _IMAGE_W - 2.0)
    top = min(max(v - h_px / 2.0, 0.0), _IMAGE_H - 2.0)
    right = min(max(u + w_px / 2.0, left + 1.0), _IMAGE_W - 1.0)
    bottom = min(max(v + h_px / 2.0, top + 1.0), _IMAGE_H - 1.0)

    alpha = yaw - math.atan2(x, z)
    while alpha > math.pi:
        alpha -= 2.0 * math.pi
    while alpha < -math.pi:
        alpha += 2.0 * math.pi

    return ObjectLabel(
        class_name=spec.class_name,
        truncation=0.0,
        occlusion=0,
        alpha=alpha,
        bbox2d=(left, top, right, bottom),
        dims=(h, w, l),
        location=(x, GROUND_Y, z),
        rotation_y=yaw,
    )


def _object_points(rng: np.random.Generator, label: ObjectLabel, count: int) -> np.ndarray:
    """Points scattered inside the object's 3D box (rect-camera frame)."""
    h, w, l = label.dims
    x, y, z = label.location
    u = rng.uniform(-l / 2.0, l / 2.0, count)
    v = rng.uniform(-w / 2.0, w / 2.0, count)
    c, s = math.cos(label.rotation_y), math.sin(label.rotation_y)
    px = x + u * c - v * s
    pz = z + u * s + v * c
    py = y - rng.uniform(0.0, h, count)  # bottom at y, top at y - h
    refl = rng.uniform(0.0, 1.0, count)
    return np.stack([px, py, pz, refl], axis=1)


def _clutter_points(rng: np.random.Generator, count: int) -> np.ndarray:
    px = rng.uniform(-39.5, 39.5, count)
    pz = rng.uniform(0.5, 79.5, count)
    py = GROUND_Y + rng.normal(0.0, 0.01, count)
    refl = rng.uniform(0.0, 1.0, count)
    return np.stack([px, py, pz, refl], axis=1)


def _to_velodyne(points_cam: np.ndarray) -> np.ndarray:
    xyz = (points_cam[:, :3] - _VELO_TO_CAM_T) @ _VELO_TO_CAM_R
    out = np.empty_like(points_cam)
    out[:, :3] = xyz
    out[:, 3] = points_cam[:, 3]
    return out


def _shifted_box(label: ObjectLabel, dx: float) -> Box3D:
    h, w, l = label.dims
    x, y, z = label.location
    return Box3D(
        OrientedBox2D((x + dx, z), (l / 2.0, w / 2.0), label.rotation_y),
        y_bottom=-y,
        height=h,
    )


def generate_fixture(root: str | Path, spec: FixtureSpec = FixtureSpec()) -> Path:
    """Write a KITTI-layout dataset plus proposal/detection CSVs under root.

    Layout: label_2/*.txt, calib/*.txt, velodyne/*.bin, split.txt,
    proposals.csv (ground-truth copies in rank order) and detections.csv
    (scored ground-truth copies plus low-scored offset false positives).
    """
    root = Path(root)
    for sub in ("label_2", "calib", "velodyne"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    frame_ids = [f"{i:06d}" for i in range(spec.num_frames)]
    proposals: dict[str, tuple[EvalBox, ...]] = {}
    detections: dict[str, tuple[EvalBox, ...]] = {}
    for frame_id in frame_ids:
        used: set = set()
        labels = [
            _sample_object(rng, spec, used) for _ in range(spec.objects_per_frame)
        ]
        (root / "label_2" / f"{frame_id}.txt").write_text(format_label_file(labels))
        (root / "calib" / f"{frame_id}.txt").write_text(CALIB_TEXT)

        chunks = [_object_points(rng, lab, spec.points_per_object) for lab in labels]
        chunks.append(_clutter_points(rng, spec.clutter_points))
        cam = np.concatenate(chunks, axis=0)
        velo = _to_velodyne(cam).astype("<f4")
        (root / "velodyne" / f"{frame_id}.bin").write_bytes(velo.tobytes(order="C"))

        proposals[frame_id] = tuple(
            EvalBox(frame_id, lab.class_name, box3d_from_label(lab), rank=pos)
            for pos, lab in enumerate(labels, start=1)
        )
        dets = [
            EvalBox(
                frame_id,
                lab.class_name,
                box3d_from_label(lab),
                score=round(0.9 - 0.002 * pos, 6),
            )
            for pos, lab in enumerate(labels)
        ]
        dets.extend(
            EvalBox(
                frame_id,
                labels[pos].class_name,
                _shifted_box(labels[pos], 2.5),
                score=round(0.3 - 0.002 * pos, 6),
            )
            for pos in range(min(2, len(labels)))
        )
        detections[frame_id] = tuple(dets)

    (root / "split.txt").write_text("".join(f"{fid}\n" for fid in frame_ids))
    export_proposals(ProposalSet(frames=proposals), root / "proposals.csv")
    export_detections(DetectionSet(frames=detections), root / "detections.csv")
    return root


def fixture_cloud(points_cam: np.ndarray) -> PointCloud:
    """Wrap raw camera-frame fixture points as a PointCloud (testing aid)."""
    return PointCloud(points=points_cam, frame=Frame.RECT_CAMERA)
