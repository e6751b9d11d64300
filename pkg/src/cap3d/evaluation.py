"""Three-level geometric evaluation on KITTI-format ground truth.

Level 1: coverage histograms of the best single-anchor overlap fraction
(A_max / A_GT) per ground-truth footprint. Level 2: proposal recall versus
proposal count at a 3D IoU threshold (many-to-many matching). Level 3:
difficulty-bucketed 3D average precision over scored detections (greedy
one-to-one matching, 11- or 40-point interpolation).

Proposals and detections are ingested from CSV files, so externally
produced region proposals can be scored without any network in the loop.
Ground truth whose footprint center lies outside the BEV crop area is
excluded from every metric (coverage reports how many).
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

from .anchors import AnchorSet, best_overlap_fraction
from .bev import BevConfig
from .errors import EvaluationError, FormatError
from .geometry import Box3D, OrientedBox2D, iou_3d
from .kitti_io import DONT_CARE, ObjectLabel

PROPOSAL_CSV_HEADER = ["frame", "rank", "x", "z", "y", "l", "h", "w", "yaw", "class"]
DETECTION_CSV_HEADER = ["frame", "score", "x", "z", "y", "l", "h", "w", "yaw", "class"]

DEFAULT_RECALL_NS = (10, 30, 100, 300, 1024)


class Difficulty(enum.IntEnum):
    EASY = 0
    MODERATE = 1
    HARD = 2
    IGNORED = 3


# (min 2D box height in pixels, max occlusion level, max truncation)
DIFFICULTY_DEFAULTS = {
    Difficulty.EASY: (40.0, 0, 0.15),
    Difficulty.MODERATE: (25.0, 1, 0.30),
    Difficulty.HARD: (25.0, 2, 0.50),
}


@dataclass(frozen=True)
class DifficultyFilter:
    level: Difficulty
    min_bbox_height_px: float
    max_occlusion: int
    max_truncation: float

    @classmethod
    def from_level(cls, level: Difficulty) -> "DifficultyFilter":
        min_h, max_occ, max_trunc = DIFFICULTY_DEFAULTS[level]
        return cls(level, min_h, max_occ, max_trunc)

    def admits(self, label: ObjectLabel) -> bool:
        return (
            label.bbox_height_px >= self.min_bbox_height_px
            and label.occlusion <= self.max_occlusion
            and label.truncation <= self.max_truncation
        )


def assign_difficulty(
    label: ObjectLabel, filters: Optional[Sequence[DifficultyFilter]] = None
) -> Difficulty:
    """Smallest difficulty whose thresholds the label meets, else IGNORED.

    DontCare entries are always IGNORED (their sentinel fields would
    otherwise satisfy any occlusion/truncation bound).
    """
    if label.class_name == DONT_CARE:
        return Difficulty.IGNORED
    if filters is None:
        filters = [
            DifficultyFilter.from_level(lv)
            for lv in (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD)
        ]
    for filt in filters:
        if filt.admits(label):
            return filt.level
    return Difficulty.IGNORED


def footprint_from_label(label: ObjectLabel) -> OrientedBox2D:
    h, w, l = label.dims
    x, _, z = label.location
    return OrientedBox2D((x, z), (l / 2.0, w / 2.0), label.rotation_y)


def box3d_from_label(label: ObjectLabel) -> Box3D:
    """Object box with the vertical axis pointing up (y_bottom = -location.y)."""
    h, _, _ = label.dims
    _, y, _ = label.location
    return Box3D(footprint_from_label(label), y_bottom=-y, height=h)


def _inside_crop(x: float, z: float, cfg: BevConfig) -> bool:
    return (
        cfg.x_range[0] <= x < cfg.x_range[1] and cfg.z_range[0] <= z < cfg.z_range[1]
    )


@dataclass(frozen=True)
class EvalBox:
    """One ingested proposal or detection."""

    frame_id: str
    class_name: str
    box: Box3D
    rank: Optional[int] = None  # proposals: 1-based rank order
    score: Optional[float] = None  # detections: confidence in [0, 1]


@dataclass(frozen=True)
class ProposalSet:
    """Per-frame proposals, each frame's tuple in ascending rank order."""

    frames: dict[str, tuple[EvalBox, ...]] = field(default_factory=dict)

    def num_boxes(self) -> int:
        return sum(len(v) for v in self.frames.values())


@dataclass(frozen=True)
class DetectionSet:
    """Per-frame scored detections in file order."""

    frames: dict[str, tuple[EvalBox, ...]] = field(default_factory=dict)

    def num_boxes(self) -> int:
        return sum(len(v) for v in self.frames.values())


def _parse_eval_row(row, lineno, kind):
    if len(row) != 10:
        raise FormatError(f"expected 10 fields, got {len(row)}", line=lineno)
    frame = row[0]
    try:
        key = int(row[1]) if kind == "proposal" else float(row[1])
        x, z, y, l, h, w, yaw = (float(v) for v in row[2:9])
    except ValueError as exc:
        raise FormatError(f"bad value ({exc})", line=lineno) from None
    if kind == "proposal" and key < 1:
        raise FormatError(f"rank {key} must be >= 1", line=lineno)
    if kind == "detection" and not (math.isfinite(key) and 0.0 <= key <= 1.0):
        raise FormatError(f"score {key} outside [0, 1]", line=lineno)
    try:
        box = Box3D(OrientedBox2D((x, z), (l / 2.0, w / 2.0), yaw), y_bottom=-y, height=h)
    except ValueError as exc:
        raise FormatError(str(exc), line=lineno) from None
    return frame, key, box, row[9]


def _ingest(path: str | Path, kind: str) -> dict[str, list]:
    text = Path(path).read_text()
    if not text.strip():
        return {}
    want_header = PROPOSAL_CSV_HEADER if kind == "proposal" else DETECTION_CSV_HEADER
    per_frame: dict[str, list] = {}
    reader = csv.reader(text.splitlines())
    header = next(reader)
    if header != want_header:
        raise FormatError(f"bad header {header}, want {want_header}", line=1)
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        frame, key, box, cls = _parse_eval_row(row, lineno, kind)
        if kind == "proposal":
            ranks = {e.rank for e in per_frame.get(frame, [])}
            if key in ranks:
                raise FormatError(f"duplicate rank {key} for frame {frame}", line=lineno)
            entry = EvalBox(frame, cls, box, rank=key)
        else:
            entry = EvalBox(frame, cls, box, score=key)
        per_frame.setdefault(frame, []).append(entry)
    return per_frame


def ingest_proposals(path: str | Path) -> ProposalSet:
    """Read a `frame,rank,x,z,y,l,h,w,yaw,class` CSV; ranks sort each frame."""
    per_frame = _ingest(path, "proposal")
    return ProposalSet(
        frames={f: tuple(sorted(v, key=lambda e: e.rank)) for f, v in per_frame.items()}
    )


def ingest_detections(path: str | Path) -> DetectionSet:
    """Read a `frame,score,x,z,y,l,h,w,yaw,class` CSV (file order kept)."""
    per_frame = _ingest(path, "detection")
    return DetectionSet(frames={f: tuple(v) for f, v in per_frame.items()})


def _eval_box_row(entry: EvalBox, key) -> list[str]:
    fp = entry.box.footprint
    return [
        entry.frame_id,
        key,
        repr(float(fp.center[0])),
        repr(float(fp.center[1])),
        repr(float(-entry.box.y_bottom)),
        repr(float(fp.half_dims[0] * 2.0)),
        repr(float(entry.box.height)),
        repr(float(fp.half_dims[1] * 2.0)),
        repr(float(fp.yaw)),
        entry.class_name,
    ]


def export_proposals(pset: ProposalSet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PROPOSAL_CSV_HEADER)
        for frame in sorted(pset.frames):
            for entry in pset.frames[frame]:
                writer.writerow(_eval_box_row(entry, str(int(entry.rank))))


def export_detections(dset: DetectionSet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DETECTION_CSV_HEADER)
        for frame in sorted(dset.frames):
            for entry in dset.frames[frame]:
                writer.writerow(_eval_box_row(entry, repr(float(entry.score))))


@dataclass(frozen=True)
class CoverageHistogram:
    """Distribution of best-anchor overlap fractions for one (class, n)."""

    class_name: str
    n_clusters: int
    bin_edges: tuple[float, ...]  # bins+1 edges spanning [0, 1]
    normalized_counts: tuple[float, ...]  # sums to 1 when num_gt > 0
    mean_overlap: Optional[float]
    frac_above: dict[float, Optional[float]]  # threshold -> fraction of GT >= it
    num_gt: int
    num_excluded: int  # ground truth outside the crop area

    @property
    def empty(self) -> bool:
        return self.num_gt == 0

    def to_dict(self) -> dict:
        return {
            "class": self.class_name,
            "n_clusters": self.n_clusters,
            "bin_edges": list(self.bin_edges),
            "normalized_counts": list(self.normalized_counts),
            "mean_overlap": self.mean_overlap,
            "frac_above": {repr(float(t)): v for t, v in self.frac_above.items()},
            "num_gt": self.num_gt,
            "num_excluded": self.num_excluded,
        }


def overlap_fractions_by_frame(
    gts_by_frame: Mapping[str, Sequence[ObjectLabel]],
    anchor_source: Union[AnchorSet, Mapping[str, AnchorSet]],
    class_name: str,
    bev_cfg: Optional[BevConfig] = None,
) -> tuple[dict[str, list[float]], int]:
    """Per-frame overlap fractions plus the out-of-crop exclusion tally."""
    cfg = bev_cfg if bev_cfg is not None else BevConfig()
    fractions: dict[str, list[float]] = {}
    excluded = 0
    for frame_id in sorted(gts_by_frame):
        if isinstance(anchor_source, AnchorSet):
            aset = anchor_source
        else:
            if frame_id not in anchor_source:
                raise EvaluationError(f"no anchors for frame {frame_id}")
            aset = anchor_source[frame_id]
        per_frame = []
        for label in gts_by_frame[frame_id]:
            if label.class_name != class_name:
                continue
            x, _, z = label.location
            if not _inside_crop(x, z, cfg):
                excluded += 1
                continue
            per_frame.append(best_overlap_fraction(footprint_from_label(label), aset))
        fractions[frame_id] = per_frame
    return fractions, excluded


def histogram_from_fractions(
    fractions: Sequence[float],
    class_name: str,
    n_clusters: int,
    bins: int = 20,
    thresholds: Sequence[float] = (0.85,),
    num_excluded: int = 0,
) -> CoverageHistogram:
    edges = tuple(i / bins for i in range(bins + 1))
    counts = [0] * bins
    for f in fractions:
        counts[min(int(f * bins), bins - 1)] += 1
    total = len(fractions)
    if total:
        normalized = tuple(c / total for c in counts)
        mean = sum(fractions) / total
        frac_above = {
            float(t): sum(1 for f in fractions if f >= t) / total for t in thresholds
        }
    else:
        normalized = tuple(0.0 for _ in counts)
        mean = None
        frac_above = {float(t): None for t in thresholds}
    return CoverageHistogram(
        class_name=class_name,
        n_clusters=n_clusters,
        bin_edges=edges,
        normalized_counts=normalized,
        mean_overlap=mean,
        frac_above=frac_above,
        num_gt=total,
        num_excluded=num_excluded,
    )


def coverage_histogram(
    gts_by_frame: Mapping[str, Sequence[ObjectLabel]],
    anchor_source: Union[AnchorSet, Mapping[str, AnchorSet]],
    class_name: str,
    bins: int = 20,
    thresholds: Sequence[float] = (0.85,),
    bev_cfg: Optional[BevConfig] = None,
    n_clusters: Optional[int] = None,
) -> CoverageHistogram:
    """Histogram of per-GT best-anchor overlap (A_max / A_GT) for one class.

    ``anchor_source`` is either one AnchorSet shared by all frames or a
    mapping frame id -> AnchorSet covering every ground-truth frame. Ground
    truth outside the crop is excluded and tallied in ``num_excluded``.
    """
    per_frame, excluded = overlap_fractions_by_frame(
        gts_by_frame, anchor_source, class_name, bev_cfg
    )
    fractions = [f for frame_id in sorted(per_frame) for f in per_frame[frame_id]]
    if n_clusters is None:
        aset = (
            anchor_source
            if isinstance(anchor_source, AnchorSet)
            else next(iter(anchor_source.values()), None)
        )
        n_clusters = len(aset.counts_by_cluster) if aset is not None else 0
    return histogram_from_fractions(
        fractions, class_name, n_clusters, bins, thresholds, excluded
    )


@dataclass(frozen=True)
class RecallCurve:
    class_name: str
    iou_threshold: float
    points: tuple[tuple[int, float], ...]  # (N proposals, recall)
    num_gt: int

    def to_dict(self) -> dict:
        return {
            "class": self.class_name,
            "iou_threshold": self.iou_threshold,
            "num_gt": self.num_gt,
            "points": [[n, r] for n, r in self.points],
        }


def recall_at_n(
    proposals: ProposalSet,
    gts_by_frame: Mapping[str, Sequence[ObjectLabel]],
    class_name: str,
    iou_threshold: float = 0.5,
    ns: Sequence[int] = DEFAULT_RECALL_NS,
    bev_cfg: Optional[BevConfig] = None,
    difficulty: Optional[Difficulty] = None,
) -> RecallCurve:
    """Fraction of ground truth recalled by the top-N proposals per frame.

    A ground truth counts as recalled at N when any of its frame's first N
    proposals (rank order) of the same class reaches the IoU threshold;
    one proposal may recall several ground truths. ``difficulty``
    optionally restricts the ground truth to that bucket and easier.
    """
    ns = [int(n) for n in ns]
    if any(n <= 0 for n in ns):
        raise ValueError(f"proposal counts must be positive, got {ns}")
    if sorted(ns) != ns:
        raise ValueError(f"proposal counts must be ascending, got {ns}")
    cfg = bev_cfg if bev_cfg is not None else BevConfig()

    first_match_ranks: list[Optional[int]] = []
    for frame_id in sorted(gts_by_frame):
        props = [
            e
            for e in proposals.frames.get(frame_id, ())
            if e.class_name == class_name
        ]
        for label in gts_by_frame[frame_id]:
            if label.class_name != class_name:
                continue
            x, _, z = label.location
            if not _inside_crop(x, z, cfg):
                continue
            if difficulty is not None and assign_difficulty(label) > difficulty:
                continue
            gt_box = box3d_from_label(label)
            first = None
            for pos, prop in enumerate(props, start=1):
                if iou_3d(gt_box, prop.box) >= iou_threshold:
                    first = pos
                    break
            first_match_ranks.append(first)

    total = len(first_match_ranks)
    points = []
    for n in ns:
        recalled = sum(1 for r in first_match_ranks if r is not None and r <= n)
        points.append((n, recalled / total if total else 0.0))
    return RecallCurve(
        class_name=class_name,
        iou_threshold=iou_threshold,
        points=tuple(points),
        num_gt=total,
    )


@dataclass(frozen=True)
class ApResult:
    class_name: str
    difficulty: Difficulty
    iou_threshold: float
    ap: Optional[float]  # percentage; None when the bucket has no ground truth
    interpolation: str  # "R11" | "R40"
    precision_recall_points: tuple[tuple[float, float], ...]  # (recall, precision)
    num_gt: int
    num_detections: int

    def to_dict(self) -> dict:
        return {
            "class": self.class_name,
            "difficulty": self.difficulty.name,
            "iou_threshold": self.iou_threshold,
            "interpolation": self.interpolation,
            "ap": self.ap,
            "num_gt": self.num_gt,
            "num_detections": self.num_detections,
            "precision_recall_points": [[r, p] for r, p in self.precision_recall_points],
        }


def _interp_grid(interpolation: str) -> list[float]:
    if interpolation == "R11":
        return [i / 10 for i in range(11)]
    if interpolation == "R40":
        return [k / 40 for k in range(1, 41)]
    raise ValueError(f"unknown interpolation {interpolation!r}")


def envelope_ap(
    pr_points: Sequence[tuple[float, float]], interpolation: str
) -> float:
    """Interpolated AP (percent): mean over the recall grid of the maximum
    precision among points at recall >= the grid value."""
    grid = _interp_grid(interpolation)
    total = 0.0
    for r in grid:
        total += max((p for rec, p in pr_points if rec >= r), default=0.0)
    return 100.0 * total / len(grid)


def average_precision(
    detections: DetectionSet,
    gts_by_frame: Mapping[str, Sequence[ObjectLabel]],
    class_name: str,
    difficulty: Difficulty,
    iou_threshold: float = 0.5,
    interpolation: str = "R11",
    bev_cfg: Optional[BevConfig] = None,
) -> ApResult:
    """3D AP with greedy one-to-one matching at the given difficulty.

    Ground truth harder than the selected difficulty (or IGNORED) neither
    counts toward recall nor yields true positives, but a detection whose
    best match is such a box is absorbed without a false-positive penalty.
    Detections are processed in descending score order (ties keep frame,
    then in-frame, order); each matches the not-yet-matched ground truth of
    highest IoU >= the threshold. AP is None when the bucket is empty.
    """
    cfg = bev_cfg if bev_cfg is not None else BevConfig()
    per_frame_gt: dict[str, list[tuple[Box3D, bool]]] = {}
    num_gt = 0
    for frame_id in sorted(gts_by_frame):
        entries = []
        for label in gts_by_frame[frame_id]:
            if label.class_name != class_name:
                continue
            x, _, z = label.location
            if not _inside_crop(x, z, cfg):
                continue
            countable = assign_difficulty(label) <= difficulty
            entries.append((box3d_from_label(label), countable))
            num_gt += int(countable)
        per_frame_gt[frame_id] = entries

    ordered = [
        det
        for frame_id in sorted(detections.frames)
        for det in detections.frames[frame_id]
        if det.class_name == class_name
    ]
    ordered.sort(key=lambda det: -det.score)  # stable: ties keep frame order
    num_det = len(ordered)

    if num_gt == 0:
        return ApResult(
            class_name, difficulty, iou_threshold, None, interpolation, (), 0, num_det
        )

    matched: dict[str, list[bool]] = {
        f: [False] * len(v) for f, v in per_frame_gt.items()
    }
    tp = fp = 0
    pr_points: list[tuple[float, float]] = []
    for det in ordered:
        gt_entries = per_frame_gt.get(det.frame_id, [])
        best_iou = 0.0
        best_idx = None
        for idx, (gt_box, countable) in enumerate(gt_entries):
            if countable and matched[det.frame_id][idx]:
                continue  # absorbing (non-countable) boxes stay available
            iou = iou_3d(det.box, gt_box)
            if iou >= iou_threshold and iou > best_iou:
                best_iou = iou
                best_idx = idx
        if best_idx is not None:
            if gt_entries[best_idx][1]:
                matched[det.frame_id][best_idx] = True
                tp += 1
            else:
                continue  # absorbed: no precision/recall contribution
        else:
            fp += 1
        pr_points.append((tp / num_gt, tp / (tp + fp)))

    ap = envelope_ap(pr_points, interpolation)
    return ApResult(
        class_name=class_name,
        difficulty=difficulty,
        iou_threshold=iou_threshold,
        ap=ap,
        interpolation=interpolation,
        precision_recall_points=tuple(pr_points),
        num_gt=num_gt,
        num_detections=num_det,
    )
