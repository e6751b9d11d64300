"""Exact rotated-rectangle and 3D box overlaps.

Boxes live in the BEV plane (x, z); yaw is measured counter-clockwise from
the +x axis. Intersections use Sutherland-Hodgman clipping of convex CCW
polygons, so areas are exact up to floating point (no rasterized
approximations). Everything here is a pure function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

# Clip outputs below this area are floating-point slivers and snap to 0.
DEGENERATE_AREA = 1e-12

Point = tuple[float, float]


@dataclass(frozen=True)
class OrientedBox2D:
    """Rotated rectangle: center (x, z), half extents (l/2, w/2), yaw."""

    center: Point
    half_dims: tuple[float, float]
    yaw: float

    def __post_init__(self):
        if not (self.half_dims[0] > 0 and self.half_dims[1] > 0):
            raise ValueError(f"non-positive half dims {self.half_dims}")

    @classmethod
    def from_size(cls, center: Point, length: float, width: float, yaw: float):
        return cls(center, (length / 2.0, width / 2.0), yaw)

    @property
    def area(self) -> float:
        return 4.0 * self.half_dims[0] * self.half_dims[1]


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: BEV footprint plus a vertical interval.

    The vertical axis points up; the box occupies
    ``[y_bottom, y_bottom + height]``. Camera-frame data (y down) negates
    y at construction time, see ``evaluation.box3d_from_label``.
    """

    footprint: OrientedBox2D
    y_bottom: float
    height: float

    def __post_init__(self):
        if not self.height > 0:
            raise ValueError(f"non-positive height {self.height}")

    @property
    def volume(self) -> float:
        return self.footprint.area * self.height


_HALF_PI = math.pi / 2
# cos/sin at exact quarter turns; math.sin(pi/2 * k) leaves ~1e-16 residue
# that would make nominally axis-aligned boxes (anchors) miss exact overlap.
_EXACT_TRIG = {0: (1.0, 0.0), 1: (0.0, 1.0), 2: (-1.0, 0.0), 3: (0.0, -1.0)}


def _cos_sin(yaw: float) -> tuple[float, float]:
    if yaw % _HALF_PI == 0.0:
        return _EXACT_TRIG[int(yaw / _HALF_PI) % 4]
    return math.cos(yaw), math.sin(yaw)


def box_corners(box: OrientedBox2D) -> list[Point]:
    """The four corners of the rectangle, in counter-clockwise order."""
    cx, cz = box.center
    hl, hw = box.half_dims
    c, s = _cos_sin(box.yaw)
    return [
        (cx + dx * c - dz * s, cz + dx * s + dz * c)
        for dx, dz in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    ]


def polygon_area(poly: Sequence[Point]) -> float:
    """Shoelace area; positive for CCW vertex order."""
    n = len(poly)
    acc = 0.0
    for i in range(n):
        x1, z1 = poly[i]
        x2, z2 = poly[(i + 1) % n]
        acc += x1 * z2 - x2 * z1
    return 0.5 * acc


def _cross(ax, az, bx, bz, px, pz):
    # >0 when p is left of the directed line a->b (the CCW interior side).
    return (bx - ax) * (pz - az) - (bz - az) * (px - ax)


def polygon_contains(outer: Sequence[Point], inner: Sequence[Point]) -> bool:
    """True when every vertex of ``inner`` is inside-or-on CCW ``outer``.

    For convex polygons this is full containment. The test is exact for
    coincident polygons (self-comparison cancels in the cross products), so
    an anchor identical to a ground-truth box scores overlap exactly 1.
    """
    n = len(outer)
    for i in range(n):
        ax, az = outer[i]
        bx, bz = outer[(i + 1) % n]
        for px, pz in inner:
            if _cross(ax, az, bx, bz, px, pz) < 0.0:
                return False
    return True


def polygon_intersection_area(a: Sequence[Point], b: Sequence[Point]) -> float:
    """Intersection area of two convex CCW polygons.

    Clips ``a`` successively against each half-plane of ``b``; returns 0
    for disjoint inputs and snaps sliver results below
    :data:`DEGENERATE_AREA` to 0.
    """
    poly = list(a)
    nb = len(b)
    for i in range(nb):
        if len(poly) < 3:
            return 0.0
        ax, az = b[i]
        bx, bz = b[(i + 1) % nb]
        clipped: list[Point] = []
        prev = poly[-1]
        prev_side = _cross(ax, az, bx, bz, prev[0], prev[1])
        for cur in poly:
            cur_side = _cross(ax, az, bx, bz, cur[0], cur[1])
            if cur_side >= 0.0:
                if prev_side < 0.0:
                    t = prev_side / (prev_side - cur_side)
                    clipped.append(
                        (
                            prev[0] + t * (cur[0] - prev[0]),
                            prev[1] + t * (cur[1] - prev[1]),
                        )
                    )
                clipped.append(cur)
            elif prev_side >= 0.0:
                t = prev_side / (prev_side - cur_side)
                clipped.append(
                    (
                        prev[0] + t * (cur[0] - prev[0]),
                        prev[1] + t * (cur[1] - prev[1]),
                    )
                )
            prev, prev_side = cur, cur_side
        poly = clipped
    if len(poly) < 3:
        return 0.0
    area = polygon_area(poly)
    return area if area > DEGENERATE_AREA else 0.0


def iou_bev(a: OrientedBox2D, b: OrientedBox2D) -> float:
    """BEV intersection-over-union of two rotated rectangles."""
    inter = polygon_intersection_area(box_corners(a), box_corners(b))
    inter = min(inter, a.area, b.area)  # guard fp slivers above the true max
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def _vertical_overlap(a: Box3D, b: Box3D) -> float:
    lo = max(a.y_bottom, b.y_bottom)
    hi = min(a.y_bottom + a.height, b.y_bottom + b.height)
    return max(0.0, hi - lo)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: footprint intersection area times vertical overlap length."""
    dv = _vertical_overlap(a, b)
    if dv == 0.0:
        return 0.0
    inter_area = polygon_intersection_area(
        box_corners(a.footprint), box_corners(b.footprint)
    )
    inter = min(inter_area, a.footprint.area, b.footprint.area) * dv
    inter = min(inter, a.volume, b.volume)
    union = a.volume + b.volume - inter
    return inter / union if union > 0 else 0.0


def overlap_fraction(gt: OrientedBox2D, anchors: Sequence[OrientedBox2D]) -> float:
    """Best single-anchor coverage of a ground-truth footprint.

    Returns max_i area(gt intersect anchor_i) / area(gt), in [0, 1]. An
    anchor that fully contains the ground truth scores 1.0.
    """
    if not anchors:
        raise ValueError("anchor list is empty")
    gt_poly = box_corners(gt)
    a_gt = gt.area
    best = 0.0
    for anchor in anchors:
        anchor_poly = box_corners(anchor)
        if polygon_contains(anchor_poly, gt_poly):
            return 1.0
        inter = polygon_intersection_area(gt_poly, anchor_poly)
        if inter > best:
            best = inter
            if best >= a_gt:
                break
    return min(best, a_gt) / a_gt
